// SPDX-License-Identifier: Apache-2.0
// Command-line front end: corpus generation, training, evaluation, indexing,
// mixture fitting, search and the HTTP service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "platemark/persistence.hpp"
#include "platemark/search.hpp"
#include "platemark/service.hpp"
#include "platemark/training.hpp"

namespace fs = std::filesystem;
using namespace platemark;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

constexpr const char* kAuctionsFile = "auctions.csv";
constexpr const char* kMarketFile = "market.csv";

struct Corpus {
  std::vector<AuctionRecord> records;
  MarketSeries market;
};

Corpus load_corpus(const std::string& dir) {
  return {load_auctions((fs::path(dir) / kAuctionsFile).string()), load_market((fs::path(dir) / kMarketFile).string())};
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::uint64_t split_seed_of(const nlohmann::json& metadata) {
  if (!metadata.contains("split_seed")) throw DataError("model metadata lacks the split seed");
  return metadata.at("split_seed").get<std::uint64_t>();
}

std::string metrics_line(const std::string& split, const Metrics& m) {
  return split + "\trmse=" + detail::format_number(m.rmse) + "\tr2=" + detail::format_number(m.r2) +
         "\tn=" + std::to_string(m.n);
}

/// Plates from a text file: one per line, or the plate column of an
/// auctions CSV. Duplicates are dropped, first occurrence wins.
std::vector<Plate> read_plates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string first;
  std::getline(in, first);
  if (!first.empty() && first.back() == '\r') first.pop_back();
  std::vector<Plate> out;
  std::set<std::string> seen;
  auto add = [&](const Plate& p) {
    if (seen.insert(p.canonical()).second) out.push_back(p);
  };
  if (first == kAuctionsHeader) {
    in.seekg(0);
    for (const auto& r : parse_auctions(in)) add(r.plate);
    return out;
  }
  std::size_t lineno = 0;
  auto take = [&](std::string line) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) return;
    try {
      add(parse_plate(line));
    } catch (const PlateError& e) {
      throw DataError(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  };
  take(first);
  for (std::string line; std::getline(in, line);) take(line);
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::size_t n = 20000;
  std::uint64_t seed = 0;
  double noise = 0.3;
  bool no_interaction = false;
  std::string out;
};

int run_gen(const GenArgs& a) {
  SyntheticOptions opt;
  opt.oracle_interaction = !a.no_interaction;
  auto corpus = generate_synthetic(a.n, a.seed, a.noise, opt);
  fs::create_directories(a.out);
  std::ofstream auctions(fs::path(a.out) / kAuctionsFile), market(fs::path(a.out) / kMarketFile);
  if (!auctions || !market) throw DataError("cannot write into " + a.out);
  write_auctions(auctions, corpus.records);
  write_market(market, corpus.market);
  std::cerr << "wrote " << corpus.records.size() << " auctions and " << corpus.market.rows().size()
            << " market rows to " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, out, records;
  bool quiet = false;
};

/// Config document: {"model": {...}, "train": {...}, "split_seed": n,
/// "search_ranges": bool}. Missing sections take defaults.
int run_train(const TrainArgs& a) {
  const nlohmann::json doc = read_json(a.config);
  ModelConfig mc = doc.contains("model") ? model_config_from_json(doc.at("model")) : ModelConfig{};
  nlohmann::json train_doc = doc.contains("train") ? doc.at("train") : nlohmann::json::object();
  if (!train_doc.is_object()) throw ConfigError(a.config + ": \"train\" must be an object");
  if (!train_doc.contains("max_epochs")) train_doc["max_epochs"] = max_epochs_for(mc.extractor);
  TrainConfig tc = train_config_from_json(train_doc);
  const std::uint64_t split_seed = doc.value("split_seed", std::uint64_t{0});
  const bool ranges = doc.value("search_ranges", true);

  Corpus c = load_corpus(a.data);
  SplitDataset ds = build_dataset(c.records, c.market, split_seed);
  Model model(mc, ranges);
  std::cerr << "training " << model.parameter_count() << " parameters on " << ds.train.size() << " examples\n";
  RunRecord rec = train(model, ds, tc, [&](const EpochReport& r) {
    if (!a.quiet)
      std::cerr << "epoch " << r.epoch << " train " << r.train_loss << " valid " << r.valid_loss
                << (r.improved ? " *" : "") << "\n";
  });
  rec.config_id = fs::path(a.config).stem().string();
  save_model(a.out, model, nullptr, dataset_metadata(ds));
  const std::string records = a.records.empty() ? a.out + ".runs.csv" : a.records;
  std::ofstream csv(records);
  if (!csv) throw DataError("cannot write " + records);
  write_run_records(csv, std::span<const RunRecord>(&rec, 1));
  std::cout << metrics_line("train", rec.train) << "\n"
            << metrics_line("valid", rec.valid) << "\n"
            << metrics_line("test", rec.test) << "\n";
  return kOk;
}

struct EvalArgs {
  std::string model, data, split = "test", calibration;
};

int run_eval(const EvalArgs& a) {
  ModelBundle b = load_model(a.model);
  Corpus c = load_corpus(a.data);
  SplitDataset ds = build_dataset(c.records, c.market, split_seed_of(b.metadata));
  auto one = [&](const std::string& name, const std::vector<Example>& xs) {
    if (xs.empty()) throw DataError("split '" + name + "' is empty");
    std::cout << metrics_line(name, evaluate(*b.model, xs)) << "\n";
  };
  if (a.split == "all" || a.split == "train") one("train", ds.train);
  if (a.split == "all" || a.split == "valid") one("valid", ds.valid);
  if (a.split == "all" || a.split == "test") one("test", ds.test);
  if (!a.calibration.empty()) {
    std::ofstream out(a.calibration);
    if (!out) throw DataError("cannot write " + a.calibration);
    write_calibration_csv(out, calibration_bins(*b.model, ds.test));
  }
  return kOk;
}

struct IndexArgs {
  std::string model, plates, out;
};

int run_index(const IndexArgs& a) {
  ModelBundle b = load_model(a.model);
  std::vector<Plate> plates = read_plates(a.plates);
  if (plates.empty()) throw DataError("no plates in " + a.plates);
  LatentIndex index = build_index(*b.model, plates);
  save_index(a.out, index);
  std::cerr << "indexed " << index.size() << " plates, dimension " << index.dim() << "\n";
  return kOk;
}

struct MdnArgs {
  std::string model, data, out;
  std::size_t k = 6, hidden = 256, epochs = 300;
  std::uint64_t seed = 0;
};

int run_mdn_fit(const MdnArgs& a) {
  ModelBundle b = load_model(a.model);
  Corpus c = load_corpus(a.data);
  SplitDataset ds = build_dataset(c.records, c.market, split_seed_of(b.metadata));
  MdnFitOptions opt;
  opt.components = a.k;
  opt.hidden = a.hidden;
  opt.epochs = a.epochs;
  opt.seed = a.seed;
  auto fit = fit_mdn(predict(*b.model, ds.valid), targets_of(ds.valid), opt);
  const double test_nll = mdn_nll(fit.model, predict(*b.model, ds.test), targets_of(ds.test));
  save_model(a.out.empty() ? a.model : a.out, *b.model, &fit.model, b.metadata);
  std::cout << "best_epoch=" << fit.best_epoch << "\tholdout_nll=" << detail::format_number(fit.best_valid_nll)
            << "\ttest_nll=" << detail::format_number(test_nll) << "\n";
  return kOk;
}

struct SearchArgs {
  std::string index, plate, model;
  std::size_t k = 10;
};

int run_search(const SearchArgs& a) {
  LatentIndex index = load_index(a.index);
  const Plate plate = parse_plate(a.plate);
  QueryResult r;
  if (!a.model.empty()) {
    ModelBundle b = load_model(a.model);
    if (model_fingerprint(*b.model) != index.fingerprint()) throw DataError("index was built from a different model");
    r = query(*b.model, index, plate, a.k);
  } else {
    const auto& plates = index.plates();
    auto it = std::find(plates.begin(), plates.end(), plate.canonical());
    if (it == plates.end()) throw DataError(plate.canonical() + " is not in the index; pass --model to embed it");
    auto unit = index.unit_vector(std::size_t(it - plates.begin()));
    r = index.query(unit, plate.canonical(), a.k);
  }
  for (const auto& nb : r.neighbors) std::cout << nb.plate << '\t' << detail::format_number(nb.distance) << '\n';
  if (r.truncated) std::cerr << "index holds fewer than " << a.k << " other plates\n";
  return kOk;
}

struct ServeArgs {
  std::string model, index, data, host = "127.0.0.1", origin = "*";
  int port = 8080;
};

httplib::Server* g_server = nullptr;

int run_serve(const ServeArgs& a) {
  ModelBundle b = load_model(a.model);
  LatentIndex index = load_index(a.index);
  Corpus c = load_corpus(a.data);
  Service service(make_service_state(std::move(b), std::move(index), std::move(c.market), std::move(c.records)));
  httplib::Server server;
  install_routes(server, service, a.origin);
  server.set_tcp_nodelay(true);
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  if (!server.bind_to_port(a.host, a.port)) throw DataError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  std::cerr << "serving model " << service.state()->model_version << " on http://" << a.host << ":" << a.port << "\n";
  server.listen_after_bind();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"platemark: licence-plate auction price estimation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic auction corpus");
  g->add_option("--n", gen.n, "number of auctions")->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "random seed");
  g->add_option("--noise", gen.noise, "log-price noise standard deviation")->check(CLI::NonNegativeNumber);
  g->add_flag("--no-interaction", gen.no_interaction, "drop the market interaction term from the oracle");
  g->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", tr.config, "JSON configuration")->required()->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "corpus directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "model file to write")->required();
  t->add_option("--records", tr.records, "run record CSV (default: <out>.runs.csv)");
  t->add_flag("--quiet", tr.quiet, "no per-epoch progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a model on its data splits");
  e->add_option("--model", ev.model, "model file")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "corpus directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--split", ev.split, "train, valid, test or all")
      ->check(CLI::IsMember({"train", "valid", "test", "all"}));
  e->add_option("--calibration", ev.calibration, "write test-split calibration bins to this CSV");

  IndexArgs ix;
  auto* i = app.add_subcommand("index", "build a similarity index");
  i->add_option("--model", ix.model, "model file")->required()->check(CLI::ExistingFile);
  i->add_option("--plates", ix.plates, "plate list or auctions CSV")->required()->check(CLI::ExistingFile);
  i->add_option("--out", ix.out, "index file to write")->required();

  MdnArgs md;
  auto* m = app.add_subcommand("mdn-fit", "fit the price distribution head");
  m->add_option("--model", md.model, "model file")->required()->check(CLI::ExistingFile);
  m->add_option("--data", md.data, "corpus directory")->required()->check(CLI::ExistingDirectory);
  m->add_option("--k", md.k, "mixture components")->check(CLI::Range(1, 64));
  m->add_option("--hidden", md.hidden, "hidden units")->check(CLI::Range(1, 4096));
  m->add_option("--epochs", md.epochs, "maximum epochs")->check(CLI::PositiveNumber);
  m->add_option("--seed", md.seed, "random seed");
  m->add_option("--out", md.out, "model file to write (default: overwrite --model)");

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "run the HTTP service");
  s->add_option("--model", sv.model, "model file")->required()->check(CLI::ExistingFile);
  s->add_option("--index", sv.index, "index file")->required()->check(CLI::ExistingFile);
  s->add_option("--data", sv.data, "corpus directory")->required()->check(CLI::ExistingDirectory);
  s->add_option("--port", sv.port, "TCP port")->check(CLI::Range(1, 65535));
  s->add_option("--host", sv.host, "bind address");
  s->add_option("--origin", sv.origin, "allowed CORS origin");

  SearchArgs se;
  auto* q = app.add_subcommand("search", "print the nearest plates");
  q->add_option("--index", se.index, "index file")->required()->check(CLI::ExistingFile);
  q->add_option("--plate", se.plate, "query plate")->required();
  q->add_option("--k", se.k, "number of results")->check(CLI::Range(1, 100000));
  q->add_option("--model", se.model, "model file, needed for plates outside the index")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*i) return run_index(ix);
    if (*m) return run_mdn_fit(md);
    if (*s) return run_serve(sv);
    if (*q) return run_search(se);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kNumeric;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
