// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "platemark/dataset.hpp"
#include "platemark/loss.hpp"
#include "platemark/model.hpp"
#include "platemark/optimizer.hpp"

namespace platemark {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 200;
  std::size_t patience = 25;
  std::size_t runs_per_config = 3;
  std::uint64_t seed = 0;
  /// Multiplier on the auxiliary loss; 0 trains the price path alone.
  double aux_loss_weight = 1.0;
  /// Training wall-clock budget in seconds; 0 means unlimited.
  double max_seconds = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1 || max_epochs < 1 || patience < 1 || runs_per_config < 1)
      throw ConfigError("batch_size, max_epochs, patience and runs_per_config must be positive");
    if (patience >= max_epochs) throw ConfigError("patience must be smaller than max_epochs");
    if (!(aux_loss_weight >= 0.0)) throw ConfigError("aux_loss_weight must be >= 0");
    if (!(max_seconds >= 0.0)) throw ConfigError("max_seconds must be >= 0");
  }
};

/// Epoch cap by extractor. Full scale trains ResCNN for 800 epochs and the
/// recurrent units for 120; the desk presets are 200 and 60.
inline std::size_t max_epochs_for(Extractor e, bool full_scale = false) {
  if (e == Extractor::ResCNN) return full_scale ? 800 : 200;
  return full_scale ? 120 : 60;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},       {"patience", c.patience},
          {"runs_per_config", c.runs_per_config}, {"seed", c.seed},
          {"aux_loss_weight", c.aux_loss_weight}, {"max_seconds", c.max_seconds}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<std::size_t>();
    if (j.contains("patience")) c.patience = j.at("patience").get<std::size_t>();
    if (j.contains("runs_per_config")) c.runs_per_config = j.at("runs_per_config").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("aux_loss_weight")) c.aux_loss_weight = j.at("aux_loss_weight").get<double>();
    if (j.contains("max_seconds")) c.max_seconds = j.at("max_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double rmse = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

/// Unweighted RMSE and R^2. With zero target variance R^2 is 1 for a perfect
/// fit and 0 otherwise.
inline Metrics compute_metrics(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw ShapeError("metrics: length mismatch");
  if (predicted.empty()) throw DataError("metrics: empty example list");
  const std::size_t n = actual.size();
  double mean = 0.0;
  for (double a : actual) mean += a;
  mean /= double(n);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ss_res += (predicted[i] - actual[i]) * (predicted[i] - actual[i]);
    ss_tot += (actual[i] - mean) * (actual[i] - mean);
  }
  Metrics m;
  m.n = n;
  m.rmse = std::sqrt(ss_res / double(n));
  m.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
  return m;
}

inline std::vector<double> targets_of(std::span<const Example> examples) {
  std::vector<double> t;
  t.reserve(examples.size());
  for (const auto& e : examples) t.push_back(e.target_log_price);
  return t;
}

inline Metrics evaluate(Model& model, std::span<const Example> examples) {
  if (examples.empty()) throw DataError("evaluate: empty example list");
  return compute_metrics(predict(model, examples), targets_of(examples));
}

struct PatternMetrics {
  std::string pattern;
  double rmse;  // NaN when no example matches
  std::size_t n;
};

inline std::vector<PatternMetrics> per_pattern_metrics(std::span<const double> predicted,
                                                       std::span<const Example> examples,
                                                       std::span<const std::string_view> patterns) {
  std::vector<PatternMetrics> out;
  for (auto pattern : patterns) {
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (!pattern_class(examples[i].plate, pattern)) continue;
      ss += std::pow(predicted[i] - examples[i].target_log_price, 2);
      ++n;
    }
    out.push_back({std::string(pattern), n ? std::sqrt(ss / double(n)) : std::numeric_limits<double>::quiet_NaN(), n});
  }
  return out;
}

inline std::vector<PatternMetrics> per_pattern_metrics(Model& model, std::span<const Example> examples,
                                                       std::span<const std::string_view> patterns = kEvaluationPatterns) {
  return per_pattern_metrics(predict(model, examples), examples, patterns);
}

struct CalibrationBin {
  double lower_hkd;           // bin covers [lower, lower + width) in predicted HKD
  double mean_predicted_hkd;  // bin center used for plotting
  double mean_actual_hkd;
  std::size_t n;
};

/// Groups examples by predicted HKD price in bins of `bin_width_hkd` and
/// averages predicted and realized HKD prices within each bin.
inline std::vector<CalibrationBin> calibration_bins(std::span<const double> predicted_log,
                                                    std::span<const double> actual_log,
                                                    double bin_width_hkd = 1000.0) {
  if (predicted_log.empty() || predicted_log.size() != actual_log.size())
    throw DataError("calibration_bins: need equal-length nonempty inputs");
  if (!(bin_width_hkd > 0)) throw ConfigError("bin width must be positive");
  struct Acc {
    double pred = 0.0, actual = 0.0;
    std::size_t n = 0;
  };
  std::map<long long, Acc> bins;
  for (std::size_t i = 0; i < predicted_log.size(); ++i) {
    const double p = std::exp(predicted_log[i]);
    auto& a = bins[static_cast<long long>(std::floor(p / bin_width_hkd))];
    a.pred += p;
    a.actual += std::exp(actual_log[i]);
    ++a.n;
  }
  std::vector<CalibrationBin> out;
  for (const auto& [idx, a] : bins)
    out.push_back({double(idx) * bin_width_hkd, a.pred / double(a.n), a.actual / double(a.n), a.n});
  return out;
}

inline std::vector<CalibrationBin> calibration_bins(Model& model, std::span<const Example> examples,
                                                    double bin_width_hkd = 1000.0) {
  return calibration_bins(predict(model, examples), targets_of(examples), bin_width_hkd);
}

/// Least-squares slope of bin mean actual on bin center, each bin weighted
/// by its population.
inline double calibration_slope(std::span<const CalibrationBin> bins) {
  double w = 0.0, mx = 0.0, my = 0.0;
  for (const auto& b : bins) {
    w += double(b.n);
    mx += double(b.n) * b.mean_predicted_hkd;
    my += double(b.n) * b.mean_actual_hkd;
  }
  mx /= w;
  my /= w;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& b : bins) {
    sxy += double(b.n) * (b.mean_predicted_hkd - mx) * (b.mean_actual_hkd - my);
    sxx += double(b.n) * (b.mean_predicted_hkd - mx) * (b.mean_predicted_hkd - mx);
  }
  if (sxx == 0.0) throw NumericError("calibration_slope: bins have no spread");
  return sxy / sxx;
}

inline void write_calibration_csv(std::ostream& out, std::span<const CalibrationBin> bins) {
  out << "bin_lower_hkd,mean_predicted_hkd,mean_actual_hkd,n\n";
  for (const auto& b : bins)
    out << detail::format_number(b.lower_hkd) << ',' << detail::format_number(b.mean_predicted_hkd) << ','
        << detail::format_number(b.mean_actual_hkd) << ',' << b.n << '\n';
}

// ---------------------------------------------------------------------------
// Multi-task loss

struct LossTerms {
  double total = 0.0, price = 0.0, aux = 0.0;
  Tensor d_price, d_aux;
};

/// total = L_price + aux_weight * (1/32) * sum of the 32 per-target losses.
/// Every term is a sample-weighted mean with the examples' weights.
inline LossTerms multitask_loss(const ForwardOutput& out, std::span<const Example* const> batch,
                                AuxTargets aux_targets, double aux_weight, double price_shift, double price_scale) {
  const std::size_t n = batch.size();
  std::vector<double> w(n), target(n), col_pred(n), col_target(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = batch[i]->weight;
    target[i] = batch[i]->target_log_price;
  }
  LossTerms r;
  LossResult price = loss_weighted_mse(out.predicted_log_price.values(), target, w);
  r.price = price.value;
  r.d_price = Tensor({n}, std::move(price.grad));
  r.d_aux = Tensor({n, kNumAuxFeatures});
  const double per_target = aux_weight / double(kNumAuxFeatures);
  for (std::size_t j = 0; j < kNumAuxFeatures; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      col_pred[i] = out.aux_predictions[i * kNumAuxFeatures + j];
      col_target[i] = aux_targets == AuxTargets::Features ? double(batch[i]->aux_targets[j])
                                                          : (target[i] - price_shift) / price_scale;
    }
    const bool binary = aux_targets == AuxTargets::Features && j < kNumBinaryFeatures;
    LossResult l = binary ? loss_bce(col_pred, col_target, w) : loss_weighted_mse(col_pred, col_target, w);
    r.aux += l.value / double(kNumAuxFeatures);
    for (std::size_t i = 0; i < n; ++i) r.d_aux[i * kNumAuxFeatures + j] = per_target * l.grad[i];
  }
  r.total = r.price + aux_weight * r.aux;
  return r;
}

/// Eval-mode multi-task loss over a whole split, combined across chunks by
/// weight so the result equals the single-batch value.
inline double dataset_loss(Model& model, std::span<const Example> examples, double aux_weight,
                           std::size_t chunk = 1024) {
  double total = 0.0, weight = 0.0;
  std::vector<const Example*> ptrs;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    ptrs.clear();
    double cw = 0.0;
    for (std::size_t i = start; i < std::min(examples.size(), start + chunk); ++i) {
      ptrs.push_back(&examples[i]);
      cw += examples[i].weight;
    }
    auto out = model.forward(make_batch(ptrs), {Mode::Eval, 0});
    auto terms = multitask_loss(out, ptrs, model.config().aux_targets, aux_weight, model.price_shift(),
                                model.price_scale());
    total += terms.total * cw;
    weight += cw;
  }
  return total / weight;
}

// ---------------------------------------------------------------------------
// Training loop

struct RunRecord {
  std::string config_id;
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double initial_train_loss = 0.0;
  double initial_valid_loss = 0.0;
  std::vector<double> train_history;  // mean training-batch loss per epoch
  std::vector<double> valid_history;  // Eval-mode validation loss per epoch
  std::size_t best_epoch = 0;         // 1-based
  double best_valid_loss = 0.0;
  Metrics train, valid, test;
  std::size_t params = 0;
  double seconds = 0.0;  // training steps only, evaluation excluded
  std::string error;     // set when the run failed inside a grid
};

struct EpochReport {
  std::size_t epoch;
  double train_loss, valid_loss, seconds;
  bool improved;
};

/// Sets the model's price scaler from the training targets.
inline void fit_price_scaler(Model& model, std::span<const Example> train) {
  double mean = 0.0;
  for (const auto& e : train) mean += e.target_log_price;
  mean /= double(train.size());
  double var = 0.0;
  for (const auto& e : train) var += (e.target_log_price - mean) * (e.target_log_price - mean);
  var /= double(train.size());
  model.set_price_scaler(double(float(mean)), double(float(var > 0 ? std::sqrt(var) : 1.0)));
}

/// Adam on the multi-task loss with early stopping. The model is rounded to
/// float precision after every epoch so the kept best state is exactly what
/// a saved file would hold; the best state is reloaded before returning.
inline RunRecord train(Model& model, const SplitDataset& ds, const TrainConfig& cfg,
                       const std::function<void(const EpochReport&)>& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty() || ds.valid.empty()) throw DataError("train: training and validation splits must be nonempty");
  using clock = std::chrono::steady_clock;

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.params = model.parameter_count();
  fit_price_scaler(model, ds.train);
  model.quantize();
  rec.initial_train_loss = dataset_loss(model, ds.train, cfg.aux_loss_weight);
  rec.initial_valid_loss = dataset_loss(model, ds.valid, cfg.aux_loss_weight);

  Adam adam({cfg.learning_rate});
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const Example*> batch;
  ModelState best = model.save_state();
  rec.best_valid_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  double train_seconds = 0.0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = clock::now();
    Rng rng(derive_seed(cfg.seed, 0xe90c0000ull + epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(&ds.train[order[i]]);
      const ForwardContext ctx{Mode::Train, derive_seed(cfg.seed, (epoch << 24) + batches)};
      ForwardOutput out;
      try {
        out = model.forward(make_batch(batch), ctx);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      LossTerms terms = multitask_loss(out, batch, model.config().aux_targets, cfg.aux_loss_weight,
                                       model.price_shift(), model.price_scale());
      if (!std::isfinite(terms.total))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": non-finite loss");
      model.zero_grad();
      model.backward(terms.d_price, terms.d_aux);
      adam.step(model.params());
      loss_sum += terms.total;
      ++batches;
    }
    model.quantize();
    train_seconds += std::chrono::duration<double>(clock::now() - t0).count();

    const double valid_loss = dataset_loss(model, ds.valid, cfg.aux_loss_weight);
    if (!std::isfinite(valid_loss))
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": non-finite validation loss");
    rec.train_history.push_back(loss_sum / double(batches));
    rec.valid_history.push_back(valid_loss);
    const bool improved = valid_loss < rec.best_valid_loss;
    if (improved) {
      rec.best_valid_loss = valid_loss;
      rec.best_epoch = epoch;
      best = model.save_state();
      stale = 0;
    } else {
      ++stale;
    }
    if (on_epoch) on_epoch({epoch, rec.train_history.back(), valid_loss, train_seconds, improved});
    if (stale >= cfg.patience) break;
    if (cfg.max_seconds > 0.0 && train_seconds >= cfg.max_seconds) break;
  }
  model.load_state(best);
  rec.seconds = train_seconds;
  rec.train = evaluate(model, ds.train);
  rec.valid = evaluate(model, ds.valid);
  if (!ds.test.empty()) rec.test = evaluate(model, ds.test);
  return rec;
}

// ---------------------------------------------------------------------------
// Baselines

inline constexpr std::size_t kHedonicColumns = 1 + kNumAuxFeatures + kAuxInputs;

inline std::array<double, kHedonicColumns> hedonic_row(const Example& e) {
  std::array<double, kHedonicColumns> row{};
  row[0] = 1.0;
  for (std::size_t j = 0; j < kNumAuxFeatures; ++j) row[1 + j] = double(e.aux_targets[j]);
  for (std::size_t j = 0; j < kAuxInputs; ++j) row[1 + kNumAuxFeatures + j] = e.aux_in[j];
  return row;
}

struct HedonicResult {
  std::vector<double> coefficients;  // intercept, 32 plate features, 7 aux inputs
  Metrics train, valid, test;

  double predict(const Example& e) const {
    auto row = hedonic_row(e);
    double s = 0.0;
    for (std::size_t j = 0; j < kHedonicColumns; ++j) s += coefficients[j] * row[j];
    return s;
  }
};

/// Ordinary least squares of log price on the plate features, auxiliary
/// inputs and an intercept, through the normal equations with a small ridge.
inline HedonicResult baseline_hedonic(const SplitDataset& ds, double ridge = 1e-8) {
  if (ds.train.empty()) throw DataError("hedonic baseline: empty training split");
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(kHedonicColumns, kHedonicColumns);
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(kHedonicColumns);
  for (const auto& e : ds.train) {
    auto row = hedonic_row(e);
    Eigen::Map<const Eigen::VectorXd> x(row.data(), kHedonicColumns);
    xtx.noalias() += x * x.transpose();
    xty.noalias() += x * e.target_log_price;
  }
  xtx.diagonal().array() += ridge;
  Eigen::LDLT<Eigen::MatrixXd> solver(xtx);
  if (solver.info() != Eigen::Success || !solver.isPositive())
    throw NumericError("hedonic baseline: singular normal equations");
  Eigen::VectorXd beta = solver.solve(xty);
  if (!beta.allFinite()) throw NumericError("hedonic baseline: non-finite coefficients");
  HedonicResult r;
  r.coefficients.assign(beta.data(), beta.data() + beta.size());
  auto metrics = [&](const std::vector<Example>& split) {
    std::vector<double> p;
    for (const auto& e : split) p.push_back(r.predict(e));
    return compute_metrics(p, targets_of(split));
  };
  r.train = metrics(ds.train);
  if (!ds.valid.empty()) r.valid = metrics(ds.valid);
  if (!ds.test.empty()) r.test = metrics(ds.test);
  return r;
}

using TokenCounts = std::array<int, kVocabSize>;

inline TokenCounts token_counts(const EncodedPlate& e) {
  TokenCounts c{};
  for (auto t : e) ++c[t];
  return c;
}

/// Unigram kNN regressor: plates are token-count vectors, the prediction is
/// the mean log price of the k nearest training plates by Euclidean
/// distance, ties broken by canonical plate string.
class UnigramKnn {
 public:
  UnigramKnn(std::span<const Example> train, std::size_t k) : k_(k) {
    if (train.empty()) throw DataError("kNN baseline: empty training split");
    if (k < 1) throw ConfigError("kNN baseline: k must be >= 1");
    std::map<TokenCounts, std::size_t> index;
    for (const auto& e : train) {
      auto counts = token_counts(e.encoded);
      auto [it, inserted] = index.emplace(counts, groups_.size());
      if (inserted) groups_.push_back({counts, {}});
      groups_[it->second].members.push_back({e.plate.canonical(), e.target_log_price});
    }
    for (auto& g : groups_)
      std::stable_sort(g.members.begin(), g.members.end(),
                       [](const Member& a, const Member& b) { return a.plate < b.plate; });
  }

  double predict(const EncodedPlate& query) const {
    const TokenCounts q = token_counts(query);
    std::vector<std::pair<int, std::size_t>> dist;
    dist.reserve(groups_.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      int d = 0;
      for (std::size_t t = 0; t < kVocabSize; ++t) d += (q[t] - groups_[g].counts[t]) * (q[t] - groups_[g].counts[t]);
      dist.emplace_back(d, g);
    }
    std::sort(dist.begin(), dist.end());
    double sum = 0.0;
    std::size_t taken = 0;
    for (std::size_t i = 0; i < dist.size() && taken < k_;) {
      // All members at this distance compete in canonical order.
      std::size_t j = i;
      std::vector<const Member*> level;
      while (j < dist.size() && dist[j].first == dist[i].first) {
        for (const auto& m : groups_[dist[j].second].members) level.push_back(&m);
        ++j;
      }
      if (taken + level.size() > k_)
        std::stable_sort(level.begin(), level.end(),
                         [](const Member* a, const Member* b) { return a->plate < b->plate; });
      for (const Member* m : level) {
        if (taken == k_) break;
        sum += m->log_price;
        ++taken;
      }
      i = j;
    }
    return sum / double(taken);
  }

 private:
  struct Member {
    std::string plate;
    double log_price;
  };
  struct Group {
    TokenCounts counts;
    std::vector<Member> members;
  };
  std::size_t k_;
  std::vector<Group> groups_;
};

struct BaselineMetrics {
  Metrics train, valid, test;
};

inline BaselineMetrics baseline_unigram_knn(const SplitDataset& ds, std::size_t k = 10) {
  UnigramKnn knn(ds.train, k);
  auto metrics = [&](const std::vector<Example>& split) {
    std::vector<double> p;
    for (const auto& e : split) p.push_back(knn.predict(e.encoded));
    return compute_metrics(p, targets_of(split));
  };
  BaselineMetrics r;
  r.train = metrics(ds.train);
  if (!ds.valid.empty()) r.valid = metrics(ds.valid);
  if (!ds.test.empty()) r.test = metrics(ds.test);
  return r;
}

// ---------------------------------------------------------------------------
// Grid runner and run records

struct GridConfig {
  std::string id;
  ModelConfig model;
};

inline std::uint64_t run_seed(std::uint64_t master, std::size_t config_index, std::size_t run) {
  return derive_seed(master, 0x9e1d0000ull + config_index * 1000 + run);
}

/// Trains `runs_per_config` independent runs of every configuration. A run
/// that throws is recorded with its error and the grid moves on.
inline std::vector<RunRecord> run_grid(const std::vector<GridConfig>& configs, const SplitDataset& ds,
                                       const TrainConfig& cfg, bool search_ranges = true) {
  if (configs.empty()) throw ConfigError("run_grid: no configurations");
  std::vector<RunRecord> out;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    for (std::size_t run = 0; run < cfg.runs_per_config; ++run) {
      const std::uint64_t seed = run_seed(cfg.seed, c, run);
      RunRecord rec;
      try {
        ModelConfig mc = configs[c].model;
        mc.seed = seed;
        Model model(mc, search_ranges);
        TrainConfig tc = cfg;
        tc.seed = seed;
        rec = train(model, ds, tc);
      } catch (const Error& e) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        rec.error = e.what();
        rec.train = rec.valid = rec.test = Metrics{nan, nan, 0};
      }
      rec.config_id = configs[c].id;
      rec.run = run;
      rec.seed = seed;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

inline const char* kRunRecordHeader =
    "config_id,run,seed,best_epoch,train_rmse,valid_rmse,test_rmse,train_r2,valid_r2,test_r2,params,seconds";

inline void write_run_records(std::ostream& out, std::span<const RunRecord> records) {
  out << kRunRecordHeader << '\n';
  using detail::format_number;
  for (const auto& r : records)
    out << r.config_id << ',' << r.run << ',' << r.seed << ',' << r.best_epoch << ',' << format_number(r.train.rmse)
        << ',' << format_number(r.valid.rmse) << ',' << format_number(r.test.rmse) << ','
        << format_number(r.train.r2) << ',' << format_number(r.valid.r2) << ',' << format_number(r.test.r2) << ','
        << r.params << ',' << format_number(r.seconds) << '\n';
}

inline std::vector<RunRecord> parse_run_records(std::istream& in) {
  std::vector<RunRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line == kRunRecordHeader) continue;
    auto f = detail::split_csv_line(line);
    auto fail = [&]() -> void { throw DataError("run records line " + std::to_string(lineno) + ": malformed row"); };
    if (f.size() != 12) fail();
    RunRecord r;
    r.config_id = f[0];
    auto num = [&](std::size_t i) {
      auto v = detail::parse_double(f[i]);
      if (!v && f[i] != "nan" && f[i] != "-nan") fail();
      return v ? *v : std::numeric_limits<double>::quiet_NaN();
    };
    auto integer = [&](std::size_t i) {
      std::uint64_t v = 0;
      auto res = std::from_chars(f[i].data(), f[i].data() + f[i].size(), v);
      if (res.ec != std::errc() || res.ptr != f[i].data() + f[i].size()) fail();
      return v;
    };
    r.run = integer(1);
    r.seed = integer(2);
    r.best_epoch = integer(3);
    r.train.rmse = num(4);
    r.valid.rmse = num(5);
    r.test.rmse = num(6);
    r.train.r2 = num(7);
    r.valid.r2 = num(8);
    r.test.r2 = num(9);
    r.params = integer(10);
    r.seconds = num(11);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct MannWhitneyResult {
  double u;  // U statistic of the first sample
  double z;
  double p;  // two-sided
};

/// Rank-sum test with midranks for ties, tie-corrected variance and the
/// normal approximation (no continuity correction).
inline MannWhitneyResult mann_whitney(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DataError("mann_whitney: both samples must be nonempty");
  const double na = double(a.size()), nb = double(b.size()), n = na + nb;
  std::vector<std::pair<double, int>> all;
  for (double v : a) all.emplace_back(v, 0);
  for (double v : b) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end());
  double rank_sum_a = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double t = double(j - i);
    const double midrank = (double(i + 1) + double(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 0) rank_sum_a += midrank;
    tie_term += t * t * t - t;
    i = j;
  }
  MannWhitneyResult r;
  r.u = rank_sum_a - na * (na + 1.0) / 2.0;
  const double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (!(var > 0.0)) {
    r.z = 0.0;
    r.p = 1.0;
    return r;
  }
  r.z = (r.u - na * nb / 2.0) / std::sqrt(var);
  r.p = std::erfc(std::abs(r.z) / std::sqrt(2.0));
  return r;
}

struct KsResult {
  double d;
  double p;
};

/// One-sample Kolmogorov-Smirnov test against Uniform(0,1), p-value from the
/// asymptotic Kolmogorov distribution with the Stephens small-sample factor.
inline KsResult ks_uniform(std::vector<double> values) {
  if (values.empty()) throw DataError("ks_uniform: empty sample");
  std::sort(values.begin(), values.end());
  const double n = double(values.size());
  double d = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = std::clamp(values[i], 0.0, 1.0);
    d = std::max({d, double(i + 1) / n - x, x - double(i) / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0.0;
  if (lambda < 0.2) {
    p = 1.0;
  } else {
    for (int k = 1; k <= 100; ++k) {
      const double term = std::exp(-2.0 * k * k * lambda * lambda);
      p += (k % 2 ? 2.0 : -2.0) * term;
      if (term < 1e-16) break;
    }
  }
  return {d, std::clamp(p, 0.0, 1.0)};
}

}  // namespace platemark
