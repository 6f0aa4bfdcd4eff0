// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "fixtures.hpp"
#include "platemark/service.hpp"
#include "platemark/training.hpp"

using namespace platemark;
using nlohmann::json;

namespace {

struct Fixture {
  SyntheticCorpus corpus;
  SplitDataset ds;
  std::shared_ptr<ServiceState> state;
};

ModelBundle make_bundle(const SplitDataset& ds, std::uint64_t seed) {
  ModelBundle b;
  b.model = std::make_unique<Model>(pmtest::tiny_config(Extractor::ResCNN, seed), false);
  fit_price_scaler(*b.model, ds.train);
  b.model->quantize();
  auto pred = predict(*b.model, ds.valid);
  MdnFitOptions opt;
  opt.components = 3;
  opt.hidden = 8;
  opt.epochs = 5;
  opt.seed = seed;
  b.mdn = std::make_unique<MDNModel>(std::move(fit_mdn(pred, targets_of(ds.valid), opt).model));
  b.metadata = dataset_metadata(ds);
  return b;
}

std::shared_ptr<ServiceState> make_state(const SyntheticCorpus& corpus, const SplitDataset& ds, std::uint64_t seed) {
  ModelBundle b = make_bundle(ds, seed);
  LatentIndex index = build_index(*b.model, plate_universe(ds));
  return make_service_state(std::move(b), std::move(index), corpus.market, corpus.records);
}

const Fixture& fixture() {
  static Fixture f = [] {
    Fixture x;
    x.corpus = generate_synthetic(600, 77, 0.3);
    // A plate with an unsold entry and two sales on distinct dates.
    AuctionRecord u{parse_plate("PM 1"), *parse_iso_date("2010-05-01"), std::nullopt, std::nullopt};
    AuctionRecord s1{parse_plate("PM 1"), *parse_iso_date("2012-07-09"), 600, 52000.0};
    AuctionRecord s2{parse_plate("PM 1"), *parse_iso_date("2008-02-03"), std::nullopt, 31000.0};
    x.corpus.records.insert(x.corpus.records.end(), {u, s1, s2});
    x.ds = build_dataset(x.corpus.records, x.corpus.market, 77);
    x.state = make_state(x.corpus, x.ds, 3);
    return x;
  }();
  return f;
}

HttpResponse get(const Service& s, const std::string& path, QueryParams params = {}) {
  return s.handle("GET", path, params);
}

json body(const HttpResponse& r) { return json::parse(r.body); }

}  // namespace

TEST(Service, HealthBeforeAndAfterLoad) {
  Service s;
  EXPECT_EQ(get(s, "/healthz").status, 503);
  EXPECT_EQ(get(s, "/api/v1/estimate", {{"plate", "1"}}).status, 503);
  s.load(fixture().state);
  auto r = get(s, "/healthz");
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(body(r)["model_version"], fixture().state->model_version);
}

TEST(Service, EstimateCanonicalisesPlate) {
  Service s(fixture().state);
  auto r = get(s, "/api/v1/estimate", {{"plate", "hk1"}, {"date", "2015-06-01"}});
  ASSERT_EQ(r.status, 200) << r.body;
  json b = body(r);
  EXPECT_EQ(b["plate"], "HK 1");
  EXPECT_EQ(b["price_hkd"].get<double>(), std::exp(b["log_price_hkd"].get<double>()));
  EXPECT_EQ(b["model_version"], fixture().state->model_version);
  EXPECT_EQ(b["date"], "2015-06-01");
}

TEST(Service, EstimateMatchesDirectInference) {
  const auto& f = fixture();
  Service s(f.state);
  Date d = *parse_iso_date("2014-03-20");
  const MarketSnapshot* snap = f.corpus.market.at_or_before(d);
  const Plate plates[1] = {parse_plate("88")};
  auto out = f.state->model->forward(make_batch(plates, f.ds.standardization.apply(raw_aux_input(d, std::nullopt, *snap))),
                                     {Mode::Eval, 0});
  auto r = get(s, "/api/v1/estimate", {{"plate", "88"}, {"date", "2014-03-20"}});
  EXPECT_EQ(body(r)["log_price_hkd"].get<double>(), out.predicted_log_price[0]);
}

TEST(Service, GrammarErrorsAreMachineReadable) {
  Service s(fixture().state);
  for (const char* path : {"/api/v1/estimate", "/api/v1/distribution", "/api/v1/similar", "/api/v1/history"}) {
    auto r = get(s, path, {{"plate", "H12"}});
    ASSERT_EQ(r.status, 400) << path;
    json b = body(r);
    EXPECT_EQ(b["error"]["code"], "PLATE_GRAMMAR");
    EXPECT_TRUE(b["error"]["detail"]["rule"].is_string());
    EXPECT_FALSE(b["error"]["message"].get<std::string>().empty());
  }
  EXPECT_EQ(body(get(s, "/api/v1/estimate", {}))["error"]["code"], "MISSING_PARAMETER");
}

TEST(Service, DateHandling) {
  Service s(fixture().state);
  EXPECT_EQ(get(s, "/api/v1/estimate", {{"plate", "1"}, {"date", "2015-13-01"}}).status, 400);
  EXPECT_EQ(get(s, "/api/v1/estimate", {{"plate", "1"}, {"date", "yesterday"}}).status, 400);
  auto early = get(s, "/api/v1/estimate", {{"plate", "1"}, {"date", "1980-01-01"}});
  EXPECT_EQ(early.status, 422);
  EXPECT_EQ(body(early)["error"]["code"], "DATE_OUT_OF_RANGE");
  // Past the last snapshot the latest one is used.
  const auto& f = fixture();
  Date d = *parse_iso_date("2030-01-01");
  const Plate plates[1] = {parse_plate("1")};
  auto aux = f.ds.standardization.apply(raw_aux_input(d, std::nullopt, f.corpus.market.latest()));
  auto out = f.state->model->forward(make_batch(plates, aux), {Mode::Eval, 0});
  auto late = get(s, "/api/v1/estimate", {{"plate", "1"}, {"date", "2030-01-01"}});
  ASSERT_EQ(late.status, 200);
  EXPECT_EQ(body(late)["log_price_hkd"].get<double>(), out.predicted_log_price[0]);
  EXPECT_EQ(get(s, "/api/v1/estimate", {{"plate", "1"}}).status, 200);
}

TEST(Service, IdenticalRequestsByteIdentical) {
  Service s(fixture().state);
  for (const char* path : {"/api/v1/estimate", "/api/v1/distribution", "/api/v1/similar", "/api/v1/history"}) {
    QueryParams q = {{"plate", "2112"}, {"date", "2016-01-04"}, {"k", "5"}};
    auto a = get(s, path, q);
    get(s, "/api/v1/estimate", {{"plate", "AB 12"}});
    auto b = get(s, path, q);
    EXPECT_EQ(a.status, 200);
    EXPECT_EQ(a.body, b.body) << path;
  }
}

TEST(Service, DistributionContract) {
  Service s(fixture().state);
  for (const char* plate : {"1", "28", "AB 1234", "8888"}) {
    auto r = get(s, "/api/v1/distribution", {{"plate", plate}, {"date", "2016-01-04"}});
    ASSERT_EQ(r.status, 200) << r.body;
    json b = body(r);
    double total = 0.0;
    for (const auto& c : b["components"]) {
      total += c["weight"].get<double>();
      EXPECT_GE(c["sigma"].get<double>(), kSigmaFloor);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    double prev = -INFINITY;
    for (const char* q : {"p05", "p25", "p50", "p75", "p95"}) {
      const double x = b["quantiles"][q]["log_hkd"].get<double>();
      EXPECT_GT(x, prev) << q;
      prev = x;
      EXPECT_EQ(b["quantiles"][q]["hkd"].get<double>(), std::exp(x));
    }
  }
}

TEST(Service, SimilarMatchesIndexOracle) {
  const auto& f = fixture();
  Service s(f.state);
  auto r = get(s, "/api/v1/similar", {{"plate", "2112"}, {"k", "3"}});
  ASSERT_EQ(r.status, 200) << r.body;
  json b = body(r);
  ASSERT_EQ(b["results"].size(), 3u);
  for (const auto& x : b["results"]) EXPECT_NE(x["plate"], "2112");

  // Brute-force: features of every index plate against the query.
  const Plate q[1] = {parse_plate("2112")};
  Tensor qf = plate_features(*f.state->model, q);
  std::vector<float> qv(qf.values().begin(), qf.values().end());
  double qn = 0.0;
  for (float v : qv) qn += double(v) * double(v);
  std::vector<std::pair<double, std::string>> all;
  const auto& idx = f.state->index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx.plates()[i] == "2112") continue;
    double dot = 0.0, n = 0.0;
    for (std::size_t d = 0; d < idx.dim(); ++d) {
      const double v = idx.stored_vectors()[i * idx.dim() + d];
      dot += v * double(qv[d]);
      n += v * v;
    }
    all.emplace_back(1.0 - dot / std::sqrt(n * qn), idx.plates()[i]);
  }
  std::sort(all.begin(), all.end());
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(b["results"][j]["plate"], all[j].second);
    EXPECT_NEAR(b["results"][j]["distance"].get<double>(), all[j].first, 1e-12);
  }
}

TEST(Service, SimilarKBounds) {
  Service s(fixture().state);
  EXPECT_EQ(get(s, "/api/v1/similar", {{"plate", "1"}, {"k", "0"}}).status, 422);
  EXPECT_EQ(get(s, "/api/v1/similar", {{"plate", "1"}, {"k", "101"}}).status, 422);
  EXPECT_EQ(get(s, "/api/v1/similar", {{"plate", "1"}, {"k", "-4"}}).status, 422);
  EXPECT_EQ(get(s, "/api/v1/similar", {{"plate", "1"}, {"k", "ten"}}).status, 400);
  EXPECT_EQ(get(s, "/api/v1/similar", {{"plate", "1"}, {"k", "100"}}).status, 200);
  EXPECT_EQ(body(get(s, "/api/v1/similar", {{"plate", "1"}}))["results"].size(), 10u);
}

TEST(Service, SimilarCarriesLastSale) {
  const auto& f = fixture();
  Service s(f.state);
  ASSERT_TRUE(f.state->index.contains("PM 1"));
  bool seen = false;
  for (const char* plate : {"PM 2", "PN 1", "PM 11", "1", "MP 1"}) {
    json b = body(get(s, "/api/v1/similar", {{"plate", plate}, {"k", "100"}}));
    for (const auto& x : b["results"]) {
      if (x["plate"] == "PM 1") {
        seen = true;
        EXPECT_EQ(x["last_sale"]["price_hkd"], 52000.0);
        EXPECT_EQ(x["last_sale"]["date"], "2012-07-09");
      }
      EXPECT_TRUE(x["last_sale"].is_null() || x["last_sale"].is_object());
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Service, HistoryNewestFirstWithUnsold) {
  Service s(fixture().state);
  json b = body(get(s, "/api/v1/history", {{"plate", "pm1"}}));
  EXPECT_EQ(b["plate"], "PM 1");
  ASSERT_EQ(b["records"].size(), 3u);
  EXPECT_EQ(b["records"][0]["date"], "2012-07-09");
  EXPECT_EQ(b["records"][0]["time"], "10:00");
  EXPECT_EQ(b["records"][1]["date"], "2010-05-01");
  EXPECT_EQ(b["records"][1]["status"], "U");
  EXPECT_TRUE(b["records"][1]["price_hkd"].is_null());
  EXPECT_EQ(b["records"][2]["status"], "S");
  auto none = get(s, "/api/v1/history", {{"plate", "ZZ 9999"}});
  EXPECT_EQ(none.status, 200);
  EXPECT_TRUE(body(none)["records"].empty());
}

TEST(Service, RoutingErrors) {
  Service s(fixture().state);
  EXPECT_EQ(get(s, "/api/v2/estimate").status, 404);
  EXPECT_EQ(get(s, "/").status, 404);
  EXPECT_EQ(s.handle("POST", "/api/v1/estimate", {}).status, 405);
  EXPECT_EQ(s.handle("OPTIONS", "/api/v1/estimate", {}).status, 204);
}

TEST(Service, FuzzedQueriesNeverFailServerSide) {
  Service s(fixture().state);
  Rng rng(99);
  const std::string alphabet = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcxyz -_%+/.:;?&=\x7f\xc3\xa9\x01";
  const std::vector<std::string> paths = {"/api/v1/estimate", "/api/v1/distribution", "/api/v1/similar",
                                          "/api/v1/history", "/healthz", "/api/v1/", "/x"};
  const std::vector<std::string> keys = {"plate", "date", "k", "", "PLATE", "plate[]"};
  std::uniform_int_distribution<std::size_t> len(0, 14);
  auto rand_text = [&] {
    std::string t;
    for (std::size_t i = len(rng); i > 0; --i) t.push_back(alphabet[rng() % alphabet.size()]);
    return t;
  };
  for (int i = 0; i < 3000; ++i) {
    QueryParams q;
    for (std::size_t j = rng() % 4; j > 0; --j) q.emplace(keys[rng() % keys.size()], rand_text());
    if (rng() % 3 == 0) q.emplace("date", "20" + std::to_string(rng() % 100) + "-0" + std::to_string(rng() % 10) + "-1" + std::to_string(rng() % 10));
    auto r = get(s, paths[rng() % paths.size()], q);
    ASSERT_LT(r.status, 500) << r.body;
    EXPECT_NO_THROW(json::parse(r.body));
  }
}

TEST(Service, StateSwapIsAtomic) {
  const auto& f = fixture();
  Service s(f.state);
  auto other = make_state(f.corpus, f.ds, 4);
  ASSERT_NE(other->model_version, f.state->model_version);
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::thread reader([&] {
    while (!stop) {
      auto r = get(s, "/api/v1/estimate", {{"plate", "28"}, {"date", "2016-01-04"}});
      if (r.status != 200) ++bad;
    }
  });
  for (int i = 0; i < 50; ++i) s.load(i % 2 ? f.state : other);
  stop = true;
  reader.join();
  EXPECT_EQ(bad.load(), 0);
  s.load(other);
  EXPECT_EQ(body(get(s, "/healthz"))["model_version"], other->model_version);
}

TEST(Service, StateRequiresMatchingIndex) {
  const auto& f = fixture();
  ModelBundle a = make_bundle(f.ds, 3);
  ModelBundle b = make_bundle(f.ds, 4);
  LatentIndex wrong = build_index(*b.model, plate_universe(f.ds));
  EXPECT_THROW(make_service_state(std::move(a), std::move(wrong), f.corpus.market, {}), DataError);
}

TEST(Service, OverHttpWithCors) {
  Service s(fixture().state);
  httplib::Server server;
  install_routes(server, s);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto r = client.Get("/api/v1/estimate?plate=hk1&date=2015-06-01");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body)["plate"], "HK 1");
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
  EXPECT_EQ(r->body, get(s, "/api/v1/estimate", {{"plate", "hk1"}, {"date", "2015-06-01"}}).body);
  auto pre = client.Options("/api/v1/estimate");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_FALSE(pre->get_header_value("Access-Control-Allow-Methods").empty());
  auto missing = client.Get("/nothing");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  auto post = client.Post("/api/v1/estimate", "", "text/plain");
  ASSERT_TRUE(post);
  EXPECT_EQ(post->status, 405);
  server.stop();
  t.join();
}
