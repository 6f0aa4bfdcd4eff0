// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <charconv>
#include <cstdio>
#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "platemark/dataset.hpp"
#include "platemark/mdn.hpp"
#include "platemark/persistence.hpp"
#include "platemark/search.hpp"

namespace platemark {

/// Everything a running service needs, loaded once and never modified.
/// Inference passes through layer caches, so the model is guarded by
/// `inference_mutex`.
struct ServiceState {
  std::unique_ptr<Model> model;
  std::unique_ptr<MDNModel> mdn;
  LatentIndex index;
  MarketSeries market;
  Standardization standardization;
  std::map<std::string, std::vector<AuctionRecord>> history;  // newest first
  std::string model_version;
  mutable std::mutex inference_mutex;
};

/// Groups auction records by canonical plate, newest first.
inline std::map<std::string, std::vector<AuctionRecord>> history_by_plate(std::vector<AuctionRecord> records) {
  std::map<std::string, std::vector<AuctionRecord>> out;
  for (auto& r : records) out[r.plate.canonical()].push_back(std::move(r));
  for (auto& [plate, list] : out)
    std::stable_sort(list.begin(), list.end(), [](const AuctionRecord& a, const AuctionRecord& b) {
      if (a.date != b.date) return a.date > b.date;
      return a.minute_of_day.value_or(-1) > b.minute_of_day.value_or(-1);
    });
  return out;
}

inline std::shared_ptr<ServiceState> make_service_state(ModelBundle bundle, LatentIndex index, MarketSeries market,
                                                        std::vector<AuctionRecord> records) {
  if (!bundle.model) throw DataError("service: no model");
  if (market.empty()) throw DataError("service: empty market series");
  auto s = std::make_shared<ServiceState>();
  const Fingerprint fp = model_fingerprint(*bundle.model);
  if (fp != index.fingerprint()) throw DataError("service: index was built from a different model");
  s->standardization = standardization_from_metadata(bundle.metadata);
  s->model = std::move(bundle.model);
  s->mdn = std::move(bundle.mdn);
  s->index = std::move(index);
  s->market = std::move(market);
  s->history = history_by_plate(std::move(records));
  s->model_version = fingerprint_hex(fp).substr(0, 16);
  return s;
}

struct HttpResponse {
  int status = 200;
  std::string body;
};

using QueryParams = std::multimap<std::string, std::string>;

/// Request router, independent of the transport. Every response body is
/// JSON; malformed input produces 4xx with a machine-readable code.
class Service {
 public:
  Service() = default;
  explicit Service(std::shared_ptr<const ServiceState> state) { load(std::move(state)); }

  /// Replaces the whole state; in-flight requests keep the state they began with.
  void load(std::shared_ptr<const ServiceState> state) { std::atomic_store(&state_, std::move(state)); }
  std::shared_ptr<const ServiceState> state() const { return std::atomic_load(&state_); }

  HttpResponse handle(const std::string& method, const std::string& path, const QueryParams& params) const {
    try {
      if (method == "OPTIONS") return {204, ""};
      if (method != "GET" && method != "HEAD")
        return error(405, "METHOD_NOT_ALLOWED", "only GET is supported");
      if (path == "/healthz") return healthz();
      auto st = state();
      const bool known = path == "/api/v1/estimate" || path == "/api/v1/distribution" ||
                         path == "/api/v1/similar" || path == "/api/v1/history";
      if (!known) return error(404, "NOT_FOUND", "unknown endpoint");
      if (!st) return error(503, "NOT_LOADED", "model not loaded");
      if (path == "/api/v1/estimate") return estimate(*st, params);
      if (path == "/api/v1/distribution") return distribution(*st, params);
      if (path == "/api/v1/similar") return similar(*st, params);
      return history(*st, params);
    } catch (const RequestError& e) {
      return e.response;
    } catch (const std::exception& e) {
      return error(500, "INTERNAL", e.what());
    }
  }

 private:
  struct RequestError {
    HttpResponse response;
  };

  static HttpResponse error(int status, const std::string& code, const std::string& message,
                            const nlohmann::json& extra = nullptr) {
    nlohmann::json body = {{"error", {{"code", code}, {"message", message}}}};
    if (!extra.is_null()) body["error"]["detail"] = extra;
    return {status, body.dump()};
  }
  [[noreturn]] static void fail(int status, const std::string& code, const std::string& message,
                                const nlohmann::json& extra = nullptr) {
    throw RequestError{error(status, code, message, extra)};
  }

  static std::optional<std::string> param(const QueryParams& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) return std::nullopt;
    return it->second;
  }

  static Plate plate_param(const QueryParams& params) {
    auto text = param(params, "plate");
    if (!text) fail(400, "MISSING_PARAMETER", "query parameter 'plate' is required");
    try {
      return parse_plate(*text);
    } catch (const PlateError& e) {
      fail(400, "PLATE_GRAMMAR", plate_errc_message(e.code()), {{"rule", plate_errc_code(e.code())}});
    }
  }

  static Date today() {
    return std::chrono::floor<std::chrono::days>(std::chrono::system_clock::now());
  }

  /// The market snapshot for the request date; dates after the last snapshot
  /// use the latest one.
  static std::pair<Date, const MarketSnapshot*> date_param(const ServiceState& st, const QueryParams& params) {
    Date date = today();
    if (auto text = param(params, "date")) {
      auto d = parse_iso_date(*text);
      if (!d) fail(400, "BAD_DATE", "date must be an ISO-8601 calendar date (YYYY-MM-DD)");
      date = *d;
    }
    const MarketSnapshot* snap = st.market.at_or_before(date);
    if (!snap)
      fail(422, "DATE_OUT_OF_RANGE", "no market data on or before " + format_date(date),
           {{"first_market_date", format_date(st.market.rows().front().date)}});
    return {date, snap};
  }

  static double predict_one(const ServiceState& st, const Plate& plate, Date date, const MarketSnapshot& snap) {
    const Plate plates[1] = {plate};
    Batch b = make_batch(plates, st.standardization.apply(raw_aux_input(date, std::nullopt, snap)));
    std::lock_guard lock(st.inference_mutex);
    return st.model->forward(b, {Mode::Eval, 0}).predicted_log_price[0];
  }

  HttpResponse healthz() const {
    auto st = state();
    if (!st) return {503, nlohmann::json{{"status", "loading"}}.dump()};
    if (!st->mdn)
      return {503, nlohmann::json{{"status", "incomplete"}, {"missing", "distribution model"}}.dump()};
    return {200, nlohmann::json{{"status", "ok"}, {"model_version", st->model_version}}.dump()};
  }

  static HttpResponse estimate(const ServiceState& st, const QueryParams& params) {
    Plate plate = plate_param(params);
    auto [date, snap] = date_param(st, params);
    const double log_price = predict_one(st, plate, date, *snap);
    nlohmann::json body = {{"plate", plate.canonical()},
                           {"date", format_date(date)},
                           {"log_price_hkd", log_price},
                           {"price_hkd", std::exp(log_price)},
                           {"model_version", st.model_version}};
    return {200, body.dump()};
  }

  static HttpResponse distribution(const ServiceState& st, const QueryParams& params) {
    Plate plate = plate_param(params);
    auto [date, snap] = date_param(st, params);
    if (!st.mdn) fail(503, "NOT_LOADED", "no price distribution model loaded");
    const double log_price = predict_one(st, plate, date, *snap);
    MixtureParams mix;
    {
      std::lock_guard lock(st.inference_mutex);
      mix = st.mdn->params(log_price);
    }
    nlohmann::json components = nlohmann::json::array();
    for (std::size_t k = 0; k < mix.components(); ++k)
      components.push_back({{"weight", mix.weights[k]}, {"mu", mix.means[k]}, {"sigma", mix.sigmas[k]}});
    nlohmann::json quantiles = nlohmann::json::object();
    for (auto [name, q] : {std::pair{"p05", 0.05}, {"p25", 0.25}, {"p50", 0.5}, {"p75", 0.75}, {"p95", 0.95}}) {
      const double x = mixture_quantile(mix, q);
      quantiles[name] = {{"log_hkd", x}, {"hkd", std::exp(x)}};
    }
    nlohmann::json body = {{"plate", plate.canonical()},
                           {"date", format_date(date)},
                           {"log_price_hkd", log_price},
                           {"components", components},
                           {"quantiles", quantiles},
                           {"model_version", st.model_version}};
    return {200, body.dump()};
  }

  static nlohmann::json last_sale(const ServiceState& st, const std::string& plate) {
    auto it = st.history.find(plate);
    if (it == st.history.end()) return nullptr;
    for (const auto& r : it->second)
      if (r.sold()) return {{"price_hkd", *r.price_hkd}, {"date", format_date(r.date)}};
    return nullptr;
  }

  static HttpResponse similar(const ServiceState& st, const QueryParams& params) {
    Plate plate = plate_param(params);
    std::size_t k = 10;
    if (auto text = param(params, "k")) {
      long long v = 0;
      auto res = std::from_chars(text->data(), text->data() + text->size(), v);
      if (res.ec != std::errc() || res.ptr != text->data() + text->size() || text->empty())
        fail(400, "BAD_PARAMETER", "k must be an integer");
      if (v < 1 || v > 100) fail(422, "K_OUT_OF_RANGE", "k must be between 1 and 100");
      k = std::size_t(v);
    }
    QueryResult r;
    {
      std::lock_guard lock(st.inference_mutex);
      r = query(*st.model, st.index, plate, k);
    }
    nlohmann::json results = nlohmann::json::array();
    for (const auto& nb : r.neighbors)
      results.push_back({{"plate", nb.plate}, {"distance", nb.distance}, {"last_sale", last_sale(st, nb.plate)}});
    nlohmann::json body = {{"plate", plate.canonical()},
                           {"k", k},
                           {"truncated", r.truncated},
                           {"results", results},
                           {"model_version", st.model_version}};
    return {200, body.dump()};
  }

  static HttpResponse history(const ServiceState& st, const QueryParams& params) {
    Plate plate = plate_param(params);
    nlohmann::json records = nlohmann::json::array();
    auto it = st.history.find(plate.canonical());
    if (it != st.history.end()) {
      for (const auto& r : it->second) {
        nlohmann::json row = {{"date", format_date(r.date)},
                              {"status", r.sold() ? "S" : "U"},
                              {"price_hkd", r.sold() ? nlohmann::json(*r.price_hkd) : nlohmann::json(nullptr)}};
        if (r.minute_of_day) {
          char buf[16];
          std::snprintf(buf, sizeof buf, "%02d:%02d", *r.minute_of_day / 60, *r.minute_of_day % 60);
          row["time"] = buf;
        } else {
          row["time"] = nullptr;
        }
        records.push_back(std::move(row));
      }
    }
    return {200, nlohmann::json{{"plate", plate.canonical()}, {"records", records}}.dump()};
  }

  std::shared_ptr<const ServiceState> state_;
};

/// Serves `service` over HTTP until `server.stop()` is called. Every method
/// and path goes through the router so unknown routes get JSON errors too.
inline void install_routes(httplib::Server& server, const Service& service,
                           const std::string& allowed_origin = "*") {
  httplib::Server::Handler handler = [&service](const httplib::Request& req, httplib::Response& res) {
    QueryParams params(req.params.begin(), req.params.end());
    HttpResponse r = service.handle(req.method, req.path, params);
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body, "application/json; charset=utf-8");
  };
  const std::string any = ".*";
  server.Get(any, handler);
  server.Post(any, handler);
  server.Put(any, handler);
  server.Patch(any, handler);
  server.Delete(any, handler);
  server.Options(any, handler);
  server.set_default_headers({{"Access-Control-Allow-Origin", allowed_origin},
                              {"Access-Control-Allow-Methods", "GET, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
    res.status = 500;
    res.set_content(R"({"error":{"code":"INTERNAL","message":"unhandled exception"}})", "application/json");
  });
}

}  // namespace platemark
