// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "platemark/error.hpp"
#include "platemark/plates.hpp"
#include "platemark/random.hpp"

namespace platemark {

using Date = std::chrono::sys_days;

// ---------------------------------------------------------------------------
// Dates

inline std::optional<Date> parse_iso_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto ok = [](std::from_chars_result r, const char* end) { return r.ec == std::errc() && r.ptr == end; };
  if (!ok(std::from_chars(s.data(), s.data() + 4, y), s.data() + 4)) return std::nullopt;
  if (!ok(std::from_chars(s.data() + 5, s.data() + 7, m), s.data() + 7)) return std::nullopt;
  if (!ok(std::from_chars(s.data() + 8, s.data() + 10, d), s.data() + 10)) return std::nullopt;
  std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return Date(ymd);
}

inline std::string format_date(Date d) {
  std::chrono::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", int(ymd.year()), unsigned(ymd.month()), unsigned(ymd.day()));
  return buf;
}

// ---------------------------------------------------------------------------
// Records

struct AuctionRecord {
  Plate plate;
  Date date;
  std::optional<int> minute_of_day;  // time of day when known
  std::optional<double> price_hkd;   // empty = unsold

  bool sold() const { return price_hkd.has_value(); }
};

inline constexpr double kReservePriceHkd = 1000.0;

struct MarketSnapshot {
  Date date;
  double cpi = 0.0;
  double stock_index = 0.0;
  double ret_1y = 0.0;
  double ret_1m = 0.0;
};

/// Monthly market covariates with strictly increasing dates.
class MarketSeries {
 public:
  MarketSeries() = default;
  explicit MarketSeries(std::vector<MarketSnapshot> rows) : rows_(std::move(rows)) {
    for (std::size_t i = 1; i < rows_.size(); ++i)
      if (!(rows_[i - 1].date < rows_[i].date)) throw DataError("market dates must be strictly increasing");
    for (const auto& r : rows_)
      if (!(r.cpi > 0) || !(r.stock_index > 0) || !std::isfinite(r.ret_1y) || !std::isfinite(r.ret_1m))
        throw DataError("market snapshot on " + format_date(r.date) + " has invalid values");
    if (!rows_.empty()) {
      double mean = 0.0;
      for (const auto& r : rows_) mean += r.stock_index;
      mean /= double(rows_.size());
      double var = 0.0;
      for (const auto& r : rows_) var += (r.stock_index - mean) * (r.stock_index - mean);
      var /= double(rows_.size());
      stock_mean_ = mean;
      stock_std_ = var > 0 ? std::sqrt(var) : 1.0;
    }
  }

  const std::vector<MarketSnapshot>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  const MarketSnapshot& latest() const {
    if (rows_.empty()) throw DataError("market series is empty");
    return rows_.back();
  }

  /// Latest snapshot dated on or before `d`; nullptr when `d` precedes the series.
  const MarketSnapshot* at_or_before(Date d) const {
    auto it = std::upper_bound(rows_.begin(), rows_.end(), d,
                               [](Date v, const MarketSnapshot& s) { return v < s.date; });
    if (it == rows_.begin()) return nullptr;
    return &*std::prev(it);
  }

  /// Stock level standardized against the whole series.
  double standardized_stock(const MarketSnapshot& s) const { return (s.stock_index - stock_mean_) / stock_std_; }

 private:
  std::vector<MarketSnapshot> rows_;
  double stock_mean_ = 0.0;
  double stock_std_ = 1.0;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline const char* kAuctionsHeader = "plate,price_hkd,datetime,status";
inline const char* kMarketHeader = "date,cpi,stock_index,ret_1y,ret_1m";

inline std::vector<AuctionRecord> parse_auctions(std::istream& in) {
  std::vector<AuctionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw DataError("auctions line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("plate,", 0) == 0) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 4) fail("expected 4 fields, got " + std::to_string(f.size()));
    AuctionRecord r;
    try {
      r.plate = parse_plate(f[0]);
    } catch (const PlateError& e) {
      fail(e.what());
    }
    std::string_view dt = f[2];
    auto date = parse_iso_date(dt.substr(0, std::min<std::size_t>(10, dt.size())));
    if (!date) fail("bad date '" + f[2] + "'");
    r.date = *date;
    if (dt.size() > 10) {
      if ((dt[10] != 'T' && dt[10] != ' ') || dt.size() < 16 || dt[13] != ':') fail("bad time in '" + f[2] + "'");
      int hh = 0, mm = 0;
      auto a = std::from_chars(dt.data() + 11, dt.data() + 13, hh);
      auto b = std::from_chars(dt.data() + 14, dt.data() + 16, mm);
      if (a.ec != std::errc() || b.ec != std::errc() || hh > 23 || mm > 59) fail("bad time in '" + f[2] + "'");
      r.minute_of_day = hh * 60 + mm;
    }
    if (f[3] == "S") {
      auto p = detail::parse_double(f[1]);
      if (!p) fail("bad price '" + f[1] + "'");
      if (!(*p > 0.0)) fail("price must be positive");
      r.price_hkd = *p;
    } else if (f[3] == "U") {
      if (!f[1].empty()) fail("unsold row must have an empty price");
    } else {
      fail("status must be S or U");
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<AuctionRecord> load_auctions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_auctions(in);
}

inline void write_auctions(std::ostream& out, const std::vector<AuctionRecord>& records) {
  out << kAuctionsHeader << '\n';
  for (const auto& r : records) {
    out << r.plate.prefix() << r.plate.digits() << ',';
    if (r.price_hkd) out << detail::format_number(*r.price_hkd);
    out << ',' << format_date(r.date);
    if (r.minute_of_day) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "T%02d:%02d", *r.minute_of_day / 60, *r.minute_of_day % 60);
      out << buf;
    }
    out << ',' << (r.sold() ? 'S' : 'U') << '\n';
  }
}

inline MarketSeries parse_market(std::istream& in) {
  std::vector<MarketSnapshot> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("date,", 0) == 0) continue;
    auto f = detail::split_csv_line(line);
    auto fail = [&](const std::string& why) {
      throw DataError("market line " + std::to_string(lineno) + ": " + why);
    };
    if (f.size() != 5) fail("expected 5 fields");
    auto d = parse_iso_date(f[0]);
    if (!d) fail("bad date '" + f[0] + "'");
    MarketSnapshot s{*d};
    double* dst[4] = {&s.cpi, &s.stock_index, &s.ret_1y, &s.ret_1m};
    for (int i = 0; i < 4; ++i) {
      auto v = detail::parse_double(f[std::size_t(i) + 1]);
      if (!v) fail("bad number '" + f[std::size_t(i) + 1] + "'");
      *dst[i] = *v;
    }
    rows.push_back(s);
  }
  return MarketSeries(std::move(rows));
}

inline MarketSeries load_market(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_market(in);
}

inline void write_market(std::ostream& out, const MarketSeries& market) {
  out << kMarketHeader << '\n';
  for (const auto& s : market.rows())
    out << format_date(s.date) << ',' << detail::format_number(s.cpi) << ','
        << detail::format_number(s.stock_index) << ',' << detail::format_number(s.ret_1y) << ','
        << detail::format_number(s.ret_1m) << '\n';
}

// ---------------------------------------------------------------------------
// Examples and splits

inline constexpr std::size_t kAuxInputs = 7;
using AuxInput = std::array<double, kAuxInputs>;

struct Example {
  Plate plate;
  Date date;
  EncodedPlate encoded{};
  AuxInput aux_in{};
  double target_log_price = 0.0;
  AuxiliaryFeatures aux_targets{};
  double weight = 1.0;
};

/// Per-coordinate affine standardization of the auxiliary inputs.
struct Standardization {
  AuxInput mean{};
  AuxInput scale{1, 1, 1, 1, 1, 1, 1};

  AuxInput apply(const AuxInput& raw) const {
    AuxInput out{};
    for (std::size_t i = 0; i < kAuxInputs; ++i) out[i] = (raw[i] - mean[i]) / scale[i];
    return out;
  }
};

struct SplitDataset {
  std::vector<Example> train, valid, test;
  Standardization standardization;
  std::uint64_t seed = 0;
  AuxInput reference_aux_in{};  // latest market snapshot, standardized

  std::size_t size() const { return train.size() + valid.size() + test.size(); }
};

inline constexpr double kOverweightThreshold = 12.5;
inline constexpr double kOverweightFactor = 40.0;

/// Log-price sample weight, x40 strictly above log price 12.5.
inline double sample_weight(double target_log_price) {
  double w = std::max(target_log_price, 1.0);
  return target_log_price > kOverweightThreshold ? kOverweightFactor * w : w;
}

/// Raw (unstandardized) auxiliary inputs: year fraction, month-of-year
/// sin/cos, CPI, stock level, 1y and 1m returns.
inline AuxInput raw_aux_input(Date date, std::optional<int> minute_of_day, const MarketSnapshot& m) {
  using namespace std::chrono;
  year_month_day ymd{date};
  const Date jan1 = sys_days(ymd.year() / January / 1);
  const Date next = sys_days((ymd.year() + years{1}) / January / 1);
  const double day_in_year = double((date - jan1).count()) + double(minute_of_day.value_or(0)) / 1440.0;
  const double year_len = double((next - jan1).count());
  const double angle = 2.0 * std::numbers::pi * double(unsigned(ymd.month()) - 1) / 12.0;
  return {double(int(ymd.year())) + day_in_year / year_len,
          std::sin(angle),
          std::cos(angle),
          m.cpi,
          m.stock_index,
          m.ret_1y,
          m.ret_1m};
}

inline Example make_example(const AuctionRecord& r, const MarketSnapshot& m, const Standardization& st) {
  Example e;
  e.plate = r.plate;
  e.date = r.date;
  e.encoded = encode_plate(r.plate);
  e.aux_in = st.apply(raw_aux_input(r.date, r.minute_of_day, m));
  e.target_log_price = std::log(r.price_hkd.value_or(kReservePriceHkd));
  e.aux_targets = aux_features(r.plate);
  e.weight = sample_weight(e.target_log_price);
  return e;
}

struct SplitSizes {
  std::size_t train, valid, test;
};

inline SplitSizes split_sizes(std::size_t n) {
  auto train = std::size_t(std::llround(0.64 * double(n)));
  auto valid = std::size_t(std::llround(0.16 * double(n)));
  if (train + valid > n) valid = n - train;
  return {train, valid, n - train - valid};
}

/// Drops unsold records, joins each sale to the latest market snapshot at or
/// before its date, shuffles deterministically by `seed` and splits 64/16/20.
/// Auxiliary inputs are standardized with training-split statistics.
inline SplitDataset build_dataset(const std::vector<AuctionRecord>& records, const MarketSeries& market,
                                  std::uint64_t seed) {
  struct Joined {
    const AuctionRecord* record;
    const MarketSnapshot* snapshot;
  };
  std::vector<Joined> sold;
  for (const auto& r : records) {
    if (!r.sold()) continue;
    const MarketSnapshot* s = market.at_or_before(r.date);
    if (!s) throw DataError("auction on " + format_date(r.date) + " is not covered by the market series");
    sold.push_back({&r, s});
  }
  Rng rng(derive_seed(seed, 0x5b117));
  std::shuffle(sold.begin(), sold.end(), rng);

  const SplitSizes sizes = split_sizes(sold.size());
  SplitDataset ds;
  ds.seed = seed;

  Standardization& st = ds.standardization;
  if (sizes.train > 0) {
    std::vector<AuxInput> raw(sizes.train);
    for (std::size_t i = 0; i < sizes.train; ++i)
      raw[i] = raw_aux_input(sold[i].record->date, sold[i].record->minute_of_day, *sold[i].snapshot);
    for (std::size_t c = 0; c < kAuxInputs; ++c) {
      double mean = 0.0;
      for (const auto& r : raw) mean += r[c];
      mean /= double(raw.size());
      double var = 0.0;
      for (const auto& r : raw) var += (r[c] - mean) * (r[c] - mean);
      var /= double(raw.size());
      st.mean[c] = mean;
      st.scale[c] = var > 0 ? std::sqrt(var) : 1.0;
    }
  }
  for (std::size_t i = 0; i < sold.size(); ++i) {
    Example e = make_example(*sold[i].record, *sold[i].snapshot, st);
    if (i < sizes.train) ds.train.push_back(std::move(e));
    else if (i < sizes.train + sizes.valid) ds.valid.push_back(std::move(e));
    else ds.test.push_back(std::move(e));
  }
  if (!market.empty()) {
    const auto& last = market.latest();
    ds.reference_aux_in = st.apply(raw_aux_input(last.date, std::nullopt, last));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic corpus with a known valuation

/// Ground-truth log price of a plate given the standardized stock level.
inline double oracle_log_price(const Plate& p, double standardized_stock, bool with_interaction = true) {
  const AuxiliaryFeatures f = aux_features(p);
  const double len = double(p.digits().size());
  const int c8 = f[kCount0 + 8];
  double v = 8.5;
  v += 1.2 * (4.0 - len);
  v += 0.9 * c8;
  v += 0.4 * f[kCount0 + 3];
  v -= 0.25 * f[kCount0 + 4];
  v += 1.4 * f[kSymmetric];
  v += 2.2 * f[kAAAA];
  v += 1.8 * f[kABCD];
  v += 1.0 * f[kDCBA];
  v += 0.8 * f[kRepeatedLetters];
  v += 0.7 * (f[kPrefixHK] || f[kPrefixXX]);
  v += 0.6 * f[kX00];
  v += 1.0 * f[kX000];
  v += 0.9 * (p.digits().find("168") != std::string::npos);
  if (with_interaction && c8 >= 2 && f[kSymmetric]) v += 1.5;
  v += 0.3 * standardized_stock;
  return std::max(v, std::log(kReservePriceHkd));
}

/// Draws plates with the synthetic corpus distribution: 25% without prefix;
/// digit lengths 4/3/2/1 with probabilities .55/.25/.15/.05; letter pairs
/// uniform except HK, XX and doubled letters, which are three times as likely.
class PlateSampler {
 public:
  PlateSampler() {
    for (char a = 'A'; a <= 'Z'; ++a)
      for (char b = 'A'; b <= 'Z'; ++b) {
        std::string pair{a, b};
        double w = (pair == "HK" || pair == "XX" || a == b) ? 3.0 : 1.0;
        pairs_.push_back(pair);
        cumulative_.push_back((cumulative_.empty() ? 0.0 : cumulative_.back()) + w);
      }
  }

  Plate operator()(Rng& rng) const {
    std::string prefix;
    if (uniform01(rng) >= 0.25) {
      double u = uniform01(rng) * cumulative_.back();
      auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
      prefix = pairs_[std::size_t(it - cumulative_.begin())];
    }
    double u = uniform01(rng);
    std::size_t len = u < 0.55 ? 4 : u < 0.80 ? 3 : u < 0.95 ? 2 : 1;
    std::string digits;
    digits.push_back(char('1' + rng() % 9));
    while (digits.size() < len) digits.push_back(char('0' + rng() % 10));
    return Plate::make(prefix, digits);
  }

 private:
  std::vector<std::string> pairs_;
  std::vector<double> cumulative_;
};

struct SyntheticCorpus {
  std::vector<AuctionRecord> records;
  MarketSeries market;
};

inline constexpr double kSyntheticUnsoldRate = 0.126;

struct SyntheticOptions {
  bool oracle_interaction = true;
};

/// Monthly market series from 1996-01 to 2017-02 plus `n` auction records
/// dated 1997-01 .. 2017-02 with prices exp(oracle + N(0, noise^2)),
/// rounded to whole HKD and floored at the reserve price.
inline SyntheticCorpus generate_synthetic(std::size_t n, std::uint64_t seed, double noise_sigma,
                                          SyntheticOptions options = {}) {
  using namespace std::chrono;
  if (n < 1) throw ConfigError("generate_synthetic: n must be >= 1");
  if (!(noise_sigma >= 0.0)) throw ConfigError("generate_synthetic: noise must be >= 0");

  Rng mrng(derive_seed(seed, 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  const year_month first{year{1995}, January};
  const int warmup = 12;  // months generated before the first emitted row
  const int months = warmup + (2017 - 1996) * 12 + 2;
  std::vector<double> stock(static_cast<std::size_t>(months)), cpi(static_cast<std::size_t>(months));
  stock[0] = 10000.0;
  cpi[0] = 80.0;
  for (std::size_t i = 1; i < stock.size(); ++i) {
    stock[i] = stock[i - 1] * std::exp(0.006 + 0.06 * normal(mrng));
    cpi[i] = cpi[i - 1] * std::exp(0.002 + 0.003 * normal(mrng));
  }
  std::vector<MarketSnapshot> rows;
  for (int i = warmup; i < months; ++i) {
    auto ym = first + std::chrono::months{i};
    MarketSnapshot s;
    s.date = sys_days(ym / 1);
    s.cpi = cpi[std::size_t(i)];
    s.stock_index = stock[std::size_t(i)];
    s.ret_1y = stock[std::size_t(i)] / stock[std::size_t(i - 12)] - 1.0;
    s.ret_1m = stock[std::size_t(i)] / stock[std::size_t(i - 1)] - 1.0;
    rows.push_back(s);
  }
  SyntheticCorpus corpus{{}, MarketSeries(std::move(rows))};

  Rng rng(derive_seed(seed, 2));
  PlateSampler sampler;
  const year_month auction_start{year{1997}, January};
  const int auction_months = (2017 - 1997) * 12 + 2;
  corpus.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    AuctionRecord r;
    r.plate = sampler(rng);
    auto ym = auction_start + std::chrono::months{int(rng() % unsigned(auction_months))};
    r.date = sys_days(ym / std::chrono::day{unsigned(1 + rng() % 28)});
    r.minute_of_day = 9 * 60 + 30;
    const MarketSnapshot* snap = corpus.market.at_or_before(r.date);
    const double z = corpus.market.standardized_stock(*snap);
    const double eps = noise_sigma * normal(rng);
    const bool unsold = uniform01(rng) < kSyntheticUnsoldRate;
    if (!unsold) {
      double log_price = oracle_log_price(r.plate, z, options.oracle_interaction) + eps;
      r.price_hkd = std::max(kReservePriceHkd, std::round(std::exp(log_price)));
    }
    corpus.records.push_back(std::move(r));
  }
  return corpus;
}

}  // namespace platemark
