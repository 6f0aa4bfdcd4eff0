// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "platemark/dataset.hpp"

using namespace platemark;

namespace {

MarketSeries small_market() {
  std::vector<MarketSnapshot> rows;
  for (int m = 1; m <= 12; ++m) {
    MarketSnapshot s;
    s.date = *parse_iso_date("2010-" + std::string(m < 10 ? "0" : "") + std::to_string(m) + "-01");
    s.cpi = 100.0 + m;
    s.stock_index = 20000.0 + 150.0 * m * m;
    s.ret_1y = 0.01 * m;
    s.ret_1m = -0.005 * m;
    rows.push_back(s);
  }
  return MarketSeries(rows);
}

std::vector<AuctionRecord> records(std::size_t n, std::size_t unsold) {
  std::vector<AuctionRecord> out;
  Rng rng(3);
  PlateSampler sampler;
  for (std::size_t i = 0; i < n; ++i) {
    AuctionRecord r;
    r.plate = sampler(rng);
    r.date = *parse_iso_date("2010-03-15") + std::chrono::days{int(i % 200)};
    if (i >= unsold) r.price_hkd = 1000.0 + double(i) * 37.0;
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST(AuctionsCsv, ParsesSoldAndUnsoldRows) {
  std::istringstream in("plate,price_hkd,datetime,status\n28,2300000,2016-02-20,S\nXX123,,2005-03-01,U\n"
                        "hk 1,5000,2001-01-02T10:45,S\n");
  auto rows = parse_auctions(in);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].plate.canonical(), "28");
  EXPECT_DOUBLE_EQ(*rows[0].price_hkd, 2.3e6);
  EXPECT_EQ(format_date(rows[0].date), "2016-02-20");
  EXPECT_FALSE(rows[1].sold());
  EXPECT_EQ(rows[1].plate.canonical(), "XX 123");
  EXPECT_EQ(rows[2].minute_of_day, 10 * 60 + 45);
}

TEST(AuctionsCsv, EmptyInputGivesNoRecords) {
  std::istringstream empty("");
  EXPECT_TRUE(parse_auctions(empty).empty());
  std::istringstream header_only("plate,price_hkd,datetime,status\n");
  EXPECT_TRUE(parse_auctions(header_only).empty());
}

TEST(AuctionsCsv, ErrorsCarryLineNumbers) {
  auto message = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_auctions(in);
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const std::string h = "plate,price_hkd,datetime,status\n28,5000,2016-02-20,S\n";
  EXPECT_NE(message(h + "H12,5000,2016-02-20,S\n").find("line 3"), std::string::npos);
  EXPECT_NE(message(h + "28,-5,2016-02-20,S\n").find("positive"), std::string::npos);
  EXPECT_NE(message(h + "28,0,2016-02-20,S\n").find("line 3"), std::string::npos);
  EXPECT_NE(message(h + "28,5000,2016-02-30,S\n").find("bad date"), std::string::npos);
  EXPECT_NE(message(h + "28,5000,2016-02-20\n").find("4 fields"), std::string::npos);
  EXPECT_NE(message(h + "28,5000,2016-02-20,X\n").find("status"), std::string::npos);
  EXPECT_NE(message(h + "28,5000,2016-02-20,U\n").find("empty price"), std::string::npos);
}

TEST(AuctionsCsv, WriteParseRoundTrip) {
  auto corpus = generate_synthetic(300, 11, 0.3);
  std::ostringstream out;
  write_auctions(out, corpus.records);
  std::istringstream in(out.str());
  auto back = parse_auctions(in);
  ASSERT_EQ(back.size(), corpus.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].plate, corpus.records[i].plate);
    EXPECT_EQ(back[i].date, corpus.records[i].date);
    EXPECT_EQ(back[i].price_hkd, corpus.records[i].price_hkd);
    EXPECT_EQ(back[i].minute_of_day, corpus.records[i].minute_of_day);
  }
  std::ostringstream mout;
  write_market(mout, corpus.market);
  std::istringstream min(mout.str());
  auto market = parse_market(min);
  ASSERT_EQ(market.rows().size(), corpus.market.rows().size());
  for (std::size_t i = 0; i < market.rows().size(); ++i) {
    EXPECT_EQ(market.rows()[i].stock_index, corpus.market.rows()[i].stock_index);
    EXPECT_EQ(market.rows()[i].ret_1m, corpus.market.rows()[i].ret_1m);
  }
}

TEST(Market, RejectsNonIncreasingDates) {
  std::istringstream in("date,cpi,stock_index,ret_1y,ret_1m\n2010-02-01,1,1,0,0\n2010-01-01,1,1,0,0\n");
  EXPECT_THROW(parse_market(in), DataError);
}

TEST(Market, JoinNeverUsesFutureSnapshot) {
  MarketSeries m = small_market();
  EXPECT_EQ(m.at_or_before(*parse_iso_date("2009-12-31")), nullptr);
  EXPECT_EQ(m.at_or_before(*parse_iso_date("2010-03-01"))->date, *parse_iso_date("2010-03-01"));
  EXPECT_EQ(m.at_or_before(*parse_iso_date("2010-03-31"))->date, *parse_iso_date("2010-03-01"));
  EXPECT_EQ(m.at_or_before(*parse_iso_date("2030-01-01"))->date, *parse_iso_date("2010-12-01"));
}

TEST(SampleWeight, Formula) {
  EXPECT_DOUBLE_EQ(sample_weight(6.9078), 6.9078);
  EXPECT_DOUBLE_EQ(sample_weight(12.5), 12.5);
  EXPECT_NEAR(sample_weight(12.612), 504.48, 1e-9);
  EXPECT_DOUBLE_EQ(sample_weight(0.2), 1.0);
  double prev = 0.0;
  for (double l = 0.0; l < 20.0; l += 0.01) {
    EXPECT_GE(sample_weight(l), prev);
    prev = sample_weight(l);
  }
  EXPECT_GT(sample_weight(std::nextafter(12.5, 13.0)) - sample_weight(12.5), 400.0);
}

TEST(BuildDataset, DropsUnsoldAndSplits) {
  auto ds = build_dataset(records(100, 12), small_market(), 5);
  EXPECT_EQ(ds.size(), 88u);
  EXPECT_NEAR(double(ds.train.size()), 56.0, 1.0);
  EXPECT_NEAR(double(ds.valid.size()), 14.0, 1.0);
  EXPECT_NEAR(double(ds.test.size()), 18.0, 1.0);
}

TEST(BuildDataset, ProportionsAndDisjointnessForManySizes) {
  for (std::size_t n = 10; n <= 400; n += 13) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto ds = build_dataset(records(n, 0), small_market(), seed);
      EXPECT_NEAR(double(ds.train.size()), 0.64 * double(n), 1.0);
      EXPECT_NEAR(double(ds.valid.size()), 0.16 * double(n), 1.0);
      EXPECT_NEAR(double(ds.test.size()), 0.20 * double(n), 1.0);
      // Each record has a distinct price, so prices identify records.
      std::set<double> prices;
      for (auto* split : {&ds.train, &ds.valid, &ds.test})
        for (const auto& e : *split) prices.insert(e.target_log_price);
      EXPECT_EQ(prices.size(), n);
    }
  }
}

TEST(BuildDataset, TargetsWeightsAndDeterminism) {
  auto recs = records(50, 0);
  recs[0].price_hkd = 1000.0;
  auto a = build_dataset(recs, small_market(), 9);
  auto b = build_dataset(recs, small_market(), 9);
  auto c = build_dataset(recs, small_market(), 10);
  bool found = false;
  for (auto* split : {&a.train, &a.valid, &a.test})
    for (const auto& e : *split) {
      if (e.target_log_price == std::log(1000.0)) found = true;
      EXPECT_DOUBLE_EQ(e.weight, sample_weight(e.target_log_price));
      EXPECT_EQ(e.aux_targets, aux_features(e.plate));
      EXPECT_EQ(e.encoded, encode_plate(e.plate));
    }
  EXPECT_TRUE(found);
  EXPECT_NEAR(std::log(1000.0), 6.9078, 1e-4);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].plate, b.train[i].plate);
    EXPECT_EQ(a.train[i].aux_in, b.train[i].aux_in);
  }
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) differs |= !(a.train[i].plate == c.train[i].plate);
  EXPECT_TRUE(differs);
}

TEST(BuildDataset, TrainingSplitIsStandardized) {
  auto corpus = generate_synthetic(3000, 4, 0.3);
  auto ds = build_dataset(corpus.records, corpus.market, 4);
  for (std::size_t c = 0; c < kAuxInputs; ++c) {
    double mean = 0.0, var = 0.0;
    for (const auto& e : ds.train) mean += e.aux_in[c];
    mean /= double(ds.train.size());
    for (const auto& e : ds.train) var += (e.aux_in[c] - mean) * (e.aux_in[c] - mean);
    var /= double(ds.train.size());
    EXPECT_LT(std::abs(mean), 1e-9) << "coordinate " << c;
    EXPECT_NEAR(var, 1.0, 1e-9) << "coordinate " << c;
  }
}

TEST(BuildDataset, UncoveredDateIsAnError) {
  auto recs = records(20, 0);
  recs[3].date = *parse_iso_date("2001-01-01");
  EXPECT_THROW(build_dataset(recs, small_market(), 1), DataError);
}

TEST(Oracle, FormulaExamples) {
  EXPECT_DOUBLE_EQ(oracle_log_price(parse_plate("1"), 0.0), 12.1);
  EXPECT_NEAR(oracle_log_price(parse_plate("8888"), 0.0), 17.2, 1e-12);
  EXPECT_NEAR(oracle_log_price(parse_plate("8888"), 0.0, false), 15.7, 1e-12);
  // 1168: +0.9 count_8, +0.9 for "168".
  EXPECT_NEAR(oracle_log_price(parse_plate("1168"), 0.0), 8.5 + 0.9 + 0.9, 1e-12);
  EXPECT_NEAR(oracle_log_price(parse_plate("HK 1"), 1.0), 12.1 + 0.7 + 0.3, 1e-12);
  EXPECT_NEAR(oracle_log_price(parse_plate("AA 1000"), 0.0), 8.5 + 0.8 + 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(oracle_log_price(parse_plate("4444"), -30.0), std::log(1000.0));
}

TEST(Synthetic, DeterministicAndSized) {
  auto a = generate_synthetic(1000, 7, 0.3);
  auto b = generate_synthetic(1000, 7, 0.3);
  std::ostringstream sa, sb;
  write_auctions(sa, a.records);
  write_auctions(sb, b.records);
  EXPECT_EQ(a.records.size(), 1000u);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Synthetic, UnsoldRateAndSkew) {
  auto c = generate_synthetic(10000, 8, 0.3);
  std::size_t unsold = 0;
  std::vector<double> prices;
  for (const auto& r : c.records) {
    if (!r.sold()) {
      ++unsold;
      continue;
    }
    EXPECT_GE(*r.price_hkd, kReservePriceHkd);
    prices.push_back(*r.price_hkd);
    ASSERT_NE(c.market.at_or_before(r.date), nullptr);
  }
  EXPECT_NEAR(double(unsold) / 10000.0, 0.126, 0.02);
  double mean = 0.0;
  for (double p : prices) mean += p / double(prices.size());
  std::nth_element(prices.begin(), prices.begin() + long(prices.size() / 2), prices.end());
  EXPECT_GT(mean, prices[prices.size() / 2]);
}

TEST(Synthetic, NoiselessCorpusMatchesOracle) {
  auto c = generate_synthetic(2000, 12, 0.0);
  double ss_res = 0.0;
  for (const auto& r : c.records) {
    if (!r.sold()) continue;
    const double z = c.market.standardized_stock(*c.market.at_or_before(r.date));
    const double truth = oracle_log_price(r.plate, z);
    // Rounding to whole HKD is the only distortion.
    EXPECT_NEAR(std::log(*r.price_hkd), truth, 1e-3);
    ss_res += std::pow(std::log(*r.price_hkd) - truth, 2);
  }
  EXPECT_LT(ss_res, 1e-3);
}

TEST(Synthetic, SamplerProportions) {
  PlateSampler s;
  Rng rng(1);
  std::size_t no_prefix = 0, len4 = 0, hk = 0, ab = 0;
  const std::size_t n = 200000;
  for (std::size_t i = 0; i < n; ++i) {
    Plate p = s(rng);
    no_prefix += !p.has_prefix();
    len4 += p.digits().size() == 4;
    hk += p.prefix() == "HK";
    ab += p.prefix() == "AB";
  }
  EXPECT_NEAR(double(no_prefix) / n, 0.25, 0.005);
  EXPECT_NEAR(double(len4) / n, 0.55, 0.005);
  EXPECT_NEAR(double(hk) / double(ab), 3.0, 0.6);
}
