// SPDX-License-Identifier: Apache-2.0
// Drives the platemark executable end to end in a scratch directory.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "platemark/persistence.hpp"
#include "platemark/search.hpp"
#include "platemark/training.hpp"

namespace fs = std::filesystem;
using namespace platemark;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static inline fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("platemark_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  static Outcome run(const std::string& args) {
    const std::string cmd = std::string(PLATEMARK_CLI) + " " + args + " 2>" + (dir / "stderr.txt").string();
    Outcome o;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return o;
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) o.out.append(buf, n);
    const int status = ::pclose(p);
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return o;
  }

  static std::string path(const std::string& name) { return (dir / name).string(); }

  static void write(const std::string& name, const std::string& text) { std::ofstream(dir / name) << text; }

  static std::string tiny_config(const std::string& extra_train = "") {
    return R"({"model":{"extractor":"CNN","embedding_dim":4,"layers":2,"width":8,"price_head":[12],"aux_head":[10]},)"
           R"("train":{"max_epochs":6,"patience":3,"seed":4)" +
           extra_train + R"(},"split_seed":9,"search_ranges":false})";
  }

  /// Corpus plus trained model shared by the tests below.
  static void ensure_model() {
    if (fs::exists(dir / "m.pmrk")) return;
    ASSERT_EQ(run("gen --n 700 --seed 12 --out " + path("data")).code, 0);
    write("cfg.json", tiny_config());
    Outcome t = run("train --quiet --config " + path("cfg.json") + " --data " + path("data") + " --out " + path("m.pmrk"));
    ASSERT_EQ(t.code, 0) << slurp(dir / "stderr.txt");
    train_stdout = t.out;
  }
  static inline std::string train_stdout;
};

TEST_F(Cli, GenIsByteDeterministic) {
  ASSERT_EQ(run("gen --n 500 --seed 7 --out " + path("g1")).code, 0);
  ASSERT_EQ(run("gen --n 500 --seed 7 --out " + path("g2")).code, 0);
  ASSERT_EQ(run("gen --n 500 --seed 8 --out " + path("g3")).code, 0);
  for (const char* f : {"auctions.csv", "market.csv"})
    EXPECT_EQ(slurp(dir / "g1" / f), slurp(dir / "g2" / f)) << f;
  EXPECT_NE(slurp(dir / "g1" / "auctions.csv"), slurp(dir / "g3" / "auctions.csv"));
  EXPECT_EQ(load_auctions(path("g1/auctions.csv")).size(), 500u);
}

TEST_F(Cli, EvalReproducesTrainingMetrics) {
  ensure_model();
  Outcome e = run("eval --split all --model " + path("m.pmrk") + " --data " + path("data"));
  ASSERT_EQ(e.code, 0);
  EXPECT_EQ(e.out, train_stdout);

  // Run record carries the same test RMSE text.
  std::istringstream csv(slurp(dir / "m.pmrk.runs.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header.rfind("config_id,run,seed,best_epoch,train_rmse,valid_rmse,test_rmse", 0), 0u);
  std::vector<std::string> fields;
  std::stringstream rs(row);
  for (std::string f; std::getline(rs, f, ',');) fields.push_back(f);
  ASSERT_GE(fields.size(), 7u);
  EXPECT_NE(train_stdout.find("test\trmse=" + fields[6] + "\t"), std::string::npos);
}

TEST_F(Cli, TrainingIsReproducible) {
  ensure_model();
  Outcome t = run("train --quiet --config " + path("cfg.json") + " --data " + path("data") + " --out " + path("m_again.pmrk"));
  ASSERT_EQ(t.code, 0);
  EXPECT_EQ(t.out, train_stdout);
  EXPECT_EQ(slurp(dir / "m.pmrk"), slurp(dir / "m_again.pmrk"));
}

TEST_F(Cli, SearchPrintsPlateTabDistance) {
  ensure_model();
  ASSERT_EQ(run("index --model " + path("m.pmrk") + " --plates " + path("data/auctions.csv") + " --out " + path("i.pmix")).code, 0);
  const LatentIndex index = load_index(path("i.pmix"));
  ModelBundle b = load_model(path("m.pmrk"));
  EXPECT_EQ(index.fingerprint(), model_fingerprint(*b.model));

  const std::string query_plate = index.plates().front();
  Outcome s = run("search --k 5 --index " + path("i.pmix") + " --plate '" + query_plate + "'");
  ASSERT_EQ(s.code, 0);
  QueryResult expect = query(*b.model, index, parse_plate(query_plate), 5);
  std::istringstream lines(s.out);
  std::size_t i = 0;
  for (std::string line; std::getline(lines, line); ++i) {
    ASSERT_LT(i, expect.neighbors.size());
    const auto tab = line.find('\t');
    ASSERT_NE(tab, std::string::npos) << line;
    EXPECT_EQ(line.substr(0, tab), expect.neighbors[i].plate);
    EXPECT_NE(line.substr(0, tab), query_plate);
    EXPECT_DOUBLE_EQ(std::stod(line.substr(tab + 1)), expect.neighbors[i].distance);
  }
  EXPECT_EQ(i, 5u);

  // Plates outside the index need the model.
  EXPECT_EQ(run("search --index " + path("i.pmix") + " --plate ZZ9999").code, 2);
  EXPECT_EQ(run("search --index " + path("i.pmix") + " --plate ZZ9999 --model " + path("m.pmrk")).code, 0);
}

TEST_F(Cli, PlateListIndex) {
  ensure_model();
  write("plates.txt", "hk1\nAB 12\n\n88\nHK1\n");
  ASSERT_EQ(run("index --model " + path("m.pmrk") + " --plates " + path("plates.txt") + " --out " + path("l.pmix")).code, 0);
  const LatentIndex index = load_index(path("l.pmix"));
  EXPECT_EQ(index.plates(), (std::vector<std::string>{"HK 1", "AB 12", "88"}));
  write("bad_plates.txt", "HK1\nH12\n");
  EXPECT_EQ(run("index --model " + path("m.pmrk") + " --plates " + path("bad_plates.txt") + " --out " + path("x.pmix")).code, 2);
}

TEST_F(Cli, MdnFitAddsDistributionHead) {
  ensure_model();
  Outcome o = run("mdn-fit --k 2 --hidden 6 --epochs 8 --model " + path("m.pmrk") + " --data " + path("data") + " --out " +
                  path("m_mdn.pmrk"));
  ASSERT_EQ(o.code, 0) << slurp(dir / "stderr.txt");
  EXPECT_NE(o.out.find("holdout_nll="), std::string::npos);
  ModelBundle b = load_model(path("m_mdn.pmrk"));
  ASSERT_TRUE(b.mdn);
  EXPECT_EQ(b.mdn->components(), 2u);
  EXPECT_EQ(model_fingerprint(*b.model), model_fingerprint(*load_model(path("m.pmrk")).model));
}

TEST_F(Cli, ExitCodes) {
  ensure_model();
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("gen --seed 1").code, 1);  // --out missing
  write("broken.json", "{\"model\": ");
  EXPECT_EQ(run("train --config " + path("broken.json") + " --data " + path("data") + " --out " + path("z.pmrk")).code, 1);
  write("wide.json", R"({"model":{"layers":9}})");
  EXPECT_EQ(run("train --config " + path("wide.json") + " --data " + path("data") + " --out " + path("z.pmrk")).code, 1);

  write("junk.pmrk", "not a model");
  EXPECT_EQ(run("eval --model " + path("junk.pmrk") + " --data " + path("data")).code, 2);
  fs::create_directories(dir / "empty");
  EXPECT_EQ(run("eval --model " + path("m.pmrk") + " --data " + path("empty")).code, 2);
  EXPECT_EQ(run("search --index " + path("m.pmrk") + " --plate HK1").code, 2);

  write("diverge.json", tiny_config(R"(,"learning_rate":1e300)"));
  EXPECT_EQ(run("train --quiet --config " + path("diverge.json") + " --data " + path("data") + " --out " + path("z.pmrk")).code, 3);
  EXPECT_FALSE(fs::exists(dir / "z.pmrk"));
}

}  // namespace
