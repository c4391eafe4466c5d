#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "common/fixtures.hpp"
#include "densepipe/cli.hpp"

namespace densepipe {
namespace {

namespace fs = std::filesystem;
using testing::ScratchDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

// Flags that shrink the default model so a CLI training run takes seconds.
const std::vector<std::string> kSmall = {"--stem_channels", "8",  "--block_sizes", "2,2", "--growth_rate", "6",
                                         "--head_widths",   "16", "--epochs",      "2",   "--batch_size",  "8"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

TEST(Config, Defaults) {
  const CliConfig c = load_config(std::nullopt, {}, nullptr);
  EXPECT_EQ(c.train.learning_rate, 1e-4);
  EXPECT_EQ(c.train.batch_size, 16u);
  EXPECT_EQ(c.train.epochs, 50u);
  EXPECT_EQ(c.train.optimizer, OptimizerKind::adam);
  EXPECT_EQ(c.train.dropout_rate, 0.5);
  EXPECT_EQ(c.model.head.dense_widths, (std::vector<std::size_t>{1024, 512}));
}

TEST(Config, BadValueNamesKey) {
  ScratchDir dir("cfg-bad");
  std::ofstream(dir / "c.txt") << "learning_rate = abc\n";
  try {
    load_config(dir / "c.txt", {}, nullptr);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, Precedence) {
  ScratchDir dir("cfg-prec");
  std::ofstream(dir / "c.txt") << "# comment\nseed = 5\nepochs = 7\n";
  EXPECT_EQ(load_config(std::nullopt, {}, "3").train.seed, 3u);
  EXPECT_EQ(load_config(dir / "c.txt", {}, "3").train.seed, 5u);
  const CliConfig c = load_config(dir / "c.txt", {{"seed", "11"}}, "3");
  EXPECT_EQ(c.train.seed, 11u);
  EXPECT_EQ(c.model.seed, 11u);
  EXPECT_EQ(c.train.epochs, 7u);
}

TEST(Config, RoundTrip) {
  CliConfig c = load_config(std::nullopt, {{"learning_rate", "0.00123"}, {"optimizer", "rmsprop"}, {"block_sizes", "4,5"},
                                           {"equalize", "false"}, {"k", "3"}},
                            nullptr);
  CliConfig back;
  apply_config_text(back, config_text(c));
  EXPECT_EQ(back, c);
}

TEST(Config, Errors) {
  CliConfig c;
  EXPECT_THROW(apply_config_key(c, "learning_rat", "1"), UnknownKeyError);
  EXPECT_THROW(load_config(fs::path("/nonexistent/densepipe.cfg"), {}, nullptr), ConfigFileError);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"nope"}).code, 2);
  EXPECT_EQ(run({"train", "--out", "/tmp/x"}).code, 2);
  EXPECT_EQ(run({"synth", "--learning_rate", "abc"}).code, 2);
  EXPECT_EQ(run({"eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent.csv"}).code, 1);
}

TEST(Cli, SynthCounts) {
  ScratchDir dir("cli-synth");
  const Outcome r = run({"synth", "--n", "1000", "--out", (dir / "data").string(), "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const DatasetManifest m = read_manifest(dir / "data" / "manifest.csv");
  EXPECT_EQ(m.class_counts(), (std::vector<std::size_t>{500, 500}));
}

class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new ScratchDir("cli-run");
    const Outcome s = run({"synth", "--n", "60", "--out", (*dir_ / "data").string(), "--seed", "4"});
    ASSERT_EQ(s.code, 0) << s.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string manifest() { return (*dir_ / "data" / "manifest.csv").string(); }
  static inline ScratchDir* dir_ = nullptr;
};

TEST_F(CliRun, TrainWritesReportsAndEvalReproduces) {
  const fs::path out = *dir_ / "train";
  const Outcome r = run(with({"train", "--manifest", manifest(), "--out", out.string(), "--seed", "2"}, kSmall));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"train.csv", "val.csv", "test.csv", "config.txt", "model.ckpt", "history.csv", "metrics.csv",
                        "confusion.txt", "report.txt"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(lines(slurp(out / "history.csv")).size(), 3u);

  const std::vector<std::string> confusion = lines(slurp(out / "confusion.txt"));
  ASSERT_EQ(confusion.size(), 3u);
  EXPECT_LT(confusion[0].find("pred female"), confusion[0].find("pred male"));
  EXPECT_EQ(confusion[1].rfind("actual female", 0), 0u);
  EXPECT_EQ(confusion[2].rfind("actual male", 0), 0u);

  // metrics.csv agrees with the counts it carries.
  const std::vector<std::string> rows = lines(slurp(out / "metrics.csv"));
  ASSERT_EQ(rows.size(), 2u);
  std::vector<double> v;
  std::istringstream cells(rows[1]);
  for (std::string cell; std::getline(cells, cell, ',');) v.push_back(std::stod(cell));
  ASSERT_EQ(v.size(), 9u);
  const MetricsReport m = metrics({static_cast<std::size_t>(v[5]), static_cast<std::size_t>(v[6]),
                                   static_cast<std::size_t>(v[7]), static_cast<std::size_t>(v[8])});
  EXPECT_NEAR(v[0], m.accuracy, 1e-6);
  EXPECT_NEAR(v[4], m.f1, 1e-6);
  EXPECT_EQ(v[5] + v[6] + v[7] + v[8], 12.0);

  const fs::path ev = *dir_ / "eval";
  const Outcome e = run({"eval", "--checkpoint", (out / "model.ckpt").string(), "--manifest", (out / "test.csv").string(),
                     "--out", ev.string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(slurp(ev / "metrics.csv"), slurp(out / "metrics.csv"));

  const Outcome p = run({"predict", "--checkpoint", (out / "model.ckpt").string(), "--manifest", (out / "test.csv").string()});
  EXPECT_EQ(p.code, 0) << p.err;
  const fs::path ex = *dir_ / "explain";
  const Outcome x = run({"explain", "--checkpoint", (out / "model.ckpt").string(), "--manifest", (out / "test.csv").string(),
                     "--limit", "2", "--out", ex.string()});
  EXPECT_EQ(x.code, 0) << x.err;
  const Outcome b = run({"bench", "--checkpoint", (out / "model.ckpt").string(), "--manifest", (out / "test.csv").string(),
                     "--runs", "2", "--warmup", "0", "--out", (*dir_ / "bench").string()});
  EXPECT_EQ(b.code, 0) << b.err;
}

TEST_F(CliRun, CrossvalFoldRows) {
  const fs::path out = *dir_ / "cv";
  const Outcome r = run(with({"crossval", "--manifest", manifest(), "--out", out.string(), "--k", "3"}, kSmall));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::vector<std::string> rows = lines(slurp(out / "folds.csv"));
  ASSERT_EQ(rows.size(), 1u + 3u + 2u);
  EXPECT_EQ(rows[1].rfind("1,40,20,", 0), 0u);
  EXPECT_EQ(rows[4].rfind("mean,", 0), 0u);
  EXPECT_EQ(rows[5].rfind("std,", 0), 0u);
  for (int f = 1; f <= 3; ++f) EXPECT_TRUE(fs::exists(out / ("fold" + std::to_string(f)) / "history.csv"));
}

TEST(Crossval, LargeManifestFoldSizes) {
  const std::vector<Fold> folds = kfold(testing::labelled_manifest({11200, 8000}), 5, 0);
  for (const Fold& f : folds) {
    EXPECT_EQ(f.validation.size(), 3840u);
    EXPECT_EQ(f.train.size(), 15360u);
  }
}

}  // namespace
}  // namespace densepipe
