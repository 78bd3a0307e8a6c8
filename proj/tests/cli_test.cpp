// End-to-end checks of the parefine binary: exit codes, file outputs, determinism.

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "parefine/parefine.hpp"

namespace fs = std::filesystem;
using namespace parefine;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(PAREFINE_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::path(::testing::TempDir()) / ("parefine_cli_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  void write_gray(const std::string& rel, std::size_t h, std::size_t w, const std::vector<double>& v) {
    Tensor<double> t({1, h, w});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
    fs::create_directories((dir_ / rel).parent_path());
    write_image(dir_ / rel, t);
  }

  std::string synth(std::size_t n, std::uint64_t seed, const std::string& rel = "data") {
    const CliRun r = run("synth --n " + std::to_string(n) + " --seed " + std::to_string(seed) + " --out " + path(rel));
    EXPECT_EQ(r.code, 0) << r.out;
    return path(rel);
  }

  fs::path dir_;
};

std::string first_image(const std::string& data) {
  std::vector<std::string> v;
  for (const auto& e : fs::directory_iterator(fs::path(data) / "images")) v.push_back(e.path().string());
  std::sort(v.begin(), v.end());
  return v.front();
}

}  // namespace

TEST_F(Cli, NoSubcommandIsUsageError) { EXPECT_EQ(run("").code, 2); }

TEST_F(Cli, HelpExitsZero) {
  const CliRun r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
}

TEST_F(Cli, UnknownOptionIsUsageError) { EXPECT_EQ(run("synth --out x --bogus 3").code, 2); }

TEST_F(Cli, SynthIsDeterministic) {
  const std::string a = synth(10, 7, "a"), b = synth(10, 7, "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = fs::path(b) / fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 31u);  // 10 images, 10 labels, 10 masks, split.txt

  const std::string c = synth(10, 8, "c");
  EXPECT_NE(slurp(first_image(a)), slurp(first_image(c)));
}

TEST_F(Cli, SynthSplitDefaultsToEightyPercent) {
  const std::string d = synth(10, 1);
  std::vector<std::string> warnings;
  EXPECT_EQ(load_dataset<float>(d, "train", &warnings).size(), 8u);
  EXPECT_EQ(load_dataset<float>(d, "test", &warnings).size(), 2u);
}

TEST_F(Cli, EvalPerfectPrediction) {
  write_gray("pred/a.pgm", 2, 3, {1, 0, 1, 0, 1, 0});
  write_gray("gt/a.pgm", 2, 3, {1, 0, 1, 0, 1, 0});
  const CliRun r = run("eval --pred-dir " + path("pred") + " --gt-dir " + path("gt"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("100.00  100.00  100.00"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalFourPixelExample) {
  // one hit, one false alarm, one miss, one true negative
  write_gray("pred/x.pgm", 2, 2, {1, 1, 0, 0});
  write_gray("gt/x.pgm", 2, 2, {1, 0, 1, 0});
  const CliRun r = run("eval --pred-dir " + path("pred") + " --gt-dir " + path("gt") + " --json " + path("m.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(slurp(path("m.json")));
  EXPECT_NEAR(j["mean"]["f1"].get<double>(), 50.0, 1e-9);
  EXPECT_NEAR(j["mean"]["acc"].get<double>(), 50.0, 1e-9);
  EXPECT_EQ(j["images"].size(), 1u);
  EXPECT_EQ(j["images"][0]["id"], "x");
}

TEST_F(Cli, EvalMaskExcludesPixels) {
  // the two wrong pixels sit outside the mask
  write_gray("pred/x.pgm", 2, 2, {1, 1, 0, 0});
  write_gray("gt/x.pgm", 2, 2, {1, 0, 1, 0});
  write_gray("mask/x.pgm", 2, 2, {1, 0, 0, 1});
  const CliRun r = run("eval --pred-dir " + path("pred") + " --gt-dir " + path("gt") + " --mask-dir " + path("mask") +
                    " --json " + path("m.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(slurp(path("m.json")));
  EXPECT_NEAR(j["mean"]["acc"].get<double>(), 100.0, 1e-9);
}

TEST_F(Cli, EvalMissingGroundTruthIsDataError) {
  write_gray("pred/a.pgm", 2, 2, {1, 0, 1, 0});
  fs::create_directories(path("gt"));
  const CliRun r = run("eval --pred-dir " + path("pred") + " --gt-dir " + path("gt"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("a.pgm"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalSizeMismatchIsDataError) {
  write_gray("pred/a.pgm", 2, 2, {1, 0, 1, 0});
  write_gray("gt/a.pgm", 1, 4, {1, 0, 1, 0});
  EXPECT_EQ(run("eval --pred-dir " + path("pred") + " --gt-dir " + path("gt")).code, 3);
}

TEST_F(Cli, InferMissingCheckpointIsDataError) {
  const std::string d = synth(2, 1);
  const CliRun r = run("infer --ckpt " + path("nope.parf") + " --image " + first_image(d) + " --out " + path("p.pgm"));
  EXPECT_EQ(r.code, 3) << r.out;
}

TEST_F(Cli, CorruptCheckpointIsDataError) {
  const std::string d = synth(2, 1);
  std::ofstream(path("bad.parf")) << "PARFgarbage";
  EXPECT_EQ(run("infer --ckpt " + path("bad.parf") + " --image " + first_image(d) + " --out " + path("p.pgm")).code, 3);
}

TEST_F(Cli, BadConfigValueIsConfigError) {
  const std::string d = synth(4, 1);
  EXPECT_EQ(run("train --data " + d + " --out " + path("o") + " --d 4").code, 2);
  EXPECT_EQ(run("train --data " + d + " --out " + path("o") + " --set nonsense=1").code, 2);
  EXPECT_EQ(run("train --data " + d + " --out " + path("o") + " --config " + path("missing.cfg")).code, 2);
}

TEST_F(Cli, MissingDatasetIsDataError) {
  EXPECT_EQ(run("train --data " + path("none") + " --out " + path("o") + " --iters 1").code, 3);
}

TEST_F(Cli, DivergenceIsNumericError) {
  const std::string d = synth(4, 1);
  const CliRun r = run("train --data " + d + " --out " + path("o") + " --iters 20 --lr 1e30 --set unet_width=2");
  EXPECT_EQ(r.code, 4) << r.out;
}

TEST_F(Cli, TrainInferDumpRoundTrip) {
  const std::string d = synth(6, 3);
  const CliRun t = run("train --data " + d + " --out " + path("o") +
                    " --iters 10 --seed 5 --set unet_width=4 --set unet_depth=3 --set eval_every=5");
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("eval iter=5"), std::string::npos) << t.out;
  EXPECT_NE(t.out.find("done iter=10"), std::string::npos) << t.out;
  ASSERT_TRUE(fs::exists(path("o/model.parf")));
  ASSERT_TRUE(fs::exists(path("o/train_log.tsv")));

  const std::string resolved = slurp(path("o/resolved_config.txt"));
  EXPECT_NE(resolved.find("seed = 5"), std::string::npos) << resolved;
  EXPECT_NE(resolved.find("max_iters = 10"), std::string::npos) << resolved;
  EXPECT_NE(resolved.find("unet_width = 4"), std::string::npos) << resolved;
  // the resolved file is itself a valid config
  const std::string body = resolved.substr(resolved.find("\n", resolved.rfind("# ")) + 1);
  EXPECT_EQ(parse_config(body).seed, 5u);

  const std::string img = first_image(d);
  const CliRun i1 = run("infer --ckpt " + path("o/model.parf") + " --image " + img + " --out " + path("p1.pgm") +
                     " --mask " + path("m1.pgm"));
  ASSERT_EQ(i1.code, 0) << i1.out;
  ASSERT_EQ(run("infer --ckpt " + path("o/model.parf") + " --image " + img + " --out " + path("p2.pgm")).code, 0);
  EXPECT_EQ(slurp(path("p1.pgm")), slurp(path("p2.pgm")));

  const PnmImage p = read_pnm(path("p1.pgm"));
  EXPECT_EQ(p.channels, 1u);
  EXPECT_EQ(p.width, 64u);
  EXPECT_EQ(p.height, 64u);
  const PnmImage m = read_pnm(path("m1.pgm"));
  for (std::size_t k = 0; k < m.bytes.size(); ++k) {
    ASSERT_TRUE(m.bytes[k] == 0 || m.bytes[k] == 255);
    EXPECT_EQ(m.bytes[k] == 255, p.bytes[k] >= 128) << k;
  }

  const CliRun dump = run("dump-filters --ckpt " + path("o/model.parf") + " --image " + img + " --out " + path("f.pgm"));
  ASSERT_EQ(dump.code, 0) << dump.out;
  EXPECT_NE(dump.out.find("tiles=6x6"), std::string::npos) << dump.out;
  const PnmImage g = read_pnm(path("f.pgm"));
  EXPECT_GT(g.width, 0u);
  EXPECT_EQ(g.width, g.height);
}

TEST_F(Cli, TrainIsReproducible) {
  const std::string d = synth(4, 2);
  const std::string common = " --iters 6 --seed 9 --set unet_width=2 --set unet_depth=2 --set eval_every=3";
  ASSERT_EQ(run("train --data " + d + " --out " + path("a") + common).code, 0);
  ASSERT_EQ(run("train --data " + d + " --out " + path("b") + common).code, 0);
  EXPECT_EQ(slurp(path("a/model.parf")), slurp(path("b/model.parf")));
  EXPECT_EQ(slurp(path("a/train_log.tsv")), slurp(path("b/train_log.tsv")));
}

TEST_F(Cli, DumpWithoutFiltersIsConfigError) {
  const std::string d = synth(4, 2);
  ASSERT_EQ(run("train --data " + d + " --out " + path("o") +
                " --iters 2 --set use_pa_filters=false --lambda 0 --set unet_width=2 --set unet_depth=2")
                .code,
            0);
  EXPECT_EQ(
      run("dump-filters --ckpt " + path("o/model.parf") + " --image " + first_image(d) + " --out " + path("f.pgm")).code,
      2);
}

TEST_F(Cli, GradcheckFilteredRunPasses) {
  const CliRun r = run("gradcheck --instances 1 --filter dice");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos) << r.out;
}
