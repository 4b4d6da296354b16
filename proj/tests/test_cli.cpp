#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "feddwa/experiment.hpp"

using namespace feddwa;
namespace fs = std::filesystem;

namespace {

std::string error_key(const json& doc, const ConfigOverrides& o = {}) {
  try {
    config_from_json(doc, o);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDDWA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class TempDir : public ::testing::Test {
 protected:
  fs::path dir_ = fs::temp_directory_path() / ("feddwa_cli_" + std::to_string(::getpid()) + "_" +
                                               ::testing::UnitTest::GetInstance()->current_test_info()->name());
  void SetUp() override {
    set_quiet(true);
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
};

json small_run() {
  return json::parse(R"({
    "clients": 6,
    "method": {"name": "feddwa", "k": 3},
    "train": {"rounds": 3, "lr": 0.1, "batch_size": 10},
    "data": {"source": "synth_clusters", "num_groups": 2, "samples_per_client": 60}
  })");
}

}  // namespace

TEST(Config, Defaults) {
  auto cfg = config_from_json(json::object());
  EXPECT_EQ(cfg.train.rounds, 100u);
  EXPECT_EQ(cfg.train.lr, 0.01);
  EXPECT_EQ(cfg.train.batch_size, 20u);
  EXPECT_EQ(cfg.train.local_epochs, 1u);
  EXPECT_EQ(cfg.train.fraction, 1.0);
  EXPECT_EQ(cfg.method.dwa.top_k, 5u);
  EXPECT_EQ(cfg.method.kind, MethodKind::feddwa);
  EXPECT_EQ(cfg.method.dwa.guidance.mode, GuidanceMode::one_step_ahead);
  EXPECT_EQ(cfg.partition.alpha, 0.07);
  EXPECT_EQ(cfg.partition.dominant_fraction, 0.8);
  EXPECT_EQ(cfg.partition.min_client_samples, 20u);
  EXPECT_EQ(cfg.clients, 20u);
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_EQ(error_key(json::parse(R"({"rounds": 3})")), "rounds");
  EXPECT_EQ(error_key(json::parse(R"({"train": {"round": 3}})")), "train.round");
  EXPECT_EQ(error_key(json::parse(R"({"method": {"guidance": {"steps": 2}}})")),
            "method.guidance.steps");
}

TEST(Config, TypeAndRangeErrorsNameTheKey) {
  EXPECT_EQ(error_key(json::parse(R"({"train": {"lr": "fast"}})")), "train.lr");
  EXPECT_EQ(error_key(json::parse(R"({"train": {"rounds": 2.5}})")), "train.rounds");
  EXPECT_EQ(error_key(json::parse(R"({"train": {"rounds": -1}})")), "train.rounds");
  EXPECT_EQ(error_key(json::parse(R"({"partition": {"alpha": -0.5}})")), "partition.alpha");
  EXPECT_EQ(error_key(json::parse(R"({"partition": {"s": 1.5}})")), "partition.s");
  EXPECT_EQ(error_key(json::parse(R"({"train": {"fraction": 0}})")), "train.fraction");
  EXPECT_EQ(error_key(json::parse(R"({"method": {"name": "pfedme"}})")), "method.name");
  EXPECT_EQ(error_key(json::parse(R"({"clients": 4, "method": {"k": 5}})")), "method.k");
  EXPECT_EQ(error_key(json::parse(R"({"data": {"source": "csv"}})")), "data.csv.path");
  EXPECT_EQ(error_key(json::parse(R"({"clients": 7, "data": {"source": "synth_clusters"}})")),
            "data.num_groups");
}

TEST(Config, FlagsOverrideFile) {
  auto doc = small_run();
  ConfigOverrides o;
  o.rounds = 9;
  o.k = 2;
  o.seed = 77;
  o.guidance = "current";
  o.adapt_steps = 4;
  o.alpha = 0.3;
  o.export_weights = true;
  auto cfg = config_from_json(doc, o);
  EXPECT_EQ(cfg.train.rounds, 9u);
  EXPECT_EQ(cfg.method.dwa.top_k, 2u);
  EXPECT_EQ(cfg.train.seed, 77u);
  EXPECT_EQ(cfg.method.dwa.guidance.mode, GuidanceMode::current);
  EXPECT_EQ(cfg.method.dwa.guidance.adapt_steps, 4u);
  EXPECT_EQ(cfg.partition.alpha, 0.3);
  EXPECT_TRUE(cfg.output.export_weights);
  o.alpha = -1.0;
  EXPECT_EQ(error_key(doc, o), "partition.alpha");
}

TEST(Config, RoundTripsThroughJson) {
  auto cfg = config_from_json(small_run());
  auto again = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(cfg), config_to_json(again));
}

TEST(Config, SampleConfigsParse) {
  for (const auto& entry : fs::directory_iterator(FEDDWA_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(parse_config(entry.path())) << entry.path();
  }
}

TEST_F(TempDir, RunWritesOutputs) {
  auto cfg = config_from_json(small_run());
  cfg.output.dir = dir_ / "run";
  cfg.output.export_weights = true;
  auto res = run_experiment(cfg);
  for (const char* f : {"metrics.csv", "summary.json", "manifest.json", "config.json",
                        "weights_1.csv", "weights_3.csv"}) {
    EXPECT_TRUE(fs::exists(cfg.output.dir / f)) << f;
  }
  for (const auto& e : fs::directory_iterator(cfg.output.dir)) {
    EXPECT_NE(e.path().extension(), ".tmp");
  }
  const auto metrics = slurp(cfg.output.dir / "metrics.csv");
  EXPECT_EQ(metrics.rfind("round,client,accuracy,uplink,downlink\n", 0), 0u);
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 1 + 3 * 6);
  auto summary = json::parse(slurp(cfg.output.dir / "summary.json"));
  EXPECT_EQ(summary["total_bytes"], summary["expected_total_bytes"]);
  EXPECT_EQ(summary["traffic_multiplier"], 3);
  EXPECT_EQ(summary["best_round"], *res.run.best_round);
  const auto weights = slurp(cfg.output.dir / "weights_2.csv");
  EXPECT_EQ(weights.rfind("client,0,1,2,3,4,5\n", 0), 0u);
}

TEST_F(TempDir, SweepRecordsFailuresAndContinues) {
  auto cfg = config_from_json(small_run());
  cfg.output.dir = dir_ / "sweep";
  auto rows = sweep(cfg, SweepAxis::k, {1, 2.5, 6, 7});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_TRUE(rows[0].ok);
  EXPECT_FALSE(rows[1].ok);
  EXPECT_TRUE(rows[2].ok);
  EXPECT_FALSE(rows[3].ok);
  const auto csv = slurp(cfg.output.dir / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("failed"), std::string::npos);
  EXPECT_THROW(parse_axis("lr"), ConfigError);
}

TEST_F(TempDir, CliExitCodes) {
  const auto cfg_path = dir_ / "cfg.json";
  std::ofstream(cfg_path) << small_run().dump();
  const std::string base = "run --config " + cfg_path.string() + " --quiet --out " + (dir_ / "o").string();
  EXPECT_EQ(run_cli(base), 0);
  EXPECT_TRUE(fs::exists(dir_ / "o" / "metrics.csv"));
  EXPECT_EQ(run_cli(base + " --alpha -1"), 2);
  EXPECT_EQ(run_cli(base + " --k 99"), 2);
  EXPECT_EQ(run_cli(base + " --guidance sideways"), 2);
  EXPECT_EQ(run_cli("run --no-such-flag"), 2);
  EXPECT_EQ(run_cli(""), 2);
  std::ofstream(dir_ / "bad.json") << R"({"train": {"lr": 1e308}, "clients": 6,
      "data": {"source": "synth_clusters", "num_groups": 2}})";
  EXPECT_EQ(run_cli("run --quiet --config " + (dir_ / "bad.json").string() + " --rounds 1 --out " +
                    (dir_ / "bad").string()),
            1);
  EXPECT_EQ(run_cli("sweep --quiet --config " + cfg_path.string() + " --axis K --values 1,2 --out " +
                    (dir_ / "s").string()),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "s" / "sweep.csv"));
}

TEST_F(TempDir, OutputRootFromEnvironment) {
  ::setenv("FEDDWA_OUT_ROOT", dir_.c_str(), 1);
  auto cfg = config_from_json(small_run());
  ::unsetenv("FEDDWA_OUT_ROOT");
  EXPECT_EQ(cfg.output.dir, dir_ / "feddwa_seed1");
}
