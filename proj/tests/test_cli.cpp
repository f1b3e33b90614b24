#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ept/cli.hpp"
#include "test_support.hpp"

namespace {

using namespace ept;
namespace fs = std::filesystem;
using io::json;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ept_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

json small_config() {
  return json::parse(R"({
    "dataset": {"name": "8gaussians", "n": 400},
    "reference": {"n": 300},
    "method": "ept", "divergence": "chi2",
    "objective": {"variant": "lsdr", "alpha": 0.1, "T": 2, "batch": 100},
    "transport": {"s": 0.05, "K": 12},
    "net": {"widths": [8, 8]},
    "seed": 3, "snapshot_every": 4,
    "metrics": {"samples": 200}
  })");
}

fs::path write_config(const fs::path& dir, const json& j) {
  fs::create_directories(dir);
  const fs::path p = dir / "config.in.json";
  io::write_file(p, j.dump());
  return p;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

TEST(Config, UnknownKeysAreRejected) {
  json j = small_config();
  j["objective"]["beta"] = 1.0;
  EXPECT_THROW(io::config_from_json(j), ConfigError);
  j = small_config();
  j["colour"] = "red";
  EXPECT_THROW(io::config_from_json(j), ConfigError);
}

TEST(Config, RoundTripsThroughJson) {
  const RunConfig a = io::config_from_json(small_config());
  const RunConfig b = io::config_from_json(io::config_to_json(a));
  EXPECT_EQ(io::config_to_json(a), io::config_to_json(b));
  EXPECT_EQ(b.transport.iterations, 12u);
  EXPECT_EQ(b.net_widths, (std::vector<std::size_t>{8, 8}));
}

TEST(Config, SeedOverrideWins) {
  EXPECT_EQ(io::config_from_json(small_config(), 99).seed, 99u);
}

TEST(Train, MalformedOrInvalidConfigExitsTwoWithoutOutputs) {
  const fs::path dir = scratch("bad");
  fs::create_directories(dir);
  io::write_file(dir / "broken.json", "{\"dataset\": ");
  std::ostringstream log;
  EXPECT_EQ(cli::cmd_train(dir / "broken.json", dir / "out1", std::nullopt, std::nullopt, log), cli::kBadConfig);
  EXPECT_FALSE(fs::exists(dir / "out1"));

  json j = small_config();
  j["dataset"]["name"] = "swissroll";
  EXPECT_EQ(cli::cmd_train(write_config(dir, j), dir / "out2", std::nullopt, std::nullopt, log), cli::kBadConfig);
  EXPECT_FALSE(fs::exists(dir / "out2"));

  j = small_config();
  j["transport"]["s"] = -1.0;
  EXPECT_EQ(cli::cmd_train(write_config(dir, j), dir / "out3", std::nullopt, std::nullopt, log), cli::kBadConfig);
  EXPECT_FALSE(fs::exists(dir / "out3"));
}

class TrainedRun : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch("trained"));
    std::ostringstream log;
    code_ = cli::cmd_train(write_config(*dir_, small_config()), *dir_ / "run", std::nullopt, std::nullopt, log);
  }
  static void TearDownTestSuite() { delete dir_; }
  static fs::path run() { return *dir_ / "run"; }
  static inline fs::path* dir_ = nullptr;
  static inline int code_ = -1;
};

TEST_F(TrainedRun, WritesEveryOutput) {
  ASSERT_EQ(code_, cli::kOk);
  for (const char* f : {"config.json", "diagnostics.csv", "checkpoint.json", "final.csv", "run.json"})
    EXPECT_TRUE(fs::exists(run() / f)) << f;
  for (std::size_t k : {0u, 4u, 8u, 12u}) EXPECT_TRUE(fs::exists(run() / "snapshots" / io::snapshot_name(k))) << k;
  EXPECT_EQ(count_lines(run() / "final.csv"), 301u);
  const DiagnosticsTable t = io::parse_diagnostics_csv(io::read_file(run() / "diagnostics.csv"));
  EXPECT_EQ(t.rows.size(), 12u);  // one row per step, iterations 0..11
}

TEST_F(TrainedRun, RepeatIsByteIdentical) {
  ASSERT_EQ(code_, cli::kOk);
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_train(*dir_ / "config.in.json", *dir_ / "again", std::nullopt, std::nullopt, log), cli::kOk);
  for (const char* f : {"diagnostics.csv", "final.csv", "checkpoint.json"})
    EXPECT_EQ(io::read_file(run() / f), io::read_file(*dir_ / "again" / f)) << f;
}

TEST_F(TrainedRun, ResumeFromCheckpointFinishesIdentically) {
  ASSERT_EQ(code_, cli::kOk);
  // Train to 6, then resume to 12 and compare the final ensemble.
  json half = small_config();
  half["transport"]["K"] = 6;
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_train(write_config(*dir_ / "half_cfg", half), *dir_ / "half", std::nullopt, std::nullopt, log),
            cli::kOk);
  ASSERT_EQ(cli::cmd_train(*dir_ / "config.in.json", *dir_ / "resumed", std::nullopt, *dir_ / "half" / "checkpoint.json",
                           log),
            cli::kOk);
  EXPECT_EQ(io::read_file(run() / "final.csv"), io::read_file(*dir_ / "resumed" / "final.csv"));
}

TEST_F(TrainedRun, EvaluateInitialSnapshotMatchesDirectComputation) {
  ASSERT_EQ(code_, cli::kOk);
  std::ostringstream out, log;
  ASSERT_EQ(cli::cmd_evaluate(run(), "mmd2", 0, out, log), cli::kOk);
  const json j = json::parse(io::read_file(run() / "metric_mmd2.json"));

  const RunConfig cfg = io::load_config(run() / "config.json");
  const Tensor particles = io::load_particles(run() / "snapshots" / io::snapshot_name(0)).points;
  EXPECT_EQ(particles.storage(), initial_particles(cfg, 2).storage());
  DatasetSpec spec = cfg.dataset;
  spec.n = particles.rows();
  spec.seed = ept::detail::splitmix64(cfg.dataset.seed ^ 0x6576616CULL);
  const Tensor fresh = sample(spec);
  const double expected = mmd_squared(particles, fresh, RbfKernel(median_heuristic(fresh)));
  EXPECT_DOUBLE_EQ(j.at("value").get<double>(), expected);
}

TEST_F(TrainedRun, EvaluateW2AndMissingSnapshot) {
  ASSERT_EQ(code_, cli::kOk);
  std::ostringstream out, log;
  EXPECT_EQ(cli::cmd_evaluate(run(), "w2", std::nullopt, out, log), cli::kOk);
  EXPECT_GT(json::parse(io::read_file(run() / "metric_w2.json")).at("value").get<double>(), 0.0);
  EXPECT_EQ(cli::cmd_evaluate(run(), "w2", 7, out, log), cli::kFailure);
  EXPECT_EQ(cli::cmd_evaluate(run(), "tv", std::nullopt, out, log), cli::kFailure);
}

TEST_F(TrainedRun, PlotsWriteSvgAndCsv) {
  ASSERT_EQ(code_, cli::kOk);
  std::ostringstream log;
  for (const char* kind : {"scatter", "kde-heatmap", "surface-ratio", "diagnostics"}) {
    ASSERT_EQ(cli::cmd_plot(run(), kind, std::nullopt, log), cli::kOk) << kind;
    EXPECT_TRUE(fs::exists(run() / (std::string("plot_") + kind + ".svg"))) << kind;
  }
  EXPECT_EQ(count_lines(run() / "plot_scatter.csv"), 301u);
  EXPECT_EQ(count_lines(run() / "plot_kde-heatmap.csv"), cli::kGrid * cli::kGrid + 1);
  EXPECT_EQ(count_lines(run() / "plot_surface-ratio.csv"), cli::kGrid * cli::kGrid + 1);
  EXPECT_EQ(count_lines(run() / "plot_diagnostics.csv"), 13u);
  EXPECT_EQ(cli::cmd_plot(run(), "contour", std::nullopt, log), cli::kFailure);
}

TEST_F(TrainedRun, SnapshotCsvRoundTripIsBitExact) {
  ASSERT_EQ(code_, cli::kOk);
  const io::ParticleFile pf = io::load_particles(run() / "final.csv");
  EXPECT_EQ(pf.iteration, 12u);
  EXPECT_EQ(io::particles_csv(pf.iteration, pf.points), io::read_file(run() / "final.csv"));
}

TEST(Plot, ZeroNetSurfaceIsFlat) {
  const fs::path dir = scratch("flat");
  fs::create_directories(dir / "snapshots");
  const RunConfig cfg = io::config_from_json(small_config());
  Stream s(0, "pts");
  const Tensor pts = normal_matrix(50, 2, s);
  io::write_file(dir / "config.json", io::config_to_json(cfg).dump());
  io::write_file(dir / "final.csv", io::particles_csv(3, pts));
  std::ostringstream log;
  EXPECT_EQ(cli::cmd_plot(dir, "surface-ratio", std::nullopt, log), cli::kFailure);

  Checkpoint cp;
  cp.iteration = 3;
  cp.particles = pts;
  const Mlp zero = Mlp::zeros({2, 8, 8, 1});
  cp.net_widths = zero.widths();
  for (const Tensor* t : zero.parameters()) cp.net_params.push_back(*t);
  io::save_checkpoint(dir / "checkpoint.json", cfg, "ept", cp);
  ASSERT_EQ(cli::cmd_plot(dir, "surface-ratio", std::nullopt, log), cli::kOk);
  std::istringstream csv(io::read_file(dir / "plot_surface-ratio.csv"));
  std::string line;
  std::getline(csv, line);
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "0");
    ++rows;
  }
  EXPECT_EQ(rows, cli::kGrid * cli::kGrid);
}

TEST(Compare, RunsEveryMethodOnTheSameTarget) {
  const fs::path dir = scratch("compare");
  json j = small_config();
  j["transport"]["K"] = 4;
  j["compare"] = {"ept-chi2", "mmd-flow", "svgd"};
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_compare(write_config(dir, j), dir / "out", std::nullopt, log), cli::kOk);
  std::istringstream csv(io::read_file(dir / "out" / "compare.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "method,status,initial_mmd2,final_mmd2,target_hash");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(csv, line)) rows.push_back(io::split(line, ','));
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    EXPECT_EQ(r[1], "ok") << r[0];
    EXPECT_EQ(r[2], rows[0][2]) << r[0];
    EXPECT_EQ(r[4], rows[0][4]) << r[0];
    EXPECT_TRUE(fs::exists(dir / "out" / r[0] / "diagnostics.csv")) << r[0];
  }
}

TEST(Compare, SingleMethodIsAConfigError) {
  const fs::path dir = scratch("compare1");
  json j = small_config();
  j["compare"] = {"ept"};
  std::ostringstream log;
  EXPECT_EQ(cli::cmd_compare(write_config(dir, j), dir / "out", std::nullopt, log), cli::kBadConfig);
  j["compare"] = {"ept", "gan"};
  EXPECT_EQ(cli::cmd_compare(write_config(dir, j), dir / "out", std::nullopt, log), cli::kBadConfig);
}

TEST(Divergence, FailureExitsThreeWithPartialOutputs) {
  // A huge learning rate blows up the ratio fit on the first iteration.
  const fs::path dir = scratch("diverge");
  json j = small_config();
  j["objective"]["lr"] = 10.0;
  j["objective"]["T"] = 5;
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_train(write_config(dir, j), dir / "out", std::nullopt, std::nullopt, log), cli::kDiverged)
      << log.str();
  for (const char* f : {"config.json", "diagnostics.csv", "checkpoint.json", "run.json"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "out" / "snapshots" / io::snapshot_name(0)));
  const json summary = json::parse(io::read_file(dir / "out" / "run.json"));
  EXPECT_TRUE(summary.at("failed").get<bool>());
  EXPECT_NE(summary.at("failure").get<std::string>().find("diverged"), std::string::npos);
}

TEST(Presets, EveryPresetIsAValidConfig) {
  const json all = cli::presets();
  for (const char* name : {"gaussians-particles", "moons-latent", "moons-direct"}) {
    ASSERT_TRUE(all.contains(name));
    EXPECT_NO_THROW(io::config_from_json(all[name]).validate()) << name;
  }
  const RunConfig a4 = io::config_from_json(all["moons-latent"]);
  EXPECT_EQ(a4.transport.outer_loops, 50u);
  EXPECT_EQ(a4.transport.inner_loops, 20u);
  std::ostringstream out, log;
  EXPECT_EQ(cli::cmd_presets(std::string("no-such-preset"), out, log), cli::kFailure);
}

TEST(Checkpoint, JsonRoundTripIsBitExact) {
  const RunConfig cfg = io::config_from_json(small_config());
  Checkpoint cp;
  cp.iteration = 5;
  Stream s(1, "x");
  cp.particles = normal_matrix(7, 2, s);
  const Mlp net = init_scalar_net(2, {4, 3}, 8);
  cp.net_widths = net.widths();
  for (const Tensor* t : net.parameters()) cp.net_params.push_back(*t);
  cp.sampler_state = {1, 2, 3, 4};
  const json j = io::checkpoint_to_json(cfg, "ept", cp);
  const io::CheckpointFile back = io::checkpoint_from_json(json::parse(j.dump()));
  EXPECT_EQ(back.method, "ept");
  EXPECT_EQ(back.state.iteration, 5u);
  EXPECT_EQ(back.state.particles.storage(), cp.particles.storage());
  EXPECT_EQ(back.state.net_widths, cp.net_widths);
  EXPECT_EQ(back.state.sampler_state, cp.sampler_state);
  ASSERT_EQ(back.state.net_params.size(), cp.net_params.size());
  for (std::size_t k = 0; k < cp.net_params.size(); ++k)
    EXPECT_EQ(back.state.net_params[k].storage(), cp.net_params[k].storage());
}

TEST(Binary, EndToEndThroughTheExecutable) {
  const fs::path dir = scratch("binary");
  const fs::path cfg = write_config(dir, small_config());
  const std::string exe = EPT_CLI_PATH;
  const std::string quiet = " 2>/dev/null >/dev/null";
  EXPECT_EQ(std::system((exe + " train --config " + cfg.string() + " --out " + (dir / "run").string() + quiet).c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "final.csv"));
  EXPECT_EQ(std::system((exe + " evaluate --run " + (dir / "run").string() + " --metric mmd2" + quiet).c_str()), 0);
  const int bad = std::system((exe + " train --config " + (dir / "missing.json").string() + quiet).c_str());
  EXPECT_EQ(WEXITSTATUS(bad), 2);
  const int usage = std::system((exe + " frobnicate" + quiet).c_str());
  EXPECT_NE(WEXITSTATUS(usage), 0);
}

}  // namespace
