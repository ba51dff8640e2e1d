#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "utrack/config.hpp"

using namespace utrack;
namespace fs = std::filesystem;

TEST_CASE("defaults parse and validate") {
  const RunConfig cfg = parse_run_config("{}", "inline");
  CHECK(cfg.env.n_agents == 1);
  CHECK(cfg.env.dt == 30.0);
  CHECK(cfg.env.detection_range == 450.0);
  CHECK(cfg.env.comm_range == 1500.0);
  CHECK(cfg.env.eps_min == 10.0);
  CHECK(cfg.env.eps_max == 50.0);
  CHECK(cfg.train.gamma == 0.99);
  CHECK(cfg.train.net.d == 64);
  CHECK(cfg.env.heading_model.has_bucket(1.0, 30.0));
}

TEST_CASE("unknown keys are rejected by name") {
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"envv": {}})", "x"),
                       doctest::Contains("envv"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"env": {"n_agentz": 2}})", "x"),
                       doctest::Contains("env.n_agentz"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"train": {"lrr": 0.1}})", "x"),
                       doctest::Contains("train.lrr"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"env": {"pf": {"particles": 1}}})", "x"),
                       doctest::Contains("env.pf.particles"), ConfigError);
}

TEST_CASE("values and invariants are checked") {
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"env": {"n_agents": "two"}})", "x"),
                       doctest::Contains("env.n_agents"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"env": {"eps_min": 60}})", "x"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"gamma": 1.0}})", "x"), ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"train": {"n_envs": 6, "minibatches": 4}})", "x"),
      ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"env": {"reward_mode": "chase"}})", "x"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config("{ not json", "x"), ConfigError);
}

TEST_CASE("reward mode and nested values parse") {
  const RunConfig cfg = parse_run_config(
      R"({"env": {"reward_mode": "follow", "n_agents": 3, "n_targets": 2,
                  "pf": {"n_particles": 64}},
          "train": {"net": {"d": 32, "heads": 4, "blocks": 1}},
          "seed": 9})",
      "inline");
  CHECK(cfg.env.reward_mode == RewardMode::kFollow);
  CHECK(cfg.env.n_agents == 3);
  CHECK(cfg.env.pf.n_particles == 64);
  CHECK(cfg.train.net.d == 32);
  CHECK(cfg.seed == 9);
}

TEST_CASE("explicit heading model buckets are honored") {
  const RunConfig cfg = parse_run_config(
      R"({"env": {"heading_model": {"noise_std": 0.01,
                  "buckets": [{"speed": 1.0, "dt": 30.0, "a": 4.5, "b": 0.001}]}}})",
      "inline");
  CHECK(cfg.env.heading_model.noise_std() == doctest::Approx(0.01));
  CHECK(cfg.env.heading_model.bucket(1.0, 30.0).a == doctest::Approx(4.5));
  // only the declared bucket exists
  CHECK_FALSE(cfg.env.heading_model.has_bucket(0.5, 30.0));
}

TEST_CASE("calibration CSV feeds the model; both sources at once conflict") {
  const fs::path dir = fs::temp_directory_path() / "utrack_cfg_test";
  fs::create_directories(dir);
  const std::string csv = (dir / "cal.csv").string();
  {
    std::ofstream out(csv);
    out << "gamma,speed,dt,dpsi\n";
    for (int i = 0; i < 21; ++i) {
      const double g = -0.24 + 0.024 * i;
      out << g << ",1.0,30.0," << 4.5 * g << "\n";
    }
  }
  const RunConfig cfg = parse_run_config(
      R"({"env": {"calibration_csv": ")" + csv + R"("}})", "inline");
  CHECK(cfg.env.heading_model.bucket(1.0, 30.0).a == doctest::Approx(4.5));

  CHECK_THROWS_AS(parse_run_config(R"({"env": {
      "calibration_csv": ")" + csv + R"(",
      "heading_model": {"buckets": [{"speed": 1, "dt": 30, "a": 1, "b": 0}]}}})",
                                   "inline"),
                  ConfigError);
}

TEST_CASE("overrides navigate dotted paths and re-validate") {
  RunConfig cfg = parse_run_config("{}", "inline");
  apply_override(cfg, "env.n_agents=3");
  CHECK(cfg.env.n_agents == 3);
  apply_override(cfg, "train.lr=0.001");
  CHECK(cfg.train.lr == doctest::Approx(0.001));
  apply_override(cfg, "env.reward_mode=follow");
  CHECK(cfg.env.reward_mode == RewardMode::kFollow);
  apply_override(cfg, "seed=42");
  CHECK(cfg.seed == 42);

  CHECK_THROWS_AS(apply_override(cfg, "env.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "garbage"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "train.gamma=2.0"), ConfigError);
}

TEST_CASE("snapshot round-trips the config") {
  RunConfig cfg = parse_run_config("{}", "inline");
  apply_override(cfg, "env.n_targets=4");
  apply_override(cfg, "train.net.d=32");
  cfg.seed = 1234;

  const fs::path dir = fs::temp_directory_path() / "utrack_cfg_snap";
  fs::create_directories(dir);
  const std::string path = (dir / "config.json").string();
  save_config_snapshot(cfg, path);

  const RunConfig back = load_run_config(path);
  CHECK(back.env.n_targets == 4);
  CHECK(back.train.net.d == 32);
  CHECK(back.seed == 1234);
  CHECK(back.env.heading_model.buckets().size() ==
        cfg.env.heading_model.buckets().size());
  // serialized model coefficients survive exactly
  CHECK(back.env.heading_model.bucket(1.0, 30.0).a ==
        cfg.env.heading_model.bucket(1.0, 30.0).a);
}

TEST_CASE("missing config file names the path") {
  CHECK_THROWS_WITH_AS(load_run_config("/nonexistent/utrack.json"),
                       doctest::Contains("/nonexistent/utrack.json"), ConfigError);
}
