#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "utrack/env.hpp"

using namespace utrack;

namespace {

EnvConfig quiet_config() {
  EnvConfig cfg;
  cfg.n_agents = 1;
  cfg.n_targets = 1;
  cfg.horizon = 64;
  cfg.comm_drop_prob = 0.0;
  cfg.range_noise_std = 0.0;
  cfg.target_speed_frac = 0.0;
  cfg.heading_model = default_heading_model();
  cfg.heading_model.set_noise_std(0.0);
  cfg.pf.n_particles = 64;
  return cfg;
}

std::vector<int> hold(const Environment& env) {
  std::vector<int> actions;
  for (const VehicleState& a : env.world().agents) actions.push_back(a.rudder_index);
  return actions;
}

}  // namespace

TEST_CASE("rudder angles are the five equidistant values") {
  CHECK(rudder_angle(0) == doctest::Approx(-0.24));
  CHECK(rudder_angle(1) == doctest::Approx(-0.12));
  CHECK(rudder_angle(2) == doctest::Approx(0.0));
  CHECK(rudder_angle(3) == doctest::Approx(0.12));
  CHECK(rudder_angle(4) == doctest::Approx(0.24));
  CHECK_THROWS_AS(rudder_angle(5), ContractViolation);
  CHECK_THROWS_AS(rudder_angle(-1), ContractViolation);
}

TEST_CASE("valid actions allow only neighbouring rudder notches") {
  CHECK(valid_actions(2) == std::array<bool, 5>{false, true, true, true, false});
  CHECK(valid_actions(0) == std::array<bool, 5>{true, true, false, false, false});
  CHECK(valid_actions(4) == std::array<bool, 5>{false, false, false, true, true});
  CHECK_THROWS_AS(valid_actions(7), ContractViolation);
}

TEST_CASE("tracking reward follows the exponential decay") {
  EnvConfig cfg = quiet_config();
  CHECK(tracking_reward_single(5.0, cfg) == 1.0);
  CHECK(tracking_reward_single(10.0, cfg) == doctest::Approx(1.0));
  CHECK(tracking_reward_single(30.0, cfg) == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
  CHECK(tracking_reward_single(60.0, cfg) == 0.0);
  CHECK(tracking_reward_single(50.0 - 1e-6, cfg) < 1e-3);
  CHECK(tracking_reward_single(50.0, cfg) >= 0.0);

  // monotone non-increasing over the whole range
  double prev = 2.0;
  for (double e = 0.0; e <= 70.0; e += 0.05) {
    const double r = tracking_reward_single(e, cfg);
    CHECK(r <= prev + 1e-15);
    prev = r;
  }

  const std::vector<double> errors = {5.0, 30.0};
  CHECK(tracking_reward(errors, cfg) ==
        doctest::Approx(0.5 * (1.0 + std::exp(-2.0))));
}

TEST_CASE("follow reward counts followed targets, boundary inclusive") {
  EnvConfig cfg = quiet_config();
  cfg.d_min = 50.0;
  const std::vector<double> d1 = {30.0, 70.0};
  CHECK(follow_reward(d1, cfg) == doctest::Approx(0.5));
  const std::vector<double> d2 = {50.0};
  CHECK(follow_reward(d2, cfg) == doctest::Approx(1.0));
  const std::vector<double> d3 = {10.0, 20.0, 49.0};
  CHECK(follow_reward(d3, cfg) == doctest::Approx(1.0));
  // permutation invariant
  const std::vector<double> d4 = {70.0, 30.0};
  CHECK(follow_reward(d4, cfg) == follow_reward(d1, cfg));
}

TEST_CASE("crash check uses strict 3D distance") {
  std::vector<VehicleState> agents(1);
  CHECK_FALSE(crash_check(agents, 10.0));

  agents.resize(2);
  agents[0].position = {0.0, 0.0, 0.0};
  agents[1].position = {10.0, 0.0, 0.0};
  CHECK_FALSE(crash_check(agents, 10.0));  // exactly d_safe is not a crash
  agents[1].position = {5.0, 0.0, 0.0};
  CHECK(crash_check(agents, 10.0));
  agents[1].position = {6.0, 0.0, 8.1};  // 3D distance > 10
  CHECK_FALSE(crash_check(agents, 10.0));
}

TEST_CASE("spawn satisfies the separation band") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.n_targets = 2;
  Environment env(cfg, 42);
  const WorldState& w = env.world();

  std::vector<Eigen::Vector2d> pts;
  for (const VehicleState& v : w.agents) pts.push_back(v.position.head<2>());
  for (const VehicleState& v : w.targets) pts.push_back(v.position.head<2>());
  REQUIRE(pts.size() == 4);
  int pairs = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double d = (pts[i] - pts[j]).norm();
      CHECK(d >= 50.0);
      CHECK(d <= 200.0 + 1e-9);
      ++pairs;
    }
  CHECK(pairs == 6);

  for (const VehicleState& v : w.agents) CHECK(v.position.z() == 0.0);
  for (const VehicleState& v : w.targets) {
    CHECK(v.position.z() >= cfg.target_depth_min);
    CHECK(v.position.z() <= cfg.target_depth_max);
  }
}

TEST_CASE("same seed spawns identical worlds") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.n_targets = 1;
  Environment a(cfg, 7), b(cfg, 7);
  for (int i = 0; i < 2; ++i) {
    CHECK(a.world().agents[i].position == b.world().agents[i].position);
    CHECK(a.world().agents[i].heading == b.world().agents[i].heading);
  }
  CHECK(a.world().targets[0].position == b.world().targets[0].position);
  Environment c(cfg, 8);
  CHECK(a.world().agents[0].position != c.world().agents[0].position);
}

TEST_CASE("infeasible spawn reports a config error") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 5;
  cfg.n_targets = 5;
  cfg.spawn_min_sep = 95.0;
  cfg.spawn_max_sep = 100.0;  // 10 entities cannot pack at >=95 m inside 100 m
  CHECK_THROWS_WITH_AS(Environment(cfg, 1), doctest::Contains("spawn infeasible"),
                       ConfigError);
}

TEST_CASE("straight step displaces by speed*dt exactly") {
  EnvConfig cfg = quiet_config();
  Environment env(cfg, 3);
  const Eigen::Vector3d before = env.world().agents[0].position;
  const int action = 2;  // rudder centered: dpsi = b ~ 0
  env.step(std::vector<int>{action});
  const Eigen::Vector3d after = env.world().agents[0].position;
  CHECK((after - before).head<2>().norm() == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(after.z() == 0.0);
}

TEST_CASE("episode terminates exactly at the horizon") {
  EnvConfig cfg = quiet_config();
  cfg.horizon = 5;
  Environment env(cfg, 4);
  for (int t = 1; t <= 5; ++t) {
    const StepOutput& out = env.step(hold(env));
    CHECK(out.done == (t == 5));
  }
  CHECK(env.world().step == 5);
}

TEST_CASE("invalid actions are contract violations") {
  EnvConfig cfg = quiet_config();
  Environment env(cfg, 5);
  CHECK_THROWS_AS(env.step(std::vector<int>{0}), ContractViolation);  // 2 -> 0 jumps
  CHECK_THROWS_AS(env.step(std::vector<int>{5}), ContractViolation);
  env.step(std::vector<int>{1});  // neighbouring notch is legal
  CHECK(env.world().agents[0].rudder_index == 1);
  env.step(std::vector<int>{0});
  CHECK(env.world().agents[0].rudder_index == 0);
}

TEST_CASE("any two agents below d_safe force reward -1") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.d_safe = 300.0;  // spawn separation <= 200 guarantees a crash
  Environment env(cfg, 6);
  const StepOutput& out = env.step(hold(env));
  CHECK(out.collision);
  CHECK(out.reward == -1.0);
}

TEST_CASE("detection threshold is 450 m on the true 3D distance") {
  EnvConfig cfg = quiet_config();
  Environment env(cfg, 8);
  WorldState& w = env.mutable_world();
  w.agents[0].position = {0.0, 0.0, 0.0};
  w.agents[0].heading = std::numbers::pi / 2.0;  // moves +y by 30
  w.targets[0].position = {450.5, 30.0, 0.0};
  w.targets[0].speed = 0.0;

  env.step(hold(env));
  CHECK(env.world().target_miss_streak[0] == 1);  // 450.5 m: no detection

  w.agents[0].position = {0.0, 0.0, 0.0};
  w.agents[0].heading = std::numbers::pi / 2.0;
  w.targets[0].position = {449.5, 60.0, 0.0};
  env.step(hold(env));
  CHECK(env.world().target_miss_streak[0] == 0);  // 449.5 m: detected
}

TEST_CASE("drop probability one silences every measurement") {
  EnvConfig cfg = quiet_config();
  cfg.comm_drop_prob = 1.0;
  Environment env(cfg, 9);
  for (int t = 0; t < 5; ++t) env.step(hold(env));
  CHECK(env.world().target_miss_streak[0] == 5);
  CHECK_FALSE(env.world().knowledge[0].targets[0].ever_measured);
}

TEST_CASE("comms update knowledge within range and age it beyond") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.spawn_max_sep = 400.0;
  Environment env(cfg, 10);

  SUBCASE("within range: age resets to zero each step") {
    for (int t = 0; t < 3; ++t) env.step(hold(env));
    CHECK(env.world().knowledge[0].agents[1].valid);
    CHECK(env.world().knowledge[0].agents[1].age == 0);
    CHECK(env.world().knowledge[1].agents[0].age == 0);
  }

  SUBCASE("beyond 1500 m nothing is heard and entries age") {
    WorldState& w = env.mutable_world();
    auto park = [&w](double separation) {
      w.agents[0].position = {0.0, 0.0, 0.0};
      w.agents[0].heading = std::numbers::pi / 2.0;
      w.agents[1].position = {separation, 0.0, 0.0};
      w.agents[1].heading = std::numbers::pi / 2.0;
    };
    park(1501.0);
    env.step(hold(env));
    CHECK_FALSE(env.world().knowledge[0].agents[1].valid);
    CHECK(env.world().knowledge[0].agents[1].age == 1);
    park(1501.0);
    env.step(hold(env));
    CHECK(env.world().knowledge[0].agents[1].age == 2);

    park(1499.0);
    env.step(hold(env));
    CHECK(env.world().knowledge[0].agents[1].valid);
    CHECK(env.world().knowledge[0].agents[1].age == 0);
  }
}

TEST_CASE("comms fuse the sender's fresh ranges into the receiver's filter") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  Environment env(cfg, 11);
  WorldState& w = env.mutable_world();
  // agent 0 hears the target, agent 1 is far from it but in comm range of 0
  w.agents[0].position = {0.0, 0.0, 0.0};
  w.agents[0].heading = 0.0;
  w.agents[1].position = {0.0, 1000.0, 0.0};
  w.agents[1].heading = 0.0;
  w.targets[0].position = {100.0, 0.0, 20.0};
  w.targets[0].speed = 0.0;

  env.step(hold(env));
  CHECK(env.world().knowledge[0].targets[0].ever_measured);
  CHECK(env.world().knowledge[1].targets[0].ever_measured);  // via fusion
  CHECK(env.world().knowledge[1].targets[0].estimate.age == 0);
}

TEST_CASE("single agent comms phase is a no-op") {
  EnvConfig cfg = quiet_config();
  Environment env(cfg, 12);
  env.step(hold(env));
  CHECK(env.world().knowledge.size() == 1);
}

TEST_CASE("targets hold their commanded heading until the countdown expires") {
  EnvConfig cfg = quiet_config();
  cfg.target_speed_frac = 0.5;
  Environment env(cfg, 13);
  WorldState& w = env.mutable_world();
  w.target_motion[0].countdown = 3;
  w.target_motion[0].commanded_heading = w.targets[0].heading;
  const double h0 = w.targets[0].heading;
  const double cmd0 = w.target_motion[0].commanded_heading;

  for (int t = 0; t < 3; ++t) {
    env.step(hold(env));
    CHECK(env.world().targets[0].heading == doctest::Approx(h0));
    CHECK(env.world().target_motion[0].commanded_heading == cmd0);
  }
  env.step(hold(env));
  CHECK(env.world().target_motion[0].commanded_heading != cmd0);
}

TEST_CASE("huge turn interval keeps the target on a straight line") {
  EnvConfig cfg = quiet_config();
  cfg.target_speed_frac = 0.5;
  cfg.target_turn_interval = 1e9;
  Environment env(cfg, 14);
  const double h0 = env.world().targets[0].heading;
  const Eigen::Vector3d p0 = env.world().targets[0].position;
  for (int t = 0; t < 20; ++t) env.step(hold(env));
  CHECK(env.world().targets[0].heading == doctest::Approx(h0));
  const Eigen::Vector3d moved = env.world().targets[0].position - p0;
  CHECK(moved.head<2>().norm() == doctest::Approx(20 * 0.5 * 30.0).epsilon(1e-9));
}

TEST_CASE("mean interval between target direction changes matches the config") {
  EnvConfig cfg = quiet_config();
  cfg.target_speed_frac = 0.1;
  cfg.target_turn_interval = 20.0;
  cfg.horizon = 1000000000;
  cfg.pf.n_particles = 1;
  cfg.detection_range = 0.1;  // keep the filter idle, this test is about motion
  Environment env(cfg, 15);

  const int steps = 100000;
  int changes = 0;
  double last_cmd = env.world().target_motion[0].commanded_heading;
  for (int t = 0; t < steps; ++t) {
    env.step(hold(env));
    const double cmd = env.world().target_motion[0].commanded_heading;
    if (cmd != last_cmd) {
      ++changes;
      last_cmd = cmd;
    }
  }
  const double mean_interval = static_cast<double>(steps) / changes;
  CHECK(mean_interval == doctest::Approx(20.0).epsilon(0.02));
}

TEST_CASE("observation tokens: self row, unknown rows, shapes") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.n_targets = 2;
  cfg.comm_drop_prob = 1.0;  // nobody hears anything
  Environment env(cfg, 16);
  env.step(hold(env));

  const EntityTokenMatrix& obs = env.observation(0);
  CHECK(obs.rows() == 4);
  CHECK(obs.cols() == kFeatureDim);

  // self row: relative zeros, flags set
  CHECK(obs(0, kColDx) == 0.0);
  CHECK(obs(0, kColDy) == 0.0);
  CHECK(obs(0, kColDz) == 0.0);
  CHECK(obs(0, kColSelf) == 1.0);
  CHECK(obs(0, kColValid) == 1.0);
  const VehicleState& self = env.world().agents[0];
  CHECK(obs(0, kColSinH) == doctest::Approx(std::sin(self.heading)));
  CHECK(obs(0, kColCosH) == doctest::Approx(std::cos(self.heading)));

  // never-contacted agent: type flag only
  CHECK(obs(1, kColAgent) == 1.0);
  CHECK(obs(1, kColValid) == 0.0);
  CHECK(obs(1, kColDx) == 0.0);
  CHECK(obs(1, kColSinH) == 0.0);

  // never-measured targets: type flag only
  CHECK(obs(2, kColTarget) == 1.0);
  CHECK(obs(2, kColValid) == 0.0);
  CHECK(obs(3, kColSpread) == 0.0);
}

TEST_CASE("observation target rows carry the track once measured") {
  EnvConfig cfg = quiet_config();
  Environment env(cfg, 17);
  WorldState& w = env.mutable_world();
  w.agents[0].position = {0.0, 0.0, 0.0};
  w.targets[0].position = {120.0, 0.0, 25.0};
  w.targets[0].speed = 0.0;
  env.step(hold(env));

  const EntityTokenMatrix& obs = env.observation(0);
  CHECK(obs(1, kColValid) == 1.0);
  CHECK(obs(1, kColAge) == 0.0);
  CHECK(obs(1, kColSpread) > 0.0);
  const TrackEstimate& est = env.world().knowledge[0].targets[0].estimate;
  const VehicleState& self = env.world().agents[0];
  CHECK(obs(1, kColDx) ==
        doctest::Approx((est.position_xy.x() - self.position.x()) / kPosScale));
  CHECK(obs(1, kColDz) ==
        doctest::Approx((25.0 - 0.0) / kPosScale));
}

TEST_CASE("global state has true rows for every entity") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.n_targets = 1;
  Environment env(cfg, 18);
  env.step(hold(env));
  const EntityTokenMatrix& g = env.global_state();
  CHECK(g.rows() == 3);
  for (int i = 0; i < 2; ++i) {
    const VehicleState& v = env.world().agents[static_cast<std::size_t>(i)];
    CHECK(g(i, kColDx) == doctest::Approx(v.position.x() / kPosScale));
    CHECK(g(i, kColSinH) == doctest::Approx(std::sin(v.heading)));
    CHECK(g(i, kColAgent) == 1.0);
    CHECK(g(i, kColSpeed) == doctest::Approx(v.speed / kSpeedScale));
  }
  const VehicleState& t = env.world().targets[0];
  CHECK(g(2, kColTarget) == 1.0);
  CHECK(g(2, kColDz) == doctest::Approx(t.position.z() / kPosScale));

  // swapping two agents in the world swaps exactly their rows
  Environment plain(cfg, 44), swapped(cfg, 44);
  std::swap(swapped.mutable_world().agents[0], swapped.mutable_world().agents[1]);
  plain.step(hold(plain));
  swapped.step(hold(swapped));
  CHECK(plain.global_state().row(0) == swapped.global_state().row(1));
  CHECK(plain.global_state().row(1) == swapped.global_state().row(0));
  CHECK(plain.global_state().row(2) == swapped.global_state().row(2));
}

TEST_CASE("target is lost after 20 consecutive undetected steps") {
  EnvConfig cfg = quiet_config();
  cfg.comm_drop_prob = 1.0;  // never detected
  cfg.horizon = 1000;
  Environment env(cfg, 19);
  for (int t = 1; t <= 19; ++t) {
    const StepOutput& out = env.step(hold(env));
    CHECK(out.target_lost[0] == 0);
  }
  const StepOutput& out20 = env.step(hold(env));
  CHECK(out20.target_lost[0] == 1);
}

TEST_CASE("a detection resets the loss streak") {
  EnvConfig cfg = quiet_config();
  cfg.horizon = 1000;
  Environment env(cfg, 20);
  WorldState& w = env.mutable_world();
  w.agents[0].position = {0.0, 0.0, 0.0};
  w.targets[0].position = {5000.0, 0.0, 20.0};
  w.targets[0].speed = 0.0;
  for (int t = 1; t <= 19; ++t) env.step(hold(env));
  CHECK(env.world().target_miss_streak[0] == 19);
  // bring the target into range for one step
  env.mutable_world().targets[0].position =
      env.world().agents[0].position + Eigen::Vector3d(100.0, 0.0, 20.0);
  const StepOutput& out = env.step(hold(env));
  CHECK(out.target_lost[0] == 0);
  CHECK(env.world().target_miss_streak[0] == 0);
}

TEST_CASE("non-crash rewards stay inside [0, 1]") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.n_targets = 2;
  cfg.range_noise_std = 3.0;
  cfg.comm_drop_prob = 0.1;
  cfg.heading_model.set_noise_std(0.02);
  cfg.target_speed_frac = 0.5;
  cfg.horizon = 200;
  Environment env(cfg, 21);
  RngStream rng(55, 0);
  for (int t = 0; t < 200; ++t) {
    std::vector<int> actions;
    for (int a = 0; a < 2; ++a) {
      const auto mask = env.action_mask(a);
      int legal[5];
      int n = 0;
      for (int k = 0; k < 5; ++k)
        if (mask[static_cast<std::size_t>(k)]) legal[n++] = k;
      actions.push_back(legal[rng.uniform_int(static_cast<std::uint32_t>(n))]);
    }
    const StepOutput& out = env.step(actions);
    if (out.collision) {
      CHECK(out.reward == -1.0);
    } else {
      CHECK(out.reward >= 0.0);
      CHECK(out.reward <= 1.0);
    }
  }
}

TEST_CASE("identical seeds and actions give bit-identical stepping") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 2;
  cfg.n_targets = 2;
  cfg.range_noise_std = 3.0;
  cfg.comm_drop_prob = 0.2;
  cfg.heading_model.set_noise_std(0.02);
  cfg.target_speed_frac = 0.4;
  Environment a(cfg, 99), b(cfg, 99);
  RngStream rng(1, 0);
  for (int t = 0; t < 50; ++t) {
    std::vector<int> actions;
    for (int ag = 0; ag < 2; ++ag) {
      const auto mask = a.action_mask(ag);
      int legal[5];
      int n = 0;
      for (int k = 0; k < 5; ++k)
        if (mask[static_cast<std::size_t>(k)]) legal[n++] = k;
      actions.push_back(legal[rng.uniform_int(static_cast<std::uint32_t>(n))]);
    }
    const StepOutput& oa = a.step(actions);
    const StepOutput& ob = b.step(actions);
    CHECK(oa.reward == ob.reward);
    for (int ag = 0; ag < 2; ++ag) {
      CHECK(a.world().agents[ag].position == b.world().agents[ag].position);
      CHECK(a.world().agents[ag].heading == b.world().agents[ag].heading);
    }
    const ParticleSet& pa = a.world().knowledge[0].targets[1].particles;
    const ParticleSet& pb = b.world().knowledge[0].targets[1].particles;
    CHECK((pa.px == pb.px).all());
    CHECK((pa.w == pb.w).all());
  }
}

TEST_CASE("with full comms and proximity every age stays zero") {
  EnvConfig cfg = quiet_config();
  cfg.n_agents = 3;
  cfg.n_targets = 1;
  cfg.comm_drop_prob = 0.0;
  Environment env(cfg, 23);
  for (int t = 0; t < 10; ++t) {
    env.step(hold(env));
    for (int r = 0; r < 3; ++r)
      for (int s = 0; s < 3; ++s) {
        if (r == s) continue;
        CHECK(env.world().knowledge[r].agents[s].age == 0);
      }
  }
}

TEST_CASE("config validation names the offending field") {
  EnvConfig cfg = quiet_config();
  cfg.eps_min = 60.0;
  CHECK_THROWS_WITH_AS(cfg.finalize(), doctest::Contains("eps_min"), ConfigError);

  EnvConfig cfg2 = quiet_config();
  cfg2.agent_speed = 3.7;  // no bucket for this speed
  CHECK_THROWS_AS(cfg2.finalize(), ConfigError);

  EnvConfig cfg3 = quiet_config();
  cfg3.comm_drop_prob = 1.5;
  CHECK_THROWS_WITH_AS(cfg3.finalize(), doctest::Contains("comm_drop_prob"),
                       ConfigError);
}
