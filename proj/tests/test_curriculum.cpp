#include <doctest.h>

#include <filesystem>

#include "utrack/checkpoint.hpp"
#include "utrack/curriculum.hpp"

using namespace utrack;
using namespace utrack::curriculum;

namespace fs = std::filesystem;

namespace {

EnvConfig base_env() {
  EnvConfig cfg;
  cfg.pf.n_particles = 32;
  return cfg;
}

TrainConfig base_train() {
  TrainConfig cfg;
  cfg.net.d = 16;
  cfg.net.heads = 2;
  cfg.net.blocks = 1;
  cfg.rollout_steps = 8;
  cfg.n_envs = 4;
  cfg.minibatches = 2;
  cfg.epochs = 1;
  cfg.workers = 2;
  return cfg;
}

StagePlan mini_plan(long long steps_per_stage) {
  StagePlan plan;
  plan.name = "mini";
  StageSpec s1;
  s1.name = "s1";
  s1.horizon = 8;
  s1.total_timesteps = steps_per_stage;
  plan.stages.push_back(s1);
  StageSpec s2 = s1;
  s2.name = "s2_follow";
  s2.init_from = "s1";
  s2.reset_critic = true;
  s2.n_agents = 2;
  s2.n_targets = 2;
  s2.reward_mode = RewardMode::kFollow;
  plan.stages.push_back(s2);
  return plan;
}

}  // namespace

TEST_CASE("paper plan mirrors the published schedule") {
  const StagePlan plan = default_plan("paper");
  plan.validate();

  REQUIRE(plan.stages.size() == 10);
  const StageSpec& pre = plan.stages[0];
  CHECK(pre.horizon == 128);
  CHECK(pre.target_speed_frac == doctest::Approx(0.6));
  CHECK(pre.reward_mode == RewardMode::kTracking);
  CHECK(pre.total_timesteps == 10'000'000'000LL);
  CHECK(pre.init_from.empty());

  CHECK(plan.stages[1].horizon == 256);
  CHECK(plan.stages[2].horizon == 512);
  CHECK(plan.stages[3].horizon == 1024);

  // branch A ends at 5 agents / 5 targets with the follow reward
  const StageSpec& a_last = plan.stages[7];
  CHECK(a_last.n_agents == 5);
  CHECK(a_last.n_targets == 5);
  CHECK(a_last.reward_mode == RewardMode::kFollow);

  // both branches fork from the horizon-invariant base model
  CHECK(plan.stages[4].init_from == "horizon_1024");
  CHECK(plan.stages[8].init_from == "horizon_1024");
  CHECK(plan.stages[4].reset_critic);
  CHECK(plan.stages[8].reset_critic);

  // branch B: very fast target, up to 3 agents
  const StageSpec& b_last = plan.stages.back();
  CHECK(b_last.n_agents == 3);
  CHECK(b_last.n_targets == 1);
  CHECK(b_last.target_speed_frac == doctest::Approx(0.8));

  // follow stages sample moderate speeds
  CHECK(plan.stages[4].target_speed_frac == doctest::Approx(0.3));
  CHECK(plan.stages[4].target_speed_frac_max == doctest::Approx(0.5));
}

TEST_CASE("desk plan keeps the structure at reduced budgets") {
  const StagePlan paper = default_plan("paper");
  const StagePlan desk = default_plan("desk");
  REQUIRE(desk.stages.size() == paper.stages.size());
  for (std::size_t i = 0; i < desk.stages.size(); ++i) {
    CHECK(desk.stages[i].name == paper.stages[i].name);
    CHECK(desk.stages[i].n_agents == paper.stages[i].n_agents);
    CHECK(desk.stages[i].reward_mode == paper.stages[i].reward_mode);
    CHECK(desk.stages[i].total_timesteps < paper.stages[i].total_timesteps);
  }
  CHECK_THROWS_AS(default_plan("gibberish"), ConfigError);
}

TEST_CASE("plans serialize losslessly") {
  const StagePlan plan = default_plan("desk");
  const StagePlan back = plan_from_json(plan_to_json(plan), "roundtrip");
  REQUIRE(back.stages.size() == plan.stages.size());
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    CHECK(back.stages[i].name == plan.stages[i].name);
    CHECK(back.stages[i].init_from == plan.stages[i].init_from);
    CHECK(back.stages[i].reset_critic == plan.stages[i].reset_critic);
    CHECK(back.stages[i].n_agents == plan.stages[i].n_agents);
    CHECK(back.stages[i].n_targets == plan.stages[i].n_targets);
    CHECK(back.stages[i].horizon == plan.stages[i].horizon);
    CHECK(back.stages[i].target_speed_frac ==
          doctest::Approx(plan.stages[i].target_speed_frac));
    CHECK(back.stages[i].reward_mode == plan.stages[i].reward_mode);
    CHECK(back.stages[i].total_timesteps == plan.stages[i].total_timesteps);
  }
}

TEST_CASE("plan validation catches structure errors") {
  StagePlan plan = mini_plan(32);
  plan.stages[1].init_from = "nope";
  CHECK_THROWS_AS(plan.validate(), ConfigError);

  plan = mini_plan(32);
  plan.stages[1].name = "s1";
  CHECK_THROWS_AS(plan.validate(), ConfigError);

  plan = mini_plan(32);
  plan.stages[0].init_from = "s2_follow";
  CHECK_THROWS_AS(plan.validate(), ConfigError);
}

TEST_CASE("stage warm start: actor carried over, critic reset on request") {
  // lr = 0 freezes parameters, making init behavior observable in the
  // stage's final checkpoint.
  TrainConfig train = base_train();
  train.lr = 0.0;
  const StagePlan plan = mini_plan(32);
  const std::string root = (fs::temp_directory_path() / "utrack_curr_warm").string();
  fs::remove_all(root);

  const auto ckpts = run_curriculum(plan, base_env(), train, root, 404);
  REQUIRE(ckpts.size() == 2);

  const LoadedCheckpoint s1 = load_checkpoint(ckpts.at("s1"));
  const LoadedCheckpoint s2 = load_checkpoint(ckpts.at("s2_follow"));

  // actor parameters flowed from s1 into s2 unchanged
  auto a1 = s1.actor.tensor_refs();
  auto a2 = s2.actor.tensor_refs();
  for (std::size_t i = 0; i < a1.size(); ++i) CHECK((*a1[i].second == *a2[i].second));

  // critic was re-initialized from the stage seed instead of carried
  TransformerParams fresh =
      init_params(train.net, 1, false, stage_seed(404, "s2_follow"));
  // round-trip through checkpoint precision for a fair comparison
  TransformerParams fresh_actor = init_params(train.net, 5, true, 1);
  CheckpointMeta meta;
  meta.net = train.net;
  const std::string tmp = (fs::temp_directory_path() / "utrack_curr_tmp").string();
  fs::remove_all(tmp);
  save_checkpoint(tmp, fresh_actor, fresh, meta);
  auto c2 = s2.critic.tensor_refs();
  auto cf = fresh.tensor_refs();
  bool all_equal = true;
  for (std::size_t i = 0; i < c2.size(); ++i)
    all_equal = all_equal && (*c2[i].second == *cf[i].second);
  CHECK(all_equal);

  // and it differs from s1's critic
  auto c1 = s1.critic.tensor_refs();
  bool differs = false;
  for (std::size_t i = 0; i < c1.size(); ++i)
    differs = differs || !(*c1[i].second == *c2[i].second);
  CHECK(differs);
}

TEST_CASE("curriculum runs end to end, reproducibly, with tagged metrics") {
  const StagePlan plan = mini_plan(32);
  const std::string root_a = (fs::temp_directory_path() / "utrack_curr_a").string();
  const std::string root_b = (fs::temp_directory_path() / "utrack_curr_b").string();
  fs::remove_all(root_a);
  fs::remove_all(root_b);

  int s1_lines = 0, s2_lines = 0;
  const auto sink = [&](const std::string& line) {
    if (line.find("\"stage\":\"s1\"") != std::string::npos) ++s1_lines;
    if (line.find("\"stage\":\"s2_follow\"") != std::string::npos) ++s2_lines;
  };
  const auto ck_a = run_curriculum(plan, base_env(), base_train(), root_a, 11, sink);
  const auto ck_b = run_curriculum(plan, base_env(), base_train(), root_b, 11);

  CHECK(s1_lines == 1);
  CHECK(s2_lines == 1);
  REQUIRE(ck_a.size() == 2);
  CHECK(fs::exists(fs::path(root_a) / "plan.json"));
  for (const auto& [stage, dir] : ck_a)
    CHECK(checkpoint_hash(dir) == checkpoint_hash(ck_b.at(stage)));

  // branch isolation: separate directories per stage
  CHECK(ck_a.at("s1") != ck_a.at("s2_follow"));
}

TEST_CASE("dimension-incompatible warm start is a load error") {
  TrainConfig train = base_train();
  const StagePlan plan = mini_plan(32);
  const std::string root = (fs::temp_directory_path() / "utrack_curr_dim").string();
  fs::remove_all(root);
  const auto ckpts = run_curriculum(plan, base_env(), train, root, 3);

  TrainConfig other = train;
  other.net.d = 32;
  StageSpec s2 = plan.stages[1];
  CHECK_THROWS_AS(
      run_stage(s2, base_env(), other, ckpts.at("s1"), root + "/bad", 3),
      DataError);
}

TEST_CASE("greedy evaluation: sane metrics on an easy scenario") {
  EnvConfig env = base_env();
  env.n_agents = 1;
  env.n_targets = 1;
  env.horizon = 32;
  env.target_speed_frac = 0.0;  // static target, detection almost certain
  env.comm_drop_prob = 0.0;
  env.pf.n_particles = 256;

  TrainConfig train = base_train();
  const TransformerParams actor = init_params(train.net, 5, true, 77);

  const EvalMetrics one = evaluate(actor, env, 1, 5);
  CHECK(one.episodes == 1);
  CHECK(one.dist_std == 0.0);  // single episode: no spread across episodes
  CHECK(one.err_std == 0.0);
  CHECK(one.collision_pct == 0.0);  // single agent cannot crash

  const EvalMetrics m = evaluate(actor, env, 8, 5);
  CHECK(m.episodes == 8);
  CHECK(m.err_mean < 100.0);  // the filter tracks a static target from spawn
  CHECK(m.err_mean > 0.0);
  CHECK(m.collision_pct == 0.0);

  // determinism
  const EvalMetrics m2 = evaluate(actor, env, 8, 5);
  CHECK(m.err_mean == m2.err_mean);
  CHECK(m.dist_mean == m2.dist_mean);
}

TEST_CASE("evaluation leaves checkpoints untouched") {
  TrainConfig train = base_train();
  TransformerParams actor = init_params(train.net, 5, true, 7);
  TransformerParams critic = init_params(train.net, 1, false, 7);
  CheckpointMeta meta;
  meta.net = train.net;
  const std::string dir = (fs::temp_directory_path() / "utrack_eval_ck").string();
  fs::remove_all(dir);
  save_checkpoint(dir, actor, critic, meta);
  const auto before = checkpoint_hash(dir);

  EnvConfig env = base_env();
  env.horizon = 8;
  evaluate(load_checkpoint(dir).actor, env, 2, 1);
  CHECK(checkpoint_hash(dir) == before);
}
