#include "utrack/curriculum.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "utrack/trajectory.hpp"

namespace utrack {
namespace curriculum {

namespace fs = std::filesystem;
using nlohmann::json;

void StagePlan::validate() const {
  if (stages.empty()) throw ConfigError("plan '" + name + "' has no stages");
  if (!stages.front().init_from.empty())
    throw ConfigError("plan '" + name + "': first stage must init fresh");
  std::set<std::string> seen;
  for (const StageSpec& s : stages) {
    if (s.name.empty()) throw ConfigError("plan '" + name + "': stage without a name");
    if (!seen.insert(s.name).second)
      throw ConfigError("plan '" + name + "': duplicate stage name '" + s.name + "'");
    if (!s.init_from.empty() && !seen.count(s.init_from))
      throw ConfigError("plan '" + name + "': stage '" + s.name +
                        "' inits from unknown/later stage '" + s.init_from + "'");
    if (s.total_timesteps < 1)
      throw ConfigError("plan '" + name + "': stage '" + s.name +
                        "' needs total_timesteps >= 1");
  }
}

StagePlan default_plan(const std::string& scale) {
  const bool paper = scale == "paper";
  if (!paper && scale != "desk")
    throw ConfigError("unknown plan name '" + scale + "' (built-ins: desk, paper)");

  // Published budgets read as 1e10 pretrain, 1e8 per horizon stage and 2e9
  // per multi-agent branch; desk keeps the shape at CPU-scale budgets.
  const long long pretrain = paper ? 10'000'000'000LL : 2'000'000LL;
  const long long horizon_ft = paper ? 100'000'000LL : 1'000'000LL;
  const long long branch_a = paper ? 500'000'000LL : 1'000'000LL;  // per stage, 4 stages
  const long long branch_b = paper ? 1'000'000'000LL : 1'000'000LL;  // per stage, 2 stages

  StagePlan plan;
  plan.name = scale;

  StageSpec pre;
  pre.name = "pretrain_1v1";
  pre.n_agents = 1;
  pre.n_targets = 1;
  pre.horizon = 128;
  pre.target_speed_frac = 0.6;
  pre.reward_mode = RewardMode::kTracking;
  pre.total_timesteps = pretrain;
  plan.stages.push_back(pre);

  std::string prev = pre.name;
  for (int h : {256, 512, 1024}) {
    StageSpec s = pre;
    s.name = "horizon_" + std::to_string(h);
    s.init_from = prev;
    s.horizon = h;
    s.total_timesteps = horizon_ft;
    plan.stages.push_back(s);
    prev = s.name;
  }
  const std::string base = prev;  // horizon-invariant base model

  // Branch A: n agents following n moderately fast targets, follow reward.
  std::string prev_a = base;
  for (int n = 2; n <= 5; ++n) {
    StageSpec s;
    s.name = "follow_" + std::to_string(n) + "x" + std::to_string(n);
    s.init_from = prev_a;
    s.reset_critic = n == 2;  // branch start
    s.n_agents = n;
    s.n_targets = n;
    s.horizon = 128;
    s.target_speed_frac = 0.3;
    s.target_speed_frac_max = 0.5;
    s.reward_mode = RewardMode::kFollow;
    s.d_min = 50.0;
    s.total_timesteps = branch_a;
    plan.stages.push_back(s);
    prev_a = s.name;
  }

  // Branch B: n agents tracking one very fast target.
  std::string prev_b = base;
  for (int n = 2; n <= 3; ++n) {
    StageSpec s;
    s.name = "track_" + std::to_string(n) + "a1t";
    s.init_from = prev_b;
    s.reset_critic = n == 2;
    s.n_agents = n;
    s.n_targets = 1;
    s.horizon = 128;
    s.target_speed_frac = 0.8;
    s.reward_mode = RewardMode::kTracking;
    s.d_min = 100.0;  // fast target
    s.total_timesteps = branch_b;
    plan.stages.push_back(s);
    prev_b = s.name;
  }

  plan.validate();
  return plan;
}

std::string plan_to_json(const StagePlan& plan) {
  json j;
  j["plan"] = plan.name;
  json stages = json::array();
  for (const StageSpec& s : plan.stages) {
    json e;
    e["name"] = s.name;
    e["init_from"] = s.init_from;
    e["reset_critic"] = s.reset_critic;
    e["n_agents"] = s.n_agents;
    e["n_targets"] = s.n_targets;
    e["horizon"] = s.horizon;
    e["target_speed_frac"] = s.target_speed_frac;
    e["target_speed_frac_max"] = s.target_speed_frac_max;
    e["reward_mode"] = s.reward_mode == RewardMode::kTracking ? "tracking" : "follow";
    e["d_min"] = s.d_min;
    e["total_timesteps"] = s.total_timesteps;
    stages.push_back(e);
  }
  j["stages"] = stages;
  return j.dump(2);
}

StagePlan plan_from_json(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }

  StagePlan plan;
  plan.name = j.value("plan", "custom");
  if (!j.contains("stages")) throw ConfigError(origin + ": missing 'stages'");
  for (const json& e : j.at("stages")) {
    static const std::set<std::string> keys = {
        "name", "init_from", "reset_critic", "n_agents", "n_targets", "horizon",
        "target_speed_frac", "target_speed_frac_max", "reward_mode", "d_min",
        "total_timesteps"};
    for (const auto& [key, value] : e.items())
      if (!keys.count(key))
        throw ConfigError(origin + ": unknown stage key '" + key + "'");

    StageSpec s;
    s.name = e.at("name").get<std::string>();
    s.init_from = e.value("init_from", "");
    s.reset_critic = e.value("reset_critic", false);
    s.n_agents = e.value("n_agents", 1);
    s.n_targets = e.value("n_targets", 1);
    s.horizon = e.value("horizon", 128);
    s.target_speed_frac = e.value("target_speed_frac", 0.3);
    s.target_speed_frac_max = e.value("target_speed_frac_max", 0.0);
    const std::string mode = e.value("reward_mode", "tracking");
    if (mode == "tracking")
      s.reward_mode = RewardMode::kTracking;
    else if (mode == "follow")
      s.reward_mode = RewardMode::kFollow;
    else
      throw ConfigError(origin + ": stage '" + s.name + "': bad reward_mode '" +
                        mode + "'");
    s.d_min = e.value("d_min", 50.0);
    s.total_timesteps = e.value("total_timesteps", 0LL);
    plan.stages.push_back(s);
  }
  plan.validate();
  return plan;
}

StagePlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return plan_from_json(ss.str(), path);
}

std::uint64_t stage_seed(std::uint64_t master_seed, const std::string& stage_name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stage_name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return RngStream::derive_key(master_seed, 0x73746167u, h);
}

EnvConfig stage_env_config(const EnvConfig& base, const StageSpec& stage) {
  EnvConfig env = base;
  env.n_agents = stage.n_agents;
  env.n_targets = stage.n_targets;
  env.horizon = stage.horizon;
  env.target_speed_frac = stage.target_speed_frac;
  env.target_speed_frac_max = stage.target_speed_frac_max;
  env.reward_mode = stage.reward_mode;
  env.d_min = stage.d_min;
  return env;
}

StageResult run_stage(const StageSpec& stage, const EnvConfig& base_env,
                      const TrainConfig& base_train,
                      const std::string& init_checkpoint, const std::string& out_dir,
                      std::uint64_t master_seed, const Trainer::MetricsSink& sink) {
  EnvConfig env = stage_env_config(base_env, stage);
  TrainConfig train = base_train;
  train.total_timesteps = stage.total_timesteps;

  const std::uint64_t seed = stage_seed(master_seed, stage.name);
  Trainer trainer(env, train, seed);

  if (!init_checkpoint.empty()) {
    const LoadedCheckpoint ck = load_checkpoint(init_checkpoint, trainer.actor().cfg);
    trainer.set_actor(ck.actor);
    if (!stage.reset_critic) trainer.set_critic(ck.critic);
    // reset_critic keeps the fresh stage-seed critic from the constructor
  }

  Trainer::MetricsSink tagged;
  if (sink) {
    const std::string stage_name = stage.name;
    tagged = [sink, stage_name](const std::string& line) {
      json j = json::parse(line);
      j["stage"] = stage_name;
      sink(j.dump());
    };
  }

  const TrainResult res = trainer.train(out_dir, tagged);
  return {res.final_checkpoint, res.metrics_path};
}

std::map<std::string, std::string> run_curriculum(
    const StagePlan& plan, const EnvConfig& base_env, const TrainConfig& base_train,
    const std::string& out_root, std::uint64_t master_seed,
    const Trainer::MetricsSink& sink) {
  plan.validate();
  fs::create_directories(out_root);
  {
    std::ofstream out(fs::path(out_root) / "plan.json");
    out << plan_to_json(plan) << "\n";
  }

  std::map<std::string, std::string> checkpoints;
  for (const StageSpec& stage : plan.stages) {
    const std::string init =
        stage.init_from.empty() ? "" : checkpoints.at(stage.init_from);
    const std::string stage_dir = (fs::path(out_root) / stage.name).string();
    const StageResult res =
        run_stage(stage, base_env, base_train, init, stage_dir, master_seed, sink);
    checkpoints[stage.name] = res.checkpoint_dir;
  }
  return checkpoints;
}

EvalMetrics evaluate(const TransformerParams& actor, const EnvConfig& env_cfg,
                     int n_episodes, std::uint64_t seed, int workers,
                     const std::string& trajectory_dir) {
  (void)workers;  // evaluation runs one env; throughput is not its contract
  if (n_episodes < 1) throw ContractViolation("evaluate: n_episodes must be >= 1");
  const bool exporting = !trajectory_dir.empty();

  EnvConfig cfg = env_cfg;
  cfg.finalize();
  Environment env(cfg, RngStream::derive_key(seed, 0x6576616cu), 0);
  const int A = cfg.n_agents;
  const int R = cfg.n_entities();

  Eigen::MatrixXd tokens(static_cast<Eigen::Index>(A) * R, kFeatureDim);
  Eigen::MatrixXd hidden(A, actor.cfg.d);
  std::vector<int> actions(static_cast<std::size_t>(A), 2);
  std::vector<TrajectoryRow> traj_rows;

  std::vector<double> ep_dist_mean, ep_err_mean;
  int collided_episodes = 0, lost_episodes = 0;

  for (int episode = 0; episode < n_episodes; ++episode) {
    if (episode > 0) env.reset();
    for (int a = 0; a < A; ++a) hidden.row(a) = actor.hidden0.row(0);
    traj_rows.clear();

    double dist_sum = 0.0, err_sum = 0.0;
    long long dist_n = 0, err_n = 0;
    bool collided = false, lost = false;

    for (int t = 0; t < cfg.horizon; ++t) {
      for (int a = 0; a < A; ++a)
        tokens.middleRows(static_cast<Eigen::Index>(a) * R, R) = env.observation(a);
      const ActorOutput out = actor_forward(actor, tokens, hidden, R);
      hidden = out.hidden_out;
      for (int a = 0; a < A; ++a) {
        const Eigen::VectorXd probs =
            masked_probs(out.logits.row(a), env.action_mask(a));
        int best = 0;
        for (int k = 1; k < kNumActions; ++k)
          if (probs(k) > probs(best)) best = k;
        actions[static_cast<std::size_t>(a)] = best;
      }
      const StepOutput& info = env.step(actions);

      for (double err : info.tracking_error) {
        err_sum += err;
        ++err_n;
      }
      const WorldState& w = env.world();
      for (const VehicleState& av : w.agents)
        for (const VehicleState& tv : w.targets) {
          dist_sum += std::hypot(av.position.x() - tv.position.x(),
                                 av.position.y() - tv.position.y());
          ++dist_n;
        }
      collided = collided || info.collision;
      for (std::uint8_t l : info.target_lost) lost = lost || l != 0;
      if (exporting) append_trajectory_rows(env, info.reward, info.collision, traj_rows);
    }

    ep_dist_mean.push_back(dist_sum / static_cast<double>(dist_n));
    ep_err_mean.push_back(err_sum / static_cast<double>(err_n));
    if (collided) ++collided_episodes;
    if (lost) ++lost_episodes;

    if (exporting) {
      char name[32];
      std::snprintf(name, sizeof(name), "episode_%04d.csv", episode + 1);
      write_trajectory_csv((fs::path(trajectory_dir) / name).string(), traj_rows);
    }
  }

  EvalMetrics m;
  m.episodes = n_episodes;
  auto mean_std = [](const std::vector<double>& xs) {
    double mu = 0.0;
    for (double x : xs) mu += x;
    mu /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mu) * (x - mu);
    var /= static_cast<double>(xs.size());
    return std::pair<double, double>{mu, std::sqrt(var)};
  };
  std::tie(m.dist_mean, m.dist_std) = mean_std(ep_dist_mean);
  std::tie(m.err_mean, m.err_std) = mean_std(ep_err_mean);
  m.collision_pct = 100.0 * collided_episodes / n_episodes;
  m.loss_pct = 100.0 * lost_episodes / n_episodes;
  return m;
}

}  // namespace curriculum
}  // namespace utrack
