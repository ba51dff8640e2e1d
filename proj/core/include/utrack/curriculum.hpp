#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "utrack/config.hpp"
#include "utrack/marl.hpp"

namespace utrack {
namespace curriculum {

/// One curriculum stage: env/train overrides on top of the run's base
/// config, warm-started from an earlier stage or from scratch.
struct StageSpec {
  std::string name;
  std::string init_from;  // stage name; empty = fresh parameters
  bool reset_critic = false;

  int n_agents = 1;
  int n_targets = 1;
  int horizon = 128;
  double target_speed_frac = 0.3;
  double target_speed_frac_max = 0.0;  // > frac: sampled per episode
  RewardMode reward_mode = RewardMode::kTracking;
  double d_min = 50.0;
  long long total_timesteps = 0;
};

struct StagePlan {
  std::string name;
  std::vector<StageSpec> stages;

  /// First stage fresh, names unique, init_from references earlier stages.
  void validate() const;
};

/// Built-in plans. "paper" mirrors the published schedule: single-agent
/// pretrain on a fast erratic target at short horizon, horizon fine-tuning
/// (256/512/1024), then two branches from the horizon-invariant base —
/// multi-target follow up to 5x5 and multi-robot tracking of one very fast
/// target up to 3 agents, with the critic reset at each branch start.
/// "desk" keeps the identical structure at CPU-scale timestep budgets.
StagePlan default_plan(const std::string& scale);

std::string plan_to_json(const StagePlan& plan);
StagePlan plan_from_json(const std::string& text, const std::string& origin);
StagePlan load_plan(const std::string& path);

/// Deterministic per-stage seed derivation.
std::uint64_t stage_seed(std::uint64_t master_seed, const std::string& stage_name);

/// Env config for a stage (base + overrides).
EnvConfig stage_env_config(const EnvConfig& base, const StageSpec& stage);

struct StageResult {
  std::string checkpoint_dir;
  std::string metrics_path;
};

/// Trains one stage. `init_checkpoint` is the resolved directory of the
/// init_from stage (empty for fresh). Metrics lines are re-emitted through
/// `sink` tagged with the stage name.
StageResult run_stage(const StageSpec& stage, const EnvConfig& base_env,
                      const TrainConfig& base_train,
                      const std::string& init_checkpoint, const std::string& out_dir,
                      std::uint64_t master_seed,
                      const Trainer::MetricsSink& sink = {});

/// Runs every stage in order; returns stage name -> final checkpoint dir.
/// A stage failure propagates after earlier checkpoints are on disk.
std::map<std::string, std::string> run_curriculum(
    const StagePlan& plan, const EnvConfig& base_env, const TrainConfig& base_train,
    const std::string& out_root, std::uint64_t master_seed,
    const Trainer::MetricsSink& sink = {});

struct EvalMetrics {
  double dist_mean = 0.0;  // agent-target distance, mean of per-episode means
  double dist_std = 0.0;   // std across episodes
  double err_mean = 0.0;   // tracking error (min over agents per target)
  double err_std = 0.0;
  double collision_pct = 0.0;  // episodes with >= 1 crash step
  double loss_pct = 0.0;       // episodes with >= 1 lost target
  int episodes = 0;
};

/// Greedy (argmax) evaluation of an actor over n_episodes fresh episodes.
/// When `trajectory_dir` is set, one trajectory CSV is written per episode.
EvalMetrics evaluate(const TransformerParams& actor, const EnvConfig& env_cfg,
                     int n_episodes, std::uint64_t seed, int workers = 0,
                     const std::string& trajectory_dir = "");

}  // namespace curriculum
}  // namespace utrack
