#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "utrack/env_config.hpp"
#include "utrack/nets.hpp"

namespace utrack {

struct TrainConfig {
  double gamma = 0.99;
  double lam = 0.95;
  double clip_eps = 0.2;
  double lr = 3e-4;
  int epochs = 4;
  int minibatches = 4;
  int rollout_steps = 128;
  int n_envs = 32;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  long long total_timesteps = 2'000'000;
  NetConfig net;
  int workers = 0;  // 0 = hardware concurrency
  // Fixed shard counts decouple results from the worker count: gradient
  // reduction and rollout batching always use the same structure.
  int grad_shards = 2;
  int rollout_shards = 8;
  int checkpoint_every = 0;  // updates between periodic checkpoints; 0 = final only

  void validate() const;
};

/// Everything one run needs; a persisted snapshot of this struct plus a
/// checkpoint fully reproduces training or evaluation.
struct RunConfig {
  int schema_version = 1;
  std::uint64_t seed = 0;
  std::string out_dir;
  EnvConfig env;
  TrainConfig train;
};

/// Parses and validates a config file. Unknown keys are errors naming the
/// offending field; missing keys keep their defaults.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text, const std::string& origin);

/// Applies one `dotted.path=value` override (e.g. env.n_agents=2) and
/// re-validates. Unknown paths are ConfigErrors.
void apply_override(RunConfig& cfg, const std::string& assignment);

std::string run_config_to_json(const RunConfig& cfg);
void save_config_snapshot(const RunConfig& cfg, const std::string& path);

}  // namespace utrack
