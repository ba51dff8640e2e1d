#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "utrack/env.hpp"
#include "utrack/thread_pool.hpp"

namespace utrack {

enum class BenchmarkPolicy { kRandom, kScripted };

/// Batched execution of independent environments. Each member env owns its
/// state and RNG streams; stepping shards envs across the worker pool and
/// gathers outputs into preallocated batch buffers, so results are
/// bit-identical for any worker count and semantically equal to stepping
/// each env alone. Envs reaching the horizon auto-reset; the terminal
/// observation is surfaced in final_obs_stack().
class VecEnv {
 public:
  VecEnv(const EnvConfig& cfg, int n_envs, std::uint64_t master_seed,
         int workers = 0);

  int n_envs() const { return n_envs_; }
  int n_agents() const { return cfg_.n_agents; }
  int n_rows() const { return cfg_.n_entities(); }
  const EnvConfig& config() const { return cfg_; }
  ThreadPool& pool() { return pool_; }

  Environment& env(int i) { return *envs_[static_cast<std::size_t>(i)]; }
  const Environment& env(int i) const { return *envs_[static_cast<std::size_t>(i)]; }

  /// Respawns every env (each from its own stream) and refreshes buffers.
  void reset_all();

  /// Steps envs with external actions, row-major (n_envs x n_agents).
  void step(std::span<const int> actions);

  /// Self-driven step for benchmarks and scripted rollouts.
  void step_policy(BenchmarkPolicy policy);

  /// Regathers observation/state/mask buffers from the member envs; needed
  /// after env states were restored out-of-band.
  void refresh_outputs();

  // Batch views, valid after reset_all/step. Row layouts:
  //   obs_stack:    ((env * n_agents + agent) * n_rows + row) x kFeatureDim
  //   global_stack: ((env * n_rows) + row) x kFeatureDim
  const Eigen::MatrixXd& obs_stack() const { return obs_stack_; }
  const Eigen::MatrixXd& global_stack() const { return global_stack_; }
  const Eigen::VectorXd& rewards() const { return rewards_; }
  const std::vector<std::uint8_t>& dones() const { return dones_; }
  /// Legal-action masks, (env * n_agents + agent) * kNumActions.
  const std::vector<std::uint8_t>& masks() const { return masks_; }
  const std::vector<StepOutput>& infos() const { return infos_; }
  /// Terminal observations of envs that auto-reset on the last step.
  const Eigen::MatrixXd& final_obs_stack() const { return final_obs_stack_; }

  void enable_phase_timing(bool on);
  void reset_timing();
  std::array<std::uint64_t, static_cast<int>(StepPhase::kCount)> phase_ns() const;
  std::uint64_t total_step_ns() const;

 private:
  void gather(int i);
  void gather_masks(int i);

  EnvConfig cfg_;
  int n_envs_;
  ThreadPool pool_;
  std::vector<std::unique_ptr<Environment>> envs_;
  std::vector<RngStream> bench_rng_;

  Eigen::MatrixXd obs_stack_, global_stack_, final_obs_stack_;
  Eigen::VectorXd rewards_;
  std::vector<std::uint8_t> dones_;
  std::vector<std::uint8_t> masks_;
  std::vector<StepOutput> infos_;
  std::vector<int> action_scratch_;
};

struct BenchmarkReport {
  std::string config_name;
  int n_envs = 0;
  int n_agents = 0;
  int n_targets = 0;
  int timed_steps = 0;
  int workers = 0;
  double wall_seconds = 0.0;
  double sps = 0.0;  // env steps * n_envs per wall second
  std::array<std::uint64_t, static_cast<int>(StepPhase::kCount)> phase_ns{};
  std::uint64_t total_ns = 0;  // summed per-env step time
};

/// Times `n_steps` batch steps (after `warmup` untimed ones) under the given
/// policy and reports SPS plus the per-phase breakdown.
BenchmarkReport benchmark_sps(const EnvConfig& cfg, int n_envs, int n_steps,
                              BenchmarkPolicy policy, std::uint64_t seed,
                              int workers = 0, int warmup = 16);

}  // namespace utrack
