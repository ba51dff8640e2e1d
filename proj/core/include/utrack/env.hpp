#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "utrack/env_config.hpp"
#include "utrack/kinematics.hpp"
#include "utrack/rng.hpp"
#include "utrack/tracking.hpp"

namespace utrack {

/// One token row per entity, kFeatureDim columns.
using EntityTokenMatrix = Eigen::MatrixXd;

/// What one agent knows about one other agent, from comms only.
struct AgentInfo {
  Eigen::Vector3d position{0.0, 0.0, 0.0};
  double heading = 0.0;
  int age = 0;
  bool valid = false;  // false until first contact
};

/// One agent's decentralized track of one target.
struct TargetTrack {
  ParticleSet particles;
  TrackEstimate estimate;
  bool ever_measured = false;
};

struct KnowledgeBase {
  std::vector<AgentInfo> agents;    // indexed by agent id (own entry unused)
  std::vector<TargetTrack> targets;
};

struct TargetMotion {
  int countdown = 0;           // steps until next direction change
  double commanded_heading = 0.0;
};

struct WorldState {
  std::vector<VehicleState> agents;
  std::vector<VehicleState> targets;
  std::vector<TargetMotion> target_motion;
  std::vector<KnowledgeBase> knowledge;    // per agent
  std::vector<int> target_miss_streak;     // consecutive steps with no detection
  int step = 0;
};

struct StepOutput {
  double reward = 0.0;
  bool done = false;
  bool collision = false;
  std::vector<double> tracking_error;  // per target, min over agents [m]
  std::vector<double> min_agent_dist;  // per target, 2D [m]
  std::vector<std::uint8_t> target_lost;
};

/// Exponential-decay tracking reward for one target error.
double tracking_reward_single(double error, const EnvConfig& cfg);
/// Mean of per-target tracking rewards.
double tracking_reward(std::span<const double> errors, const EnvConfig& cfg);
/// Mean of per-target follow indicators (min dist <= d_min).
double follow_reward(std::span<const double> min_dists, const EnvConfig& cfg);
/// True iff any two agents are closer than d_safe (3D, strict).
bool crash_check(std::span<const VehicleState> agents, double d_safe);

enum class StepPhase : int {
  kTargets = 0,
  kAgents,
  kMeasure,
  kFilter,
  kComms,
  kObserve,
  kReward,
  kCount,
};
inline constexpr std::array<const char*, static_cast<int>(StepPhase::kCount)>
    kStepPhaseNames = {"targets", "agents",  "measure", "filter",
                       "comms",   "observe", "reward"};

/// One UTracking episode world. Owns its RNG streams (counter-based, keyed
/// by (seed, env_index)), so any number of instances step in parallel with
/// no shared state and bit-reproducible results.
///
/// Step phases: targets move, agents move, range measurement, filter
/// predict/update, comms exchange, observation/state/reward build.
class Environment {
 public:
  Environment(EnvConfig cfg, std::uint64_t seed, int env_index = 0);

  /// Respawns everything from this environment's own stream.
  void reset();

  /// Advances one step. `actions` are rudder indices, one per agent, each
  /// legal under the current mask.
  const StepOutput& step(std::span<const int> actions);

  const EnvConfig& config() const { return cfg_; }
  const WorldState& world() const { return world_; }
  /// Direct state access for tests and tooling; observations refresh on the
  /// next step.
  WorldState& mutable_world() { return world_; }
  const StepOutput& last_output() const { return out_; }

  const EntityTokenMatrix& observation(int agent) const {
    return obs_[static_cast<std::size_t>(agent)];
  }
  const EntityTokenMatrix& global_state() const { return global_; }

  std::array<bool, kNumActions> action_mask(int agent) const;

  /// Greedy pursuit heuristic used by benchmarks and as a scripted baseline:
  /// steers toward the best target estimate (nearest by estimate).
  int scripted_action(int agent) const;

  double episode_target_speed() const { return episode_target_speed_; }

  void enable_phase_timing(bool on) { timing_enabled_ = on; }
  const std::array<std::uint64_t, static_cast<int>(StepPhase::kCount)>&
  phase_ns() const {
    return phase_ns_;
  }
  std::uint64_t total_step_ns() const { return total_step_ns_; }
  void reset_timing();

  // -- training-state serialization hooks (exact resume support) --
  struct RngState {
    std::uint64_t counter = 0;
    bool have_spare = false;
    double spare = 0.0;
  };
  std::vector<double> serialize_state() const;
  void deserialize_state(std::span<const double> blob);

 private:
  void spawn();
  void move_targets();
  void move_agents(std::span<const int> actions);
  void measure_ranges();
  void filter_step();
  void exchange_comms();
  void build_observation(int agent);
  void build_global_state();
  void compute_reward_and_info();

  bool measurement_at(int agent, int target) const {
    return meas_present_[static_cast<std::size_t>(agent * cfg_.n_targets + target)] != 0;
  }

  EnvConfig cfg_;
  WorldState world_;
  RngStream rng_;  // spawn, dynamics noise, comm/measurement bernoullis
  double max_turn_per_step_ = 0.0;
  double episode_target_speed_ = 0.0;

  // per-step scratch, preallocated once
  std::vector<RangeMeasurement> meas_;
  std::vector<std::uint8_t> meas_present_;     // n_agents x n_targets
  std::vector<std::uint8_t> meas_fresh_age_;   // track got-measurement flags
  std::vector<EntityTokenMatrix> obs_;
  EntityTokenMatrix global_;
  StepOutput out_;

  bool timing_enabled_ = false;
  std::array<std::uint64_t, static_cast<int>(StepPhase::kCount)> phase_ns_{};
  std::uint64_t total_step_ns_ = 0;
};

}  // namespace utrack
