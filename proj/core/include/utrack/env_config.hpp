#pragma once

#include <string>

#include "utrack/errors.hpp"
#include "utrack/kinematics.hpp"

namespace utrack {

inline constexpr int kNumActions = 5;

// Entity-token feature layout. Scaling constants keep features near unit
// range; they are part of the observation contract and the config schema
// documents them.
inline constexpr int kFeatureDim = 12;
inline constexpr double kPosScale = 1000.0;    // m
inline constexpr double kSpeedScale = 1.0;     // m/s
inline constexpr double kAgeScale = 10.0;      // steps
inline constexpr double kSpreadScale = 100.0;  // m

enum TokenCol : int {
  kColDx = 0,
  kColDy = 1,
  kColDz = 2,
  kColSinH = 3,
  kColCosH = 4,
  kColSpeed = 5,
  kColSelf = 6,
  kColAgent = 7,
  kColTarget = 8,
  kColValid = 9,
  kColAge = 10,
  kColSpread = 11,
};

enum class RewardMode { kTracking, kFollow };

struct PfConfig {
  int n_particles = 1024;
  double process_noise_pos = 1.0;    // m per step
  double process_noise_vel = 0.05;   // m/s per step
  double speed_margin = 1.2;         // max particle speed / target speed
  double init_radius = 450.0;        // m, prior disc around the owning agent
};

struct EnvConfig {
  int n_agents = 1;
  int n_targets = 1;
  int horizon = 128;   // steps
  double dt = 30.0;    // s per step

  double agent_speed = 1.0;        // m/s
  double target_speed_frac = 0.3;  // of agent speed
  // When > target_speed_frac, the fraction is drawn uniformly from
  // [target_speed_frac, target_speed_frac_max] once per episode.
  double target_speed_frac_max = 0.0;
  double target_turn_interval = 20.0;  // steps, mean of the geometric

  double detection_range = 450.0;  // m
  double comm_range = 1500.0;      // m
  double comm_drop_prob = 0.1;
  double range_noise_std = 3.0;    // m

  double eps_min = 10.0;  // m, ideal tracking error
  double eps_max = 50.0;  // m, largest rewarded error
  double d_min = 50.0;    // m, follow threshold (100 for fast targets)
  double d_safe = 10.0;   // m, crash distance

  RewardMode reward_mode = RewardMode::kTracking;

  double spawn_min_sep = 50.0;   // m
  double spawn_max_sep = 200.0;  // m
  double perturbation_std = 0.0;  // rad, extra agent heading noise (currents)

  double target_depth_min = 10.0;  // m
  double target_depth_max = 60.0;  // m

  int lost_steps = 20;  // consecutive undetected steps before a target counts as lost

  PfConfig pf;

  // Empty model means "use the shipped oracle-fit defaults"; a calibration
  // CSV or explicit buckets in the config file replace it.
  HeadingDeltaModel heading_model;

  int n_entities() const { return n_agents + n_targets; }
  double target_speed_lo() const { return agent_speed * target_speed_frac; }
  double target_speed_hi() const {
    return agent_speed * std::max(target_speed_frac, target_speed_frac_max);
  }

  /// Fills the heading model if unset and checks every invariant; throws
  /// ConfigError naming the offending field.
  void finalize();
};

/// -0.24 + index * 0.12; the five equidistant rudder angles.
double rudder_angle(int index);

/// Rudder can move at most one notch per step: mask true at {i-1, i, i+1}.
std::array<bool, kNumActions> valid_actions(int rudder_index);

}  // namespace utrack
