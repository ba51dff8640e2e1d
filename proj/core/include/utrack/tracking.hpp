#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>

#include "utrack/errors.hpp"
#include "utrack/rng.hpp"

namespace utrack {

/// One range observation, already projected to the horizontal plane and
/// associated with a target identity.
struct RangeMeasurement {
  Eigen::Vector2d origin_xy{0.0, 0.0};  // measuring agent position [m]
  double range_2d = 0.0;                // [m], >= 0
  double noise_std = 1.0;               // [m], > 0
  int step_index = 0;
};

struct HorizontalRange {
  double range_2d = 0.0;
  bool clamped = false;  // |depth_diff| exceeded the slant range
};

/// sqrt(max(0, range_3d^2 - depth_diff^2)), clamp flagged.
HorizontalRange slant_to_horizontal(double range_3d, double depth_diff);

struct TrackEstimate {
  Eigen::Vector2d position_xy{0.0, 0.0};  // weighted particle mean [m]
  double spread = 0.0;                    // weighted RMS deviation [m]
  int age = 0;                            // steps since last measurement
};

/// Weighted 2D position+velocity particles for one (agent, target) pair.
/// Structure-of-arrays so predict/update run as fused vector passes; every
/// set owns its RNG stream and its scratch, so distinct sets update in
/// parallel with no shared state.
class ParticleSet {
 public:
  ParticleSet() = default;

  Eigen::ArrayXd px, py;  // [m]
  Eigen::ArrayXd vx, vy;  // [m/s]
  Eigen::ArrayXd w;       // non-negative, sums to 1
  double max_speed = 0.0;
  RngStream rng;

  Eigen::Index size() const { return px.size(); }

  // scratch reused across steps; never reallocated while stepping
  Eigen::ArrayXf noise, stage;
  Eigen::ArrayXd loglik;
  Eigen::ArrayXd sx, sy, svx, svy;
};

namespace pf {

/// Positions uniform in the disc around `center_xy`; speeds uniform in
/// [0, max_speed] with uniform direction; weights 1/n.
ParticleSet init(const Eigen::Vector2d& center_xy, double radius,
                 int n_particles, double max_speed, RngStream rng);
ParticleSet init(const Eigen::Vector2d& center_xy, double radius,
                 int n_particles, double max_speed, std::uint64_t seed);

/// Redraws the prior in place (same particle count, same stream); used for
/// allocation-free episode resets.
void reinit(ParticleSet& ps, const Eigen::Vector2d& center_xy, double radius,
            double max_speed);

/// Constant-velocity motion with Gaussian position/velocity diffusion;
/// particle speed is clamped to the set's max_speed. Weights untouched.
void predict(ParticleSet& ps, double dt, double process_noise_pos,
             double process_noise_vel);

/// Reweights by the product of range likelihoods and renormalizes.
/// Returns true if every likelihood underflowed and the weights were reset
/// to uniform instead.
bool update(ParticleSet& ps, std::span<const RangeMeasurement> meas);

/// Effective sample size 1 / sum(w^2).
double ess(const ParticleSet& ps);

/// Systematic resampling; output weights are uniform.
void resample(ParticleSet& ps);

/// Resamples iff ESS < n/2. Returns true when a resample happened.
bool maybe_resample(ParticleSet& ps);

/// Weighted mean position and weighted RMS spread (age is the caller's).
TrackEstimate estimate(const ParticleSet& ps);

}  // namespace pf

/// Linearized range-only trilateration: subtracts the first circle equation
/// from the others and solves the resulting linear system in least squares.
/// Needs >= 3 measurements with non-collinear origins.
Eigen::Vector2d ls_trilaterate(std::span<const RangeMeasurement> meas);

}  // namespace utrack
