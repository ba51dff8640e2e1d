#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "utrack/errors.hpp"

namespace utrack {

/// Wraps an angle to (-pi, pi].
double wrap_angle(double psi);

/// One vehicle (agent or target). Depth and speed are constant within an
/// episode; heading is always kept wrapped to (-pi, pi].
struct VehicleState {
  Eigen::Vector3d position{0.0, 0.0, 0.0};  // x east, y north, z depth [m]
  double heading = 0.0;                     // [rad], in (-pi, pi]
  double speed = 0.0;                       // [m/s]
  int rudder_index = 2;                     // {0..4}, 2 = rudder centered
};

struct LinearCoeffs {
  double a = 0.0;  // [rad/rad]
  double b = 0.0;  // [rad]
};

/// Ensemble of per-(speed, dt) linear models mapping rudder angle to the
/// heading change over one step. Bucket lookup is exact-match; querying a
/// missing bucket is a configuration error, never an extrapolation.
class HeadingDeltaModel {
 public:
  using Key = std::pair<double, double>;  // (speed [m/s], dt [s])

  void set_bucket(double speed, double dt, LinearCoeffs c) {
    buckets_[{speed, dt}] = c;
  }
  bool has_bucket(double speed, double dt) const {
    return buckets_.count({speed, dt}) > 0;
  }
  const LinearCoeffs& bucket(double speed, double dt) const;

  const std::map<Key, LinearCoeffs>& buckets() const { return buckets_; }

  double noise_std() const { return noise_std_; }
  void set_noise_std(double s);

 private:
  std::map<Key, LinearCoeffs> buckets_;
  double noise_std_ = 0.02;  // [rad] per step
};

struct CalibrationRow {
  double gamma = 0.0;  // rudder angle [rad]
  double speed = 0.0;  // [m/s]
  double dt = 0.0;     // [s]
  double dpsi = 0.0;   // observed heading delta [rad]
};

using CalibrationDataset = std::vector<CalibrationRow>;

struct FitReport {
  HeadingDeltaModel model;
  std::map<HeadingDeltaModel::Key, double> bucket_mae;  // [rad]
  double global_r2 = 0.0;
};

/// Heading change predicted by the bucket's linear model, noise-free.
/// Throws ConfigError naming the (speed, dt) pair if the bucket is missing.
double heading_delta(const HeadingDeltaModel& model, double rudder_angle,
                     double speed, double dt);

/// Advances a vehicle by one step with an explicit heading change:
/// heading' = wrap(heading + dpsi + noise), position' = position +
/// speed*dt*(cos, sin) of the updated heading. Depth is untouched.
VehicleState advance_vehicle(const VehicleState& state, double dpsi, double dt,
                             double noise);

/// Rudder-controlled step: dpsi comes from the heading-delta model at the
/// vehicle's speed. `noise` is a caller-supplied draw (0 for deterministic
/// stepping).
VehicleState step_vehicle(const VehicleState& state,
                          const HeadingDeltaModel& model, double rudder_angle,
                          double dt, double noise);

/// Ordinary least squares per (speed, dt) bucket. MAE and R^2 are computed
/// on the fitting data; R^2 is pooled over all rows. Throws DataError for a
/// bucket with fewer than 2 distinct rudder values.
FitReport fit_heading_model(const CalibrationDataset& data);

/// Idealized constant-turn-rate kinematics used to synthesize calibration
/// data and as fitting ground truth: dpsi = k_turn * speed * dt * tan(gamma)
/// with k_turn = 0.15 (an effective inverse wheelbase of ~6.7 m).
/// Linear in dt and speed; odd in gamma. Valid for |gamma| <= 0.24 rad.
double reference_turn_oracle(double rudder_angle, double speed, double dt);

inline constexpr double kOracleTurnGain = 0.15;   // [1/m]
inline constexpr double kMaxRudderAngle = 0.24;   // [rad]

/// Synthesizes a calibration dataset from the reference oracle with additive
/// Gaussian noise on the observed heading delta.
CalibrationDataset synth_calibration(const std::vector<double>& speeds,
                                     const std::vector<double>& dts,
                                     int rows_per_bucket, double noise_std,
                                     std::uint64_t seed);

/// Loads `gamma,speed,dt,dpsi` rows. Throws DataError naming the line on
/// malformed input.
CalibrationDataset load_calibration_csv(const std::string& path);

/// Model shipped by default: noiseless oracle fit over a grid of cruise
/// speeds and step durations, noise_std = 0.02 rad.
HeadingDeltaModel default_heading_model();

}  // namespace utrack
