#include "utrack/kinematics.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "utrack/rng.hpp"

namespace utrack {

double wrap_angle(double psi) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(psi + std::numbers::pi, two_pi);
  if (w <= 0.0) w += two_pi;
  return w - std::numbers::pi;
}

const LinearCoeffs& HeadingDeltaModel::bucket(double speed, double dt) const {
  auto it = buckets_.find({speed, dt});
  if (it == buckets_.end()) {
    std::ostringstream os;
    os << "heading model has no bucket for (speed=" << speed << " m/s, dt="
       << dt << " s)";
    throw ConfigError(os.str());
  }
  return it->second;
}

void HeadingDeltaModel::set_noise_std(double s) {
  if (s < 0.0) throw ConfigError("heading model noise_std must be >= 0");
  noise_std_ = s;
}

double heading_delta(const HeadingDeltaModel& model, double rudder_angle,
                     double speed, double dt) {
  const LinearCoeffs& c = model.bucket(speed, dt);
  return c.a * rudder_angle + c.b;
}

VehicleState advance_vehicle(const VehicleState& state, double dpsi, double dt,
                             double noise) {
  VehicleState next = state;
  next.heading = wrap_angle(state.heading + dpsi + noise);
  next.position.x() += state.speed * dt * std::cos(next.heading);
  next.position.y() += state.speed * dt * std::sin(next.heading);
  return next;
}

VehicleState step_vehicle(const VehicleState& state,
                          const HeadingDeltaModel& model, double rudder_angle,
                          double dt, double noise) {
  const double dpsi = heading_delta(model, rudder_angle, state.speed, dt);
  return advance_vehicle(state, dpsi, dt, noise);
}

FitReport fit_heading_model(const CalibrationDataset& data) {
  if (data.empty()) throw DataError("calibration dataset is empty");

  std::map<HeadingDeltaModel::Key, std::vector<const CalibrationRow*>> groups;
  for (const CalibrationRow& row : data) groups[{row.speed, row.dt}].push_back(&row);

  FitReport report;
  double ss_res = 0.0;
  double sum = 0.0, sum_sq = 0.0;
  const auto n_total = static_cast<double>(data.size());

  for (const auto& [key, rows] : groups) {
    std::set<double> distinct;
    for (const CalibrationRow* r : rows) distinct.insert(r->gamma);
    if (distinct.size() < 2) {
      std::ostringstream os;
      os << "bucket (speed=" << key.first << ", dt=" << key.second
         << ") needs >= 2 distinct rudder values, got " << distinct.size();
      throw DataError(os.str());
    }

    // OLS: dpsi = a*gamma + b
    const auto n = static_cast<double>(rows.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const CalibrationRow* r : rows) {
      sx += r->gamma;
      sy += r->dpsi;
      sxx += r->gamma * r->gamma;
      sxy += r->gamma * r->dpsi;
    }
    const double denom = n * sxx - sx * sx;
    LinearCoeffs c;
    c.a = (n * sxy - sx * sy) / denom;
    c.b = (sy - c.a * sx) / n;
    report.model.set_bucket(key.first, key.second, c);

    double abs_err = 0.0;
    for (const CalibrationRow* r : rows) {
      const double e = r->dpsi - (c.a * r->gamma + c.b);
      abs_err += std::abs(e);
      ss_res += e * e;
    }
    report.bucket_mae[key] = abs_err / n;

    for (const CalibrationRow* r : rows) {
      sum += r->dpsi;
      sum_sq += r->dpsi * r->dpsi;
    }
  }

  const double ss_tot = sum_sq - sum * sum / n_total;
  report.global_r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return report;
}

double reference_turn_oracle(double rudder_angle, double speed, double dt) {
  if (std::abs(rudder_angle) > kMaxRudderAngle) {
    std::ostringstream os;
    os << "rudder angle " << rudder_angle << " outside +/-" << kMaxRudderAngle;
    throw std::domain_error(os.str());
  }
  return kOracleTurnGain * speed * dt * std::tan(rudder_angle);
}

CalibrationDataset synth_calibration(const std::vector<double>& speeds,
                                     const std::vector<double>& dts,
                                     int rows_per_bucket, double noise_std,
                                     std::uint64_t seed) {
  CalibrationDataset data;
  data.reserve(speeds.size() * dts.size() * static_cast<std::size_t>(rows_per_bucket));
  RngStream rng(RngStream::derive_key(seed, 0x63616c69u), 0);  // "cali"
  for (double v : speeds) {
    for (double dt : dts) {
      for (int i = 0; i < rows_per_bucket; ++i) {
        CalibrationRow row;
        // Even sweep across the rudder range; noise only on the response.
        const double t = rows_per_bucket > 1
                             ? static_cast<double>(i) / (rows_per_bucket - 1)
                             : 0.5;
        row.gamma = -kMaxRudderAngle + 2.0 * kMaxRudderAngle * t;
        row.speed = v;
        row.dt = dt;
        row.dpsi = reference_turn_oracle(row.gamma, v, dt) +
                   (noise_std > 0.0 ? noise_std * rng.normal() : 0.0);
        data.push_back(row);
      }
    }
  }
  return data;
}

CalibrationDataset load_calibration_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open calibration CSV: " + path);

  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "gamma,speed,dt,dpsi") {
    throw DataError(path + ":1: expected header 'gamma,speed,dt,dpsi', got '" +
                    line + "'");
  }

  CalibrationDataset data;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    CalibrationRow row;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ss >> row.gamma >> c1 >> row.speed >> c2 >> row.dt >> c3 >> row.dpsi) ||
        c1 != ',' || c2 != ',' || c3 != ',') {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed row '" +
                      line + "'");
    }
    data.push_back(row);
  }
  return data;
}

HeadingDeltaModel default_heading_model() {
  static const std::vector<double> speeds = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0};
  static const std::vector<double> dts = {10.0, 15.0, 30.0, 60.0};
  FitReport fit = fit_heading_model(synth_calibration(speeds, dts, 201, 0.0, 0));
  fit.model.set_noise_std(0.02);
  return fit.model;
}

}  // namespace utrack
