#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "utrack/kinematics.hpp"
#include "utrack/rng.hpp"

using namespace utrack;

namespace {

HeadingDeltaModel single_bucket(double a, double b, double speed = 1.0,
                                double dt = 30.0) {
  HeadingDeltaModel m;
  m.set_bucket(speed, dt, {a, b});
  m.set_noise_std(0.0);
  return m;
}

}  // namespace

TEST_CASE("wrap_angle maps into (-pi, pi]") {
  CHECK(wrap_angle(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(3 * std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(0.5) == doctest::Approx(0.5));
  CHECK(wrap_angle(2 * std::numbers::pi + 0.25) == doctest::Approx(0.25));
  RngStream r(3, 0);
  for (int i = 0; i < 1000; ++i) {
    const double w = wrap_angle(r.uniform(-50.0, 50.0));
    CHECK(w <= std::numbers::pi);
    CHECK(w > -std::numbers::pi);
  }
}

TEST_CASE("heading_delta evaluates the bucket line without noise") {
  const HeadingDeltaModel m = single_bucket(0.5, 0.0);
  CHECK(heading_delta(m, 0.0, 1.0, 30.0) == doctest::Approx(0.0));
  CHECK(heading_delta(m, 0.12, 1.0, 30.0) == doctest::Approx(0.06));
  CHECK(heading_delta(m, -0.12, 1.0, 30.0) ==
        doctest::Approx(-heading_delta(m, 0.12, 1.0, 30.0)));
}

TEST_CASE("missing bucket raises a configuration error naming the pair") {
  const HeadingDeltaModel m = single_bucket(0.5, 0.0);
  CHECK_THROWS_WITH_AS(heading_delta(m, 0.0, 2.0, 30.0),
                       doctest::Contains("speed=2"), ConfigError);
  CHECK_THROWS_AS(heading_delta(m, 0.0, 1.0, 60.0), ConfigError);
}

TEST_CASE("step_vehicle straight line") {
  const HeadingDeltaModel m = single_bucket(0.5, 0.0);
  VehicleState s;
  s.heading = 0.0;
  s.speed = 1.0;
  const VehicleState next = step_vehicle(s, m, 0.0, 30.0, 0.0);
  CHECK(next.position.x() == doctest::Approx(30.0));
  CHECK(next.position.y() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(next.position.z() == 0.0);
  CHECK(next.heading == doctest::Approx(0.0));
}

TEST_CASE("heading accumulates a constant delta and stays wrapped") {
  const HeadingDeltaModel m = single_bucket(1.0, 0.0);  // dpsi = gamma
  VehicleState s;
  s.speed = 1.0;
  s.heading = 0.3;
  const double c = 0.24;
  for (int k = 1; k <= 50; ++k) {
    s = step_vehicle(s, m, c, 30.0, 0.0);
    CHECK(s.heading == doctest::Approx(wrap_angle(0.3 + k * c)));
    CHECK(std::abs(s.heading) <= std::numbers::pi);
  }
}

TEST_CASE("zero speed still rotates") {
  const HeadingDeltaModel m = single_bucket(1.0, 0.0);
  VehicleState s;
  s.speed = 0.0;
  s.heading = 0.0;
  const VehicleState next = step_vehicle(s, m, 0.12, 30.0, 0.0);
  CHECK(next.position.x() == 0.0);
  CHECK(next.position.y() == 0.0);
  CHECK(next.heading == doctest::Approx(0.12));
}

TEST_CASE("displacement magnitude is exactly speed*dt") {
  const HeadingDeltaModel m = single_bucket(0.7, 0.01);
  RngStream r(11, 0);
  VehicleState s;
  s.speed = 1.3;
  for (int i = 0; i < 200; ++i) {
    const double gamma = r.uniform(-0.24, 0.24);
    const VehicleState next = step_vehicle(s, m, gamma, 30.0, 0.0);
    const double dx = next.position.x() - s.position.x();
    const double dy = next.position.y() - s.position.y();
    CHECK(std::hypot(dx, dy) == doctest::Approx(1.3 * 30.0).epsilon(1e-12));
    s = next;
  }
}

TEST_CASE("mirrored rudder mirrors the trajectory about the heading axis") {
  const HeadingDeltaModel m = single_bucket(0.8, 0.0);
  VehicleState pos, neg;
  pos.speed = neg.speed = 1.0;
  RngStream r(17, 0);
  std::vector<double> gammas;
  for (int i = 0; i < 40; ++i) gammas.push_back(r.uniform(-0.24, 0.24));
  for (double g : gammas) {
    pos = step_vehicle(pos, m, g, 30.0, 0.0);
    neg = step_vehicle(neg, m, -g, 30.0, 0.0);
  }
  CHECK(pos.position.x() == doctest::Approx(neg.position.x()).epsilon(1e-9));
  CHECK(pos.position.y() == doctest::Approx(-neg.position.y()).epsilon(1e-9));
  CHECK(pos.heading == doctest::Approx(-neg.heading).epsilon(1e-9));
}

TEST_CASE("step_vehicle is bit-deterministic") {
  const HeadingDeltaModel m = single_bucket(0.6, 0.002);
  VehicleState s;
  s.speed = 1.0;
  s.heading = 0.4;
  const VehicleState a = step_vehicle(s, m, 0.12, 30.0, 0.005);
  const VehicleState b = step_vehicle(s, m, 0.12, 30.0, 0.005);
  CHECK(a.position.x() == b.position.x());
  CHECK(a.position.y() == b.position.y());
  CHECK(a.heading == b.heading);
}

TEST_CASE("reference oracle basics") {
  CHECK(reference_turn_oracle(0.0, 1.0, 30.0) == 0.0);
  RngStream r(23, 0);
  for (int i = 0; i < 200; ++i) {
    const double g = r.uniform(-0.24, 0.24);
    if (g == 0.0) continue;
    CHECK(std::signbit(reference_turn_oracle(g, 1.0, 30.0)) == std::signbit(g));
  }
  CHECK_THROWS_AS(reference_turn_oracle(0.25, 1.0, 30.0), std::domain_error);
  CHECK_THROWS_AS(reference_turn_oracle(-0.3, 1.0, 30.0), std::domain_error);
}

TEST_CASE("reference oracle is linear in dt") {
  RngStream r(29, 0);
  for (int i = 0; i < 100; ++i) {
    const double g = r.uniform(-0.24, 0.24);
    const double v = r.uniform(0.2, 2.0);
    const double dt = r.uniform(1.0, 120.0);
    CHECK(reference_turn_oracle(g, v, dt) ==
          doctest::Approx(dt / 30.0 * reference_turn_oracle(g, v, 30.0))
              .epsilon(1e-12));
  }
}

TEST_CASE("noiseless linear data is recovered exactly") {
  CalibrationDataset data;
  for (int i = 0; i < 50; ++i) {
    const double g = -0.24 + 0.48 * i / 49.0;
    data.push_back({g, 1.0, 30.0, 0.5 * g});
  }
  const FitReport fit = fit_heading_model(data);
  const LinearCoeffs& c = fit.model.bucket(1.0, 30.0);
  CHECK(c.a == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(std::abs(c.b) < 1e-9);
  CHECK(fit.bucket_mae.at({1.0, 30.0}) < 1e-12);
  CHECK(fit.global_r2 == doctest::Approx(1.0));
}

TEST_CASE("flat data fits a constant") {
  CalibrationDataset data;
  for (int i = 0; i < 20; ++i) {
    const double g = -0.24 + 0.48 * i / 19.0;
    data.push_back({g, 1.0, 30.0, 0.125});
  }
  const FitReport fit = fit_heading_model(data);
  const LinearCoeffs& c = fit.model.bucket(1.0, 30.0);
  CHECK(std::abs(c.a) < 1e-12);
  CHECK(c.b == doctest::Approx(0.125));
}

TEST_CASE("bucket with fewer than two distinct rudder values fails") {
  CalibrationDataset data;
  for (int i = 0; i < 8; ++i) data.push_back({0.12, 1.0, 30.0, 0.05});
  CHECK_THROWS_AS(fit_heading_model(data), DataError);
}

TEST_CASE("noisy oracle fit hits the published quality bar") {
  const CalibrationDataset data =
      synth_calibration({0.5, 1.0}, {30.0, 60.0}, 200, 0.005, 1234);
  const FitReport fit = fit_heading_model(data);
  CHECK(fit.global_r2 > 0.99);
  for (const auto& [key, mae] : fit.bucket_mae) CHECK(mae < 0.015);

  // fitted prediction at the rudder extreme stays within the MAE bar
  const double pred = heading_delta(fit.model, 0.24, 1.0, 30.0);
  const double truth = reference_turn_oracle(0.24, 1.0, 30.0);
  CHECK(std::abs(pred - truth) < 0.015);
}

TEST_CASE("calibration CSV round trip and errors") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "utrack_kin_test";
  fs::create_directories(dir);
  const std::string path = (dir / "cal.csv").string();

  {
    std::ofstream out(path);
    out << "gamma,speed,dt,dpsi\n";
    out << "0.1,1.0,30.0,0.45\n";
    out << "-0.1,1.0,30.0,-0.45\n";
  }
  const CalibrationDataset data = load_calibration_csv(path);
  REQUIRE(data.size() == 2);
  CHECK(data[0].gamma == doctest::Approx(0.1));
  CHECK(data[1].dpsi == doctest::Approx(-0.45));
  const FitReport fit = fit_heading_model(data);
  CHECK(fit.model.bucket(1.0, 30.0).a == doctest::Approx(4.5));

  {
    std::ofstream out(path);
    out << "gamma,speed,dt,dpsi\n";
    out << "0.1,1.0,30.0\n";
  }
  CHECK_THROWS_WITH_AS(load_calibration_csv(path), doctest::Contains(":2"),
                       DataError);

  {
    std::ofstream out(path);
    out << "bad,header\n";
  }
  CHECK_THROWS_AS(load_calibration_csv(path), DataError);
  CHECK_THROWS_AS(load_calibration_csv((dir / "missing.csv").string()), DataError);
}

TEST_CASE("default model covers the standard cruise bucket") {
  const HeadingDeltaModel m = default_heading_model();
  CHECK(m.has_bucket(1.0, 30.0));
  CHECK(m.noise_std() == doctest::Approx(0.02));
  CHECK(std::abs(heading_delta(m, 0.0, 1.0, 30.0)) < 1e-9);
  // close to the oracle at mid-range rudder
  CHECK(heading_delta(m, 0.12, 1.0, 30.0) ==
        doctest::Approx(reference_turn_oracle(0.12, 1.0, 30.0)).epsilon(0.02));
}
