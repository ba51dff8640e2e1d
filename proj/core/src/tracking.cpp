#include "utrack/tracking.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

namespace utrack {

HorizontalRange slant_to_horizontal(double range_3d, double depth_diff) {
  if (range_3d < 0.0) throw ContractViolation("range_3d must be >= 0");
  const double sq = range_3d * range_3d - depth_diff * depth_diff;
  if (sq <= 0.0) return {0.0, std::abs(depth_diff) > range_3d};
  return {std::sqrt(sq), false};
}

namespace {

constexpr float kTwoPiF = 2.0f * std::numbers::pi_v<float>;

// Fills buf[0..m) with standard normals (Box-Muller over fused vector
// passes). m must be even; consumes exactly m u32 draws. Noise is generated
// in single precision: it feeds meter-scale diffusion, where float grain is
// orders of magnitude below the process noise itself.
void fill_normals(RngStream& rng, Eigen::ArrayXf& stage, Eigen::ArrayXf& out,
                  Eigen::Index m) {
  const Eigen::Index half = m / 2;
  auto u1 = stage.head(half);
  auto u2 = stage.segment(half, half);
  for (Eigen::Index i = 0; i < half; ++i)
    u1[i] = static_cast<float>((rng.next_u32() >> 8) + 1) * 0x1.0p-24f;  // (0,1]
  for (Eigen::Index i = 0; i < half; ++i)
    u2[i] = static_cast<float>(rng.next_u32() >> 8) * 0x1.0p-24f;  // [0,1)

  auto r = ((-2.0f) * u1.log()).sqrt();
  out.head(half) = r * (kTwoPiF * u2).cos();
  out.segment(half, half) = r * (kTwoPiF * u2).sin();
}

}  // namespace

namespace pf {

ParticleSet init(const Eigen::Vector2d& center_xy, double radius,
                 int n_particles, double max_speed, RngStream rng) {
  if (n_particles < 1) throw ContractViolation("pf_init: n_particles must be >= 1");
  if (radius <= 0.0) throw ContractViolation("pf_init: radius must be > 0");

  ParticleSet ps;
  const Eigen::Index n = n_particles;
  ps.px.resize(n);
  ps.py.resize(n);
  ps.vx.resize(n);
  ps.vy.resize(n);
  ps.w.setConstant(n, 1.0 / static_cast<double>(n));
  ps.max_speed = max_speed;
  ps.rng = rng;

  ps.noise.resize(4 * n);
  ps.stage.resize(4 * n);
  ps.loglik.resize(n);
  ps.sx.resize(n);
  ps.sy.resize(n);
  ps.svx.resize(n);
  ps.svy.resize(n);

  reinit(ps, center_xy, radius, max_speed);
  return ps;
}

ParticleSet init(const Eigen::Vector2d& center_xy, double radius,
                 int n_particles, double max_speed, std::uint64_t seed) {
  return init(center_xy, radius, n_particles, max_speed,
              RngStream(RngStream::derive_key(seed, 0x7066u), 0));  // "pf"
}

void reinit(ParticleSet& ps, const Eigen::Vector2d& center_xy, double radius,
            double max_speed) {
  if (radius <= 0.0) throw ContractViolation("pf_init: radius must be > 0");
  const Eigen::Index n = ps.size();
  ps.max_speed = max_speed;
  ps.w.setConstant(1.0 / static_cast<double>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = radius * std::sqrt(ps.rng.uniform());
    const double a = 2.0 * std::numbers::pi * ps.rng.uniform();
    ps.px[i] = center_xy.x() + r * std::cos(a);
    ps.py[i] = center_xy.y() + r * std::sin(a);
    const double s = max_speed * ps.rng.uniform();
    const double d = 2.0 * std::numbers::pi * ps.rng.uniform();
    ps.vx[i] = s * std::cos(d);
    ps.vy[i] = s * std::sin(d);
  }
}

void predict(ParticleSet& ps, double dt, double process_noise_pos,
             double process_noise_vel) {
  if (dt <= 0.0) throw ContractViolation("pf_predict: dt must be > 0");
  const Eigen::Index n = ps.size();

  ps.px += ps.vx * dt;
  ps.py += ps.vy * dt;

  if (process_noise_pos > 0.0 || process_noise_vel > 0.0) {
    fill_normals(ps.rng, ps.stage, ps.noise, 4 * n);
    ps.px += process_noise_pos * ps.noise.segment(0, n).cast<double>();
    ps.py += process_noise_pos * ps.noise.segment(n, n).cast<double>();
    ps.vx += process_noise_vel * ps.noise.segment(2 * n, n).cast<double>();
    ps.vy += process_noise_vel * ps.noise.segment(3 * n, n).cast<double>();
  }

  if (ps.max_speed > 0.0) {
    ps.loglik = (ps.vx.square() + ps.vy.square()).sqrt();  // reuse as speed
    const auto& s = ps.loglik;
    ps.sx = (s > ps.max_speed).select(ps.max_speed / s, 1.0);
    ps.vx *= ps.sx;
    ps.vy *= ps.sx;
  }
}

bool update(ParticleSet& ps, std::span<const RangeMeasurement> meas) {
  if (meas.empty()) throw ContractViolation("pf_update: needs >= 1 measurement");
  const Eigen::Index n = ps.size();

  // Log-likelihoods, max-shifted before exponentiation; per-measurement
  // normalization constants cancel in the weight renormalization.
  ps.loglik.setZero();
  for (const RangeMeasurement& m : meas) {
    ps.sx = ((ps.px - m.origin_xy.x()).square() +
             (ps.py - m.origin_xy.y()).square())
                .sqrt();
    ps.loglik -= 0.5 * ((ps.sx - m.range_2d) / m.noise_std).square();
  }
  const double shift = ps.loglik.maxCoeff();
  if (std::isfinite(shift)) {
    ps.w *= (ps.loglik - shift).exp();
    const double sum = ps.w.sum();
    if (std::isfinite(sum) && sum > 0.0) {
      ps.w /= sum;
      return false;
    }
  }
  ps.w.setConstant(1.0 / static_cast<double>(n));
  return true;
}

double ess(const ParticleSet& ps) { return 1.0 / ps.w.square().sum(); }

void resample(ParticleSet& ps) {
  const Eigen::Index n = ps.size();
  const double u0 = ps.rng.uniform();
  const double inv_n = 1.0 / static_cast<double>(n);

  Eigen::Index i = 0;
  double cum = ps.w[0];
  for (Eigen::Index j = 0; j < n; ++j) {
    const double u = (static_cast<double>(j) + u0) * inv_n;
    while (cum < u && i < n - 1) {
      ++i;
      cum += ps.w[i];
    }
    ps.sx[j] = ps.px[i];
    ps.sy[j] = ps.py[i];
    ps.svx[j] = ps.vx[i];
    ps.svy[j] = ps.vy[i];
  }
  ps.px = ps.sx;
  ps.py = ps.sy;
  ps.vx = ps.svx;
  ps.vy = ps.svy;
  ps.w.setConstant(inv_n);
}

bool maybe_resample(ParticleSet& ps) {
  if (ess(ps) < static_cast<double>(ps.size()) / 2.0) {
    resample(ps);
    return true;
  }
  return false;
}

TrackEstimate estimate(const ParticleSet& ps) {
  TrackEstimate est;
  est.position_xy.x() = (ps.w * ps.px).sum();
  est.position_xy.y() = (ps.w * ps.py).sum();
  est.spread = std::sqrt((ps.w * ((ps.px - est.position_xy.x()).square() +
                                  (ps.py - est.position_xy.y()).square()))
                             .sum());
  return est;
}

}  // namespace pf

Eigen::Vector2d ls_trilaterate(std::span<const RangeMeasurement> meas) {
  if (meas.size() < 3)
    throw DataError("ls_trilaterate: needs >= 3 measurements, got " +
                    std::to_string(meas.size()));

  const Eigen::Index rows = static_cast<Eigen::Index>(meas.size()) - 1;
  Eigen::MatrixXd A(rows, 2);
  Eigen::VectorXd b(rows);
  const Eigen::Vector2d& p0 = meas[0].origin_xy;
  const double r0 = meas[0].range_2d;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const RangeMeasurement& m = meas[static_cast<std::size_t>(i) + 1];
    A(i, 0) = 2.0 * (p0.x() - m.origin_xy.x());
    A(i, 1) = 2.0 * (p0.y() - m.origin_xy.y());
    b(i) = m.range_2d * m.range_2d - r0 * r0 + p0.squaredNorm() -
           m.origin_xy.squaredNorm();
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(1) <= 1e-10 * sv(0) || sv(0) == 0.0)
    throw DataError("ls_trilaterate: measurement origins are collinear");
  return svd.solve(b);
}

}  // namespace utrack
