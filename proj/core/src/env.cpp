#include "utrack/env.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace utrack {

namespace {

double horizontal_dist(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  return std::hypot(a.x() - b.x(), a.y() - b.y());
}

class PhaseTimer {
 public:
  PhaseTimer(bool enabled, std::uint64_t& sink) : enabled_(enabled), sink_(sink) {
    if (enabled_) start_ = std::chrono::steady_clock::now();
  }
  ~PhaseTimer() {
    if (enabled_) {
      sink_ += static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::nanoseconds>(
              std::chrono::steady_clock::now() - start_)
              .count());
    }
  }

 private:
  bool enabled_;
  std::uint64_t& sink_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

void EnvConfig::finalize() {
  if (heading_model.buckets().empty()) heading_model = default_heading_model();

  if (n_agents < 1) throw ConfigError("env.n_agents must be >= 1");
  if (n_targets < 1) throw ConfigError("env.n_targets must be >= 1");
  if (horizon < 1) throw ConfigError("env.horizon must be >= 1");
  if (dt <= 0.0) throw ConfigError("env.dt must be > 0");
  if (agent_speed <= 0.0) throw ConfigError("env.agent_speed must be > 0");
  if (target_speed_frac < 0.0) throw ConfigError("env.target_speed_frac must be >= 0");
  if (target_turn_interval < 1.0)
    throw ConfigError("env.target_turn_interval must be >= 1 step");
  if (eps_min >= eps_max) throw ConfigError("env.eps_min must be < env.eps_max");
  if (spawn_min_sep >= spawn_max_sep)
    throw ConfigError("env.spawn_min_sep must be < env.spawn_max_sep");
  if (comm_drop_prob < 0.0 || comm_drop_prob > 1.0)
    throw ConfigError("env.comm_drop_prob must be in [0, 1]");
  if (range_noise_std < 0.0) throw ConfigError("env.range_noise_std must be >= 0");
  if (target_depth_min < 0.0 || target_depth_max < target_depth_min)
    throw ConfigError("env.target_depth band must satisfy 0 <= min <= max");
  if (lost_steps < 1) throw ConfigError("env.lost_steps must be >= 1");
  if (pf.n_particles < 1) throw ConfigError("env.pf.n_particles must be >= 1");
  if (pf.init_radius <= 0.0) throw ConfigError("env.pf.init_radius must be > 0");

  // Fail now, not mid-episode, if the model cannot serve the configured step.
  heading_model.bucket(agent_speed, dt);
}

double rudder_angle(int index) {
  if (index < 0 || index >= kNumActions)
    throw ContractViolation("rudder index out of range: " + std::to_string(index));
  return -0.24 + 0.12 * index;
}

std::array<bool, kNumActions> valid_actions(int rudder_index) {
  if (rudder_index < 0 || rudder_index >= kNumActions)
    throw ContractViolation("rudder index out of range: " +
                            std::to_string(rudder_index));
  std::array<bool, kNumActions> mask{};
  for (int i = 0; i < kNumActions; ++i)
    mask[static_cast<std::size_t>(i)] = std::abs(i - rudder_index) <= 1;
  return mask;
}

double tracking_reward_single(double error, const EnvConfig& cfg) {
  if (error < cfg.eps_min) return 1.0;
  if (error > cfg.eps_max) return 0.0;
  const double t = (error - cfg.eps_min) / (cfg.eps_max - cfg.eps_min);
  if (t >= 1.0) return 0.0;
  return std::exp(-2.0 * t / (1.0 - t));
}

double tracking_reward(std::span<const double> errors, const EnvConfig& cfg) {
  double sum = 0.0;
  for (double e : errors) sum += tracking_reward_single(e, cfg);
  return sum / static_cast<double>(errors.size());
}

double follow_reward(std::span<const double> min_dists, const EnvConfig& cfg) {
  double sum = 0.0;
  for (double d : min_dists) sum += (d <= cfg.d_min) ? 1.0 : 0.0;
  return sum / static_cast<double>(min_dists.size());
}

bool crash_check(std::span<const VehicleState> agents, double d_safe) {
  for (std::size_t i = 0; i + 1 < agents.size(); ++i)
    for (std::size_t j = i + 1; j < agents.size(); ++j)
      if ((agents[i].position - agents[j].position).norm() < d_safe) return true;
  return false;
}

Environment::Environment(EnvConfig cfg, std::uint64_t seed, int env_index)
    : cfg_(std::move(cfg)) {
  cfg_.finalize();
  rng_ = RngStream(RngStream::derive_key(seed, 0x656e76u, static_cast<std::uint64_t>(env_index)),
                   static_cast<std::uint64_t>(env_index));
  max_turn_per_step_ =
      std::abs(heading_delta(cfg_.heading_model, kMaxRudderAngle, cfg_.agent_speed, cfg_.dt));

  const auto na = static_cast<std::size_t>(cfg_.n_agents);
  const auto nt = static_cast<std::size_t>(cfg_.n_targets);

  world_.agents.resize(na);
  world_.targets.resize(nt);
  world_.target_motion.resize(nt);
  world_.target_miss_streak.assign(nt, 0);
  world_.knowledge.resize(na);
  for (std::size_t a = 0; a < na; ++a) {
    world_.knowledge[a].agents.resize(na);
    world_.knowledge[a].targets.resize(nt);
    for (std::size_t t = 0; t < nt; ++t) {
      RngStream pf_rng(
          RngStream::derive_key(seed, 0x7066u, static_cast<std::uint64_t>(env_index),
                                a * nt + t),
          a * nt + t);
      world_.knowledge[a].targets[t].particles =
          pf::init(Eigen::Vector2d::Zero(), cfg_.pf.init_radius, cfg_.pf.n_particles,
                   1.0, pf_rng);
    }
  }

  meas_.resize(na * nt);
  meas_present_.assign(na * nt, 0);
  meas_fresh_age_.assign(na * nt, 0);
  obs_.resize(na);
  for (auto& m : obs_) m.setZero(cfg_.n_entities(), kFeatureDim);
  global_.setZero(cfg_.n_entities(), kFeatureDim);
  out_.tracking_error.assign(nt, 0.0);
  out_.min_agent_dist.assign(nt, 0.0);
  out_.target_lost.assign(nt, 0);

  spawn();
}

void Environment::reset() { spawn(); }

void Environment::spawn() {
  const int na = cfg_.n_agents;
  const int nt = cfg_.n_targets;
  const int ne = cfg_.n_entities();

  episode_target_speed_ = cfg_.target_speed_lo();
  if (cfg_.target_speed_hi() > cfg_.target_speed_lo())
    episode_target_speed_ = rng_.uniform(cfg_.target_speed_lo(), cfg_.target_speed_hi());

  // Whole-configuration rejection sampling inside the disc of diameter
  // spawn_max_sep; only the minimum separation can fail.
  const double disc_r = cfg_.spawn_max_sep / 2.0;
  std::vector<Eigen::Vector2d> pos(static_cast<std::size_t>(ne));
  bool placed = false;
  for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
    for (auto& p : pos) {
      const double r = disc_r * std::sqrt(rng_.uniform());
      const double a = 2.0 * std::numbers::pi * rng_.uniform();
      p = {r * std::cos(a), r * std::sin(a)};
    }
    placed = true;
    for (std::size_t i = 0; i + 1 < pos.size() && placed; ++i)
      for (std::size_t j = i + 1; j < pos.size() && placed; ++j)
        if ((pos[i] - pos[j]).norm() < cfg_.spawn_min_sep) placed = false;
  }
  if (!placed) {
    std::ostringstream os;
    os << "spawn infeasible after 1000 attempts: " << ne << " entities with "
       << "separation in [" << cfg_.spawn_min_sep << ", " << cfg_.spawn_max_sep
       << "] m";
    throw ConfigError(os.str());
  }

  for (int a = 0; a < na; ++a) {
    VehicleState& v = world_.agents[static_cast<std::size_t>(a)];
    v.position = {pos[static_cast<std::size_t>(a)].x(), pos[static_cast<std::size_t>(a)].y(), 0.0};
    v.heading = wrap_angle(2.0 * std::numbers::pi * rng_.uniform());
    v.speed = cfg_.agent_speed;
    v.rudder_index = 2;
  }
  for (int t = 0; t < nt; ++t) {
    VehicleState& v = world_.targets[static_cast<std::size_t>(t)];
    const auto& p = pos[static_cast<std::size_t>(na + t)];
    const double depth = rng_.uniform(cfg_.target_depth_min, cfg_.target_depth_max);
    v.position = {p.x(), p.y(), depth};
    v.heading = wrap_angle(2.0 * std::numbers::pi * rng_.uniform());
    v.speed = episode_target_speed_;
    v.rudder_index = 2;
    TargetMotion& m = world_.target_motion[static_cast<std::size_t>(t)];
    m.commanded_heading = v.heading;
    m.countdown = static_cast<int>(rng_.geometric(cfg_.target_turn_interval));
  }

  const double particle_speed = cfg_.pf.speed_margin * episode_target_speed_;
  for (int a = 0; a < na; ++a) {
    KnowledgeBase& kb = world_.knowledge[static_cast<std::size_t>(a)];
    for (auto& info : kb.agents) info = AgentInfo{};
    const Eigen::Vector2d self_xy =
        world_.agents[static_cast<std::size_t>(a)].position.head<2>();
    for (int t = 0; t < nt; ++t) {
      TargetTrack& track = kb.targets[static_cast<std::size_t>(t)];
      pf::reinit(track.particles, self_xy, cfg_.pf.init_radius, particle_speed);
      track.estimate = pf::estimate(track.particles);
      track.estimate.age = 0;
      track.ever_measured = false;
    }
  }

  std::fill(world_.target_miss_streak.begin(), world_.target_miss_streak.end(), 0);
  std::fill(meas_present_.begin(), meas_present_.end(), 0);
  world_.step = 0;

  out_.reward = 0.0;
  out_.done = false;
  out_.collision = false;

  build_global_state();
  for (int a = 0; a < na; ++a) build_observation(a);
}

const StepOutput& Environment::step(std::span<const int> actions) {
  if (static_cast<int>(actions.size()) != cfg_.n_agents)
    throw ContractViolation("step: expected " + std::to_string(cfg_.n_agents) +
                            " actions, got " + std::to_string(actions.size()));
  for (int a = 0; a < cfg_.n_agents; ++a) {
    const int act = actions[static_cast<std::size_t>(a)];
    if (act < 0 || act >= kNumActions ||
        !valid_actions(world_.agents[static_cast<std::size_t>(a)].rudder_index)
             [static_cast<std::size_t>(act)]) {
      throw ContractViolation("step: invalid action " + std::to_string(act) +
                              " for agent " + std::to_string(a) + " at rudder index " +
                              std::to_string(world_.agents[static_cast<std::size_t>(a)].rudder_index));
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kTargets)]);
    move_targets();
  }
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kAgents)]);
    move_agents(actions);
  }
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kMeasure)]);
    measure_ranges();
  }
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kFilter)]);
    filter_step();
  }
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kComms)]);
    exchange_comms();
  }
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kObserve)]);
    build_global_state();
    for (int a = 0; a < cfg_.n_agents; ++a) build_observation(a);
  }
  {
    PhaseTimer t(timing_enabled_, phase_ns_[static_cast<int>(StepPhase::kReward)]);
    compute_reward_and_info();
  }
  if (timing_enabled_) {
    total_step_ns_ += static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now() - t0)
            .count());
  }
  return out_;
}

void Environment::move_targets() {
  for (int t = 0; t < cfg_.n_targets; ++t) {
    VehicleState& v = world_.targets[static_cast<std::size_t>(t)];
    TargetMotion& m = world_.target_motion[static_cast<std::size_t>(t)];
    if (m.countdown <= 0) {
      m.commanded_heading = wrap_angle(2.0 * std::numbers::pi * rng_.uniform());
      m.countdown = static_cast<int>(rng_.geometric(cfg_.target_turn_interval));
    }
    const double want = wrap_angle(m.commanded_heading - v.heading);
    const double dpsi = std::clamp(want, -max_turn_per_step_, max_turn_per_step_);
    const double sigma = cfg_.heading_model.noise_std();
    const double noise = sigma > 0.0 ? sigma * rng_.normal() : 0.0;
    v = advance_vehicle(v, dpsi, cfg_.dt, noise);
    --m.countdown;
  }
}

void Environment::move_agents(std::span<const int> actions) {
  for (int a = 0; a < cfg_.n_agents; ++a) {
    VehicleState& v = world_.agents[static_cast<std::size_t>(a)];
    v.rudder_index = actions[static_cast<std::size_t>(a)];
    const double gamma = rudder_angle(v.rudder_index);
    const double sigma = cfg_.heading_model.noise_std();
    double noise = sigma > 0.0 ? sigma * rng_.normal() : 0.0;
    if (cfg_.perturbation_std > 0.0) noise += cfg_.perturbation_std * rng_.normal();
    v = step_vehicle(v, cfg_.heading_model, gamma, cfg_.dt, noise);
  }
}

void Environment::measure_ranges() {
  for (int t = 0; t < cfg_.n_targets; ++t) {
    bool detected = false;
    for (int a = 0; a < cfg_.n_agents; ++a) {
      const std::size_t idx = static_cast<std::size_t>(a * cfg_.n_targets + t);
      meas_present_[idx] = 0;
      const VehicleState& av = world_.agents[static_cast<std::size_t>(a)];
      const VehicleState& tv = world_.targets[static_cast<std::size_t>(t)];
      const double dist3 = (av.position - tv.position).norm();
      if (dist3 > cfg_.detection_range) continue;
      if (cfg_.comm_drop_prob > 0.0 && rng_.uniform() < cfg_.comm_drop_prob) continue;

      double r3 = dist3;
      if (cfg_.range_noise_std > 0.0) r3 += cfg_.range_noise_std * rng_.normal();
      r3 = std::max(r3, 0.0);
      const double depth_diff = tv.position.z() - av.position.z();
      const HorizontalRange hr = slant_to_horizontal(r3, depth_diff);

      RangeMeasurement& m = meas_[idx];
      m.origin_xy = av.position.head<2>();
      m.range_2d = hr.range_2d;
      m.noise_std = std::max(cfg_.range_noise_std, 0.1);  // likelihood floor
      m.step_index = world_.step;
      meas_present_[idx] = 1;
      detected = true;
    }
    auto& streak = world_.target_miss_streak[static_cast<std::size_t>(t)];
    streak = detected ? 0 : streak + 1;
  }
}

void Environment::filter_step() {
  for (int a = 0; a < cfg_.n_agents; ++a) {
    for (int t = 0; t < cfg_.n_targets; ++t) {
      const std::size_t idx = static_cast<std::size_t>(a * cfg_.n_targets + t);
      ParticleSet& ps =
          world_.knowledge[static_cast<std::size_t>(a)].targets[static_cast<std::size_t>(t)].particles;
      pf::predict(ps, cfg_.dt, cfg_.pf.process_noise_pos, cfg_.pf.process_noise_vel);
      meas_fresh_age_[idx] = 0;
      if (meas_present_[idx]) {
        pf::update(ps, {&meas_[idx], 1});
        meas_fresh_age_[idx] = 1;
      }
    }
  }
}

void Environment::exchange_comms() {
  // Everything ages first; successful contacts below reset to zero.
  for (auto& kb : world_.knowledge)
    for (auto& info : kb.agents) ++info.age;

  for (int r = 0; r < cfg_.n_agents; ++r) {
    KnowledgeBase& kb = world_.knowledge[static_cast<std::size_t>(r)];
    for (int s = 0; s < cfg_.n_agents; ++s) {
      if (s == r) continue;
      const VehicleState& rv = world_.agents[static_cast<std::size_t>(r)];
      const VehicleState& sv = world_.agents[static_cast<std::size_t>(s)];
      if ((rv.position - sv.position).norm() > cfg_.comm_range) continue;
      if (cfg_.comm_drop_prob > 0.0 && rng_.uniform() < cfg_.comm_drop_prob) continue;

      AgentInfo& info = kb.agents[static_cast<std::size_t>(s)];
      info.position = sv.position;
      info.heading = sv.heading;
      info.age = 0;
      info.valid = true;

      // Fuse the sender's fresh ranges into the receiver's own filters;
      // particle sets themselves are never shared.
      for (int t = 0; t < cfg_.n_targets; ++t) {
        const std::size_t sidx = static_cast<std::size_t>(s * cfg_.n_targets + t);
        if (!meas_present_[sidx]) continue;
        const std::size_t ridx = static_cast<std::size_t>(r * cfg_.n_targets + t);
        pf::update(kb.targets[static_cast<std::size_t>(t)].particles, {&meas_[sidx], 1});
        meas_fresh_age_[ridx] = 1;
      }
    }
  }

  // Finalize every filter: resample if degenerate, refresh the estimate.
  for (int a = 0; a < cfg_.n_agents; ++a) {
    for (int t = 0; t < cfg_.n_targets; ++t) {
      const std::size_t idx = static_cast<std::size_t>(a * cfg_.n_targets + t);
      TargetTrack& track =
          world_.knowledge[static_cast<std::size_t>(a)].targets[static_cast<std::size_t>(t)];
      pf::maybe_resample(track.particles);
      const int prev_age = track.estimate.age;
      track.estimate = pf::estimate(track.particles);
      track.estimate.age = meas_fresh_age_[idx] ? 0 : prev_age + 1;
      track.ever_measured = track.ever_measured || meas_fresh_age_[idx] != 0;
    }
  }
}

void Environment::build_observation(int agent) {
  EntityTokenMatrix& m = obs_[static_cast<std::size_t>(agent)];
  m.setZero();
  const VehicleState& self = world_.agents[static_cast<std::size_t>(agent)];
  const KnowledgeBase& kb = world_.knowledge[static_cast<std::size_t>(agent)];

  for (int j = 0; j < cfg_.n_agents; ++j) {
    if (j == agent) {
      m(j, kColSinH) = std::sin(self.heading);
      m(j, kColCosH) = std::cos(self.heading);
      m(j, kColSpeed) = self.speed / kSpeedScale;
      m(j, kColSelf) = 1.0;
      m(j, kColValid) = 1.0;
      continue;
    }
    m(j, kColAgent) = 1.0;
    const AgentInfo& info = kb.agents[static_cast<std::size_t>(j)];
    if (!info.valid) continue;  // zeros + validity 0 until first contact
    m(j, kColDx) = (info.position.x() - self.position.x()) / kPosScale;
    m(j, kColDy) = (info.position.y() - self.position.y()) / kPosScale;
    m(j, kColDz) = (info.position.z() - self.position.z()) / kPosScale;
    m(j, kColSinH) = std::sin(info.heading);
    m(j, kColCosH) = std::cos(info.heading);
    m(j, kColSpeed) = cfg_.agent_speed / kSpeedScale;
    m(j, kColValid) = 1.0;
    m(j, kColAge) = info.age / kAgeScale;
  }

  for (int t = 0; t < cfg_.n_targets; ++t) {
    const int row = cfg_.n_agents + t;
    m(row, kColTarget) = 1.0;
    const TargetTrack& track = kb.targets[static_cast<std::size_t>(t)];
    if (!track.ever_measured) continue;
    const VehicleState& tv = world_.targets[static_cast<std::size_t>(t)];
    m(row, kColDx) = (track.estimate.position_xy.x() - self.position.x()) / kPosScale;
    m(row, kColDy) = (track.estimate.position_xy.y() - self.position.y()) / kPosScale;
    m(row, kColDz) = (tv.position.z() - self.position.z()) / kPosScale;  // depth is known
    m(row, kColValid) = 1.0;
    m(row, kColAge) = track.estimate.age / kAgeScale;
    m(row, kColSpread) = track.estimate.spread / kSpreadScale;
  }
}

void Environment::build_global_state() {
  global_.setZero();
  auto fill = [&](int row, const VehicleState& v, bool is_agent) {
    global_(row, kColDx) = v.position.x() / kPosScale;
    global_(row, kColDy) = v.position.y() / kPosScale;
    global_(row, kColDz) = v.position.z() / kPosScale;
    global_(row, kColSinH) = std::sin(v.heading);
    global_(row, kColCosH) = std::cos(v.heading);
    global_(row, kColSpeed) = v.speed / kSpeedScale;
    global_(row, is_agent ? kColAgent : kColTarget) = 1.0;
    global_(row, kColValid) = 1.0;
  };
  for (int a = 0; a < cfg_.n_agents; ++a)
    fill(a, world_.agents[static_cast<std::size_t>(a)], true);
  for (int t = 0; t < cfg_.n_targets; ++t)
    fill(cfg_.n_agents + t, world_.targets[static_cast<std::size_t>(t)], false);
}

void Environment::compute_reward_and_info() {
  const auto nt = static_cast<std::size_t>(cfg_.n_targets);
  for (std::size_t t = 0; t < nt; ++t) {
    const VehicleState& tv = world_.targets[t];
    const Eigen::Vector2d true_xy = tv.position.head<2>();

    double best_err = std::numeric_limits<double>::infinity();
    for (int a = 0; a < cfg_.n_agents; ++a) {
      const TargetTrack& track = world_.knowledge[static_cast<std::size_t>(a)].targets[t];
      best_err = std::min(best_err, (track.estimate.position_xy - true_xy).norm());
    }
    out_.tracking_error[t] = best_err;

    double best_dist = std::numeric_limits<double>::infinity();
    for (const VehicleState& av : world_.agents)
      best_dist = std::min(best_dist, horizontal_dist(av.position, tv.position));
    out_.min_agent_dist[t] = best_dist;

    out_.target_lost[t] = world_.target_miss_streak[t] >= cfg_.lost_steps ? 1 : 0;
  }

  out_.collision = crash_check(world_.agents, cfg_.d_safe);
  if (out_.collision) {
    out_.reward = -1.0;
  } else if (cfg_.reward_mode == RewardMode::kTracking) {
    out_.reward = tracking_reward(out_.tracking_error, cfg_);
  } else {
    out_.reward = follow_reward(out_.min_agent_dist, cfg_);
  }

  ++world_.step;
  out_.done = world_.step >= cfg_.horizon;
}

std::array<bool, kNumActions> Environment::action_mask(int agent) const {
  return valid_actions(world_.agents[static_cast<std::size_t>(agent)].rudder_index);
}

int Environment::scripted_action(int agent) const {
  const VehicleState& self = world_.agents[static_cast<std::size_t>(agent)];
  const KnowledgeBase& kb = world_.knowledge[static_cast<std::size_t>(agent)];

  // Head for the nearest track estimate (prior included: better than idling).
  Eigen::Vector2d goal = self.position.head<2>();
  double best = std::numeric_limits<double>::infinity();
  for (const TargetTrack& track : kb.targets) {
    const double d = (track.estimate.position_xy - self.position.head<2>()).norm();
    const double penalty = track.ever_measured ? 0.0 : 1e6;
    if (d + penalty < best) {
      best = d + penalty;
      goal = track.estimate.position_xy;
    }
  }

  const double desired =
      std::atan2(goal.y() - self.position.y(), goal.x() - self.position.x());
  const auto mask = action_mask(agent);
  int best_act = self.rudder_index;
  double best_misalign = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kNumActions; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const double dpsi =
        heading_delta(cfg_.heading_model, rudder_angle(i), cfg_.agent_speed, cfg_.dt);
    const double misalign = std::abs(wrap_angle(self.heading + dpsi - desired));
    if (misalign < best_misalign) {
      best_misalign = misalign;
      best_act = i;
    }
  }
  return best_act;
}

void Environment::reset_timing() {
  phase_ns_.fill(0);
  total_step_ns_ = 0;
}

std::vector<double> Environment::serialize_state() const {
  std::vector<double> blob;
  auto push_rng = [&blob](const RngStream& r) {
    const RngStream::State s = r.state();
    blob.push_back(static_cast<double>(s.position));
    blob.push_back(s.have_spare ? 1.0 : 0.0);
    blob.push_back(s.spare);
  };

  blob.push_back(static_cast<double>(world_.step));
  blob.push_back(episode_target_speed_);
  push_rng(rng_);
  for (const VehicleState& v : world_.agents) {
    blob.insert(blob.end(), {v.position.x(), v.position.y(), v.position.z(),
                             v.heading, v.speed, static_cast<double>(v.rudder_index)});
  }
  for (std::size_t t = 0; t < world_.targets.size(); ++t) {
    const VehicleState& v = world_.targets[t];
    const TargetMotion& m = world_.target_motion[t];
    blob.insert(blob.end(), {v.position.x(), v.position.y(), v.position.z(),
                             v.heading, v.speed, static_cast<double>(v.rudder_index),
                             static_cast<double>(m.countdown), m.commanded_heading});
  }
  for (int s : world_.target_miss_streak) blob.push_back(static_cast<double>(s));
  for (const KnowledgeBase& kb : world_.knowledge) {
    for (const AgentInfo& info : kb.agents) {
      blob.insert(blob.end(),
                  {info.position.x(), info.position.y(), info.position.z(),
                   info.heading, static_cast<double>(info.age), info.valid ? 1.0 : 0.0});
    }
    for (const TargetTrack& track : kb.targets) {
      blob.insert(blob.end(), {track.estimate.position_xy.x(),
                               track.estimate.position_xy.y(), track.estimate.spread,
                               static_cast<double>(track.estimate.age),
                               track.ever_measured ? 1.0 : 0.0});
      const ParticleSet& ps = track.particles;
      push_rng(ps.rng);
      blob.push_back(ps.max_speed);
      for (const auto* arr : {&ps.px, &ps.py, &ps.vx, &ps.vy, &ps.w})
        blob.insert(blob.end(), arr->data(), arr->data() + arr->size());
    }
  }
  return blob;
}

void Environment::deserialize_state(std::span<const double> blob) {
  std::size_t i = 0;
  auto next = [&blob, &i]() {
    if (i >= blob.size()) throw DataError("environment state blob truncated");
    return blob[i++];
  };
  auto pull_rng = [&next](RngStream& r) {
    RngStream::State s;
    s.position = static_cast<std::uint64_t>(next());
    s.have_spare = next() != 0.0;
    s.spare = next();
    r.restore(s);
  };

  world_.step = static_cast<int>(next());
  episode_target_speed_ = next();
  pull_rng(rng_);
  for (VehicleState& v : world_.agents) {
    v.position.x() = next();
    v.position.y() = next();
    v.position.z() = next();
    v.heading = next();
    v.speed = next();
    v.rudder_index = static_cast<int>(next());
  }
  for (std::size_t t = 0; t < world_.targets.size(); ++t) {
    VehicleState& v = world_.targets[t];
    TargetMotion& m = world_.target_motion[t];
    v.position.x() = next();
    v.position.y() = next();
    v.position.z() = next();
    v.heading = next();
    v.speed = next();
    v.rudder_index = static_cast<int>(next());
    m.countdown = static_cast<int>(next());
    m.commanded_heading = next();
  }
  for (int& s : world_.target_miss_streak) s = static_cast<int>(next());
  for (KnowledgeBase& kb : world_.knowledge) {
    for (AgentInfo& info : kb.agents) {
      info.position.x() = next();
      info.position.y() = next();
      info.position.z() = next();
      info.heading = next();
      info.age = static_cast<int>(next());
      info.valid = next() != 0.0;
    }
    for (TargetTrack& track : kb.targets) {
      track.estimate.position_xy.x() = next();
      track.estimate.position_xy.y() = next();
      track.estimate.spread = next();
      track.estimate.age = static_cast<int>(next());
      track.ever_measured = next() != 0.0;
      ParticleSet& ps = track.particles;
      pull_rng(ps.rng);
      ps.max_speed = next();
      for (auto* arr : {&ps.px, &ps.py, &ps.vx, &ps.vy, &ps.w})
        for (Eigen::Index k = 0; k < arr->size(); ++k) (*arr)(k) = next();
    }
  }
  if (i != blob.size()) throw DataError("environment state blob has trailing data");

  build_global_state();
  for (int a = 0; a < cfg_.n_agents; ++a) build_observation(a);
}

}  // namespace utrack
