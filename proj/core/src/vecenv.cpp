#include "utrack/vecenv.hpp"

#include <chrono>

namespace utrack {

VecEnv::VecEnv(const EnvConfig& cfg, int n_envs, std::uint64_t master_seed,
               int workers)
    : cfg_(cfg), n_envs_(n_envs), pool_(workers) {
  if (n_envs < 1) throw ConfigError("vecenv: n_envs must be >= 1");
  cfg_.finalize();

  envs_.resize(static_cast<std::size_t>(n_envs));
  bench_rng_.resize(static_cast<std::size_t>(n_envs));
  for (int i = 0; i < n_envs; ++i) {
    envs_[static_cast<std::size_t>(i)] =
        std::make_unique<Environment>(cfg_, master_seed, i);
    bench_rng_[static_cast<std::size_t>(i)] =
        RngStream(RngStream::derive_key(master_seed, 0x62656e63u,
                                        static_cast<std::uint64_t>(i)),
                  static_cast<std::uint64_t>(i));
  }

  const int na = cfg_.n_agents;
  const int ne = cfg_.n_entities();
  obs_stack_.setZero(static_cast<Eigen::Index>(n_envs) * na * ne, kFeatureDim);
  final_obs_stack_.setZero(static_cast<Eigen::Index>(n_envs) * na * ne, kFeatureDim);
  global_stack_.setZero(static_cast<Eigen::Index>(n_envs) * ne, kFeatureDim);
  rewards_.setZero(n_envs);
  dones_.assign(static_cast<std::size_t>(n_envs), 0);
  masks_.assign(static_cast<std::size_t>(n_envs) * na * kNumActions, 0);
  infos_.resize(static_cast<std::size_t>(n_envs));
  for (auto& info : infos_) {
    info.tracking_error.assign(static_cast<std::size_t>(cfg_.n_targets), 0.0);
    info.min_agent_dist.assign(static_cast<std::size_t>(cfg_.n_targets), 0.0);
    info.target_lost.assign(static_cast<std::size_t>(cfg_.n_targets), 0);
  }
  action_scratch_.assign(static_cast<std::size_t>(n_envs) * na, 2);

  // ctor already spawned; publish the initial observations
  for (int i = 0; i < n_envs; ++i) {
    gather(i);
    gather_masks(i);
  }
}

void VecEnv::gather(int i) {
  const int na = cfg_.n_agents;
  const int ne = cfg_.n_entities();
  const Environment& e = *envs_[static_cast<std::size_t>(i)];
  for (int a = 0; a < na; ++a) {
    obs_stack_.middleRows(static_cast<Eigen::Index>(i * na + a) * ne, ne) =
        e.observation(a);
  }
  global_stack_.middleRows(static_cast<Eigen::Index>(i) * ne, ne) = e.global_state();
}

void VecEnv::gather_masks(int i) {
  const int na = cfg_.n_agents;
  const Environment& e = *envs_[static_cast<std::size_t>(i)];
  for (int a = 0; a < na; ++a) {
    const auto mask = e.action_mask(a);
    for (int k = 0; k < kNumActions; ++k)
      masks_[static_cast<std::size_t>((i * na + a) * kNumActions + k)] =
          mask[static_cast<std::size_t>(k)] ? 1 : 0;
  }
}

void VecEnv::reset_all() {
  pool_.parallel_for(n_envs_, [this](int i) {
    envs_[static_cast<std::size_t>(i)]->reset();
    gather(i);
    gather_masks(i);
    rewards_(i) = 0.0;
    dones_[static_cast<std::size_t>(i)] = 0;
  });
}

void VecEnv::step(std::span<const int> actions) {
  if (static_cast<int>(actions.size()) != n_envs_ * cfg_.n_agents)
    throw ContractViolation("vecenv step: wrong action count");

  pool_.parallel_for(n_envs_, [this, actions](int i) {
    Environment& e = *envs_[static_cast<std::size_t>(i)];
    const int na = cfg_.n_agents;
    const int ne = cfg_.n_entities();
    const StepOutput* outp = nullptr;
    try {
      outp = &e.step(actions.subspan(static_cast<std::size_t>(i * na),
                                     static_cast<std::size_t>(na)));
    } catch (const ContractViolation& err) {
      throw ContractViolation("env " + std::to_string(i) + ": " + err.what());
    }
    const StepOutput& out = *outp;

    rewards_(i) = out.reward;
    dones_[static_cast<std::size_t>(i)] = out.done ? 1 : 0;
    StepOutput& info = infos_[static_cast<std::size_t>(i)];
    info.reward = out.reward;
    info.done = out.done;
    info.collision = out.collision;
    info.tracking_error = out.tracking_error;
    info.min_agent_dist = out.min_agent_dist;
    info.target_lost = out.target_lost;

    if (out.done) {
      // surface the terminal observation, then hand out the fresh episode
      for (int a = 0; a < na; ++a)
        final_obs_stack_.middleRows(static_cast<Eigen::Index>(i * na + a) * ne, ne) =
            e.observation(a);
      e.reset();
    }
    gather(i);
    gather_masks(i);
  });
}

void VecEnv::step_policy(BenchmarkPolicy policy) {
  const int na = cfg_.n_agents;
  pool_.parallel_for(n_envs_, [this, policy, na](int i) {
    Environment& e = *envs_[static_cast<std::size_t>(i)];
    int* acts = &action_scratch_[static_cast<std::size_t>(i * na)];
    if (policy == BenchmarkPolicy::kScripted) {
      for (int a = 0; a < na; ++a) acts[a] = e.scripted_action(a);
    } else {
      RngStream& rng = bench_rng_[static_cast<std::size_t>(i)];
      for (int a = 0; a < na; ++a) {
        const auto mask = e.action_mask(a);
        int legal[kNumActions];
        int n_legal = 0;
        for (int k = 0; k < kNumActions; ++k)
          if (mask[static_cast<std::size_t>(k)]) legal[n_legal++] = k;
        acts[a] = legal[rng.uniform_int(static_cast<std::uint32_t>(n_legal))];
      }
    }

    const StepOutput& out = e.step({acts, static_cast<std::size_t>(na)});
    rewards_(i) = out.reward;
    dones_[static_cast<std::size_t>(i)] = out.done ? 1 : 0;
    if (out.done) e.reset();
    gather_masks(i);
  });
}

void VecEnv::refresh_outputs() {
  for (int i = 0; i < n_envs_; ++i) {
    gather(i);
    gather_masks(i);
  }
}

void VecEnv::enable_phase_timing(bool on) {
  for (auto& e : envs_) e->enable_phase_timing(on);
}

void VecEnv::reset_timing() {
  for (auto& e : envs_) e->reset_timing();
}

std::array<std::uint64_t, static_cast<int>(StepPhase::kCount)> VecEnv::phase_ns()
    const {
  std::array<std::uint64_t, static_cast<int>(StepPhase::kCount)> sum{};
  for (const auto& e : envs_)
    for (int p = 0; p < static_cast<int>(StepPhase::kCount); ++p)
      sum[static_cast<std::size_t>(p)] += e->phase_ns()[static_cast<std::size_t>(p)];
  return sum;
}

std::uint64_t VecEnv::total_step_ns() const {
  std::uint64_t sum = 0;
  for (const auto& e : envs_) sum += e->total_step_ns();
  return sum;
}

BenchmarkReport benchmark_sps(const EnvConfig& cfg, int n_envs, int n_steps,
                              BenchmarkPolicy policy, std::uint64_t seed,
                              int workers, int warmup) {
  VecEnv venv(cfg, n_envs, seed, workers);
  venv.enable_phase_timing(true);

  for (int i = 0; i < warmup; ++i) venv.step_policy(policy);
  venv.reset_timing();

  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n_steps; ++i) venv.step_policy(policy);
  const auto t1 = std::chrono::steady_clock::now();

  BenchmarkReport rep;
  rep.config_name = std::to_string(cfg.n_agents) + "A," +
                    std::to_string(cfg.n_targets) + "T";
  rep.n_envs = n_envs;
  rep.n_agents = cfg.n_agents;
  rep.n_targets = cfg.n_targets;
  rep.timed_steps = n_steps;
  rep.workers = venv.pool().workers();
  rep.wall_seconds =
      std::chrono::duration_cast<std::chrono::duration<double>>(t1 - t0).count();
  rep.sps = static_cast<double>(n_envs) * n_steps / rep.wall_seconds;
  rep.phase_ns = venv.phase_ns();
  rep.total_ns = venv.total_step_ns();
  return rep;
}

}  // namespace utrack
