#include "utrack/marl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace utrack {

namespace fs = std::filesystem;
using nlohmann::json;

void compute_gae(const Eigen::MatrixXd& rewards, const Eigen::MatrixXd& values,
                 const Eigen::MatrixXd& dones, const Eigen::VectorXd& bootstrap,
                 double gamma, double lam, Eigen::MatrixXd& advantages,
                 Eigen::MatrixXd& returns) {
  const Eigen::Index T = rewards.rows();
  const Eigen::Index E = rewards.cols();
  if (values.rows() != T || values.cols() != E || dones.rows() != T ||
      dones.cols() != E || bootstrap.size() != E)
    throw ContractViolation("compute_gae: inconsistent array shapes");

  advantages.resize(T, E);
  returns.resize(T, E);
  for (Eigen::Index e = 0; e < E; ++e) {
    double next_adv = 0.0;
    double next_value = bootstrap(e);
    for (Eigen::Index t = T - 1; t >= 0; --t) {
      const double not_done = 1.0 - dones(t, e);
      const double delta =
          rewards(t, e) + gamma * next_value * not_done - values(t, e);
      next_adv = delta + gamma * lam * not_done * next_adv;
      advantages(t, e) = next_adv;
      next_value = values(t, e);
    }
  }
  returns = advantages + values;
}

void AdamOptimizer::init(const TransformerParams& params) {
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : params.tensor_refs()) {
    m_.push_back(Eigen::MatrixXd::Zero(t->rows(), t->cols()));
    v_.push_back(Eigen::MatrixXd::Zero(t->rows(), t->cols()));
  }
}

void AdamOptimizer::apply(TransformerParams& params, const TransformerGrads& grads,
                          double lr, long long t) {
  auto prefs = params.tensor_refs();
  auto grefs = grads.tensor_refs();
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    Eigen::MatrixXd& m = m_[i];
    Eigen::MatrixXd& v = v_[i];
    const Eigen::MatrixXd& g = *grefs[i].second;
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
    prefs[i].second->array() -=
        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kEps);
  }
}

namespace {

void grads_add(TransformerGrads& into, const TransformerGrads& from) {
  auto a = into.tensor_refs();
  auto b = from.tensor_refs();
  for (std::size_t i = 0; i < a.size(); ++i) *a[i].second += *b[i].second;
}

double grads_squared_norm(const TransformerGrads& g) {
  double s = 0.0;
  for (const auto& [name, t] : g.tensor_refs()) s += t->squaredNorm();
  return s;
}

void grads_scale(TransformerGrads& g, double k) {
  for (auto& [name, t] : g.tensor_refs()) *t *= k;
}

bool grads_finite(const TransformerGrads& g) {
  for (const auto& [name, t] : g.tensor_refs())
    if (!t->allFinite()) return false;
  return true;
}

std::array<bool, kNumActions> mask_at(const std::vector<std::uint8_t>& masks,
                                      std::size_t item) {
  std::array<bool, kNumActions> m{};
  for (int k = 0; k < kNumActions; ++k)
    m[static_cast<std::size_t>(k)] = masks[item * kNumActions + static_cast<std::size_t>(k)] != 0;
  return m;
}

}  // namespace

double clip_global_norm(TransformerGrads& ga, TransformerGrads& gc,
                        double max_norm) {
  const double norm = std::sqrt(grads_squared_norm(ga) + grads_squared_norm(gc));
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    grads_scale(ga, scale);
    grads_scale(gc, scale);
  }
  return norm;
}

struct Trainer::ShardSlot {
  std::vector<ForwardCache> caches;        // per timestep (actor BPTT)
  std::vector<Eigen::MatrixXd> d_logits;   // per timestep
  ForwardCache critic_cache;
  Eigen::MatrixXd tokens;   // gathered actor tokens for one timestep
  Eigen::MatrixXd ctokens;  // gathered critic tokens for all timesteps
  Eigen::MatrixXd hidden;
  Eigen::MatrixXd d_hidden, d_hidden_next;
};

Trainer::~Trainer() = default;

Trainer::Trainer(const EnvConfig& env_cfg, const TrainConfig& cfg,
                 std::uint64_t seed)
    : env_cfg_(env_cfg),
      cfg_(cfg),
      seed_(seed),
      venv_(env_cfg, cfg.n_envs, seed, cfg.workers) {
  cfg_.net.z = kFeatureDim;
  cfg_.validate();
  env_cfg_ = venv_.config();  // finalized copy

  actor_ = init_params(cfg_.net, kNumActions, true, seed);
  critic_ = init_params(cfg_.net, 1, false, seed);
  adam_actor_.init(actor_);
  adam_critic_.init(critic_);

  const int E = cfg_.n_envs;
  const int A = env_cfg_.n_agents;
  hidden_.resize(static_cast<Eigen::Index>(E) * A, cfg_.net.d);
  for (Eigen::Index r = 0; r < hidden_.rows(); ++r)
    hidden_.row(r) = actor_.hidden0.row(0);

  act_rng_.resize(static_cast<std::size_t>(E));
  for (int e = 0; e < E; ++e)
    act_rng_[static_cast<std::size_t>(e)] =
        RngStream(RngStream::derive_key(seed, 0x616374u, static_cast<std::uint64_t>(e)),
                  static_cast<std::uint64_t>(e));
  ep_return_.setZero(E);

  const int n_slots = std::max(2 * cfg_.grad_shards, cfg_.rollout_shards);
  slots_.resize(static_cast<std::size_t>(n_slots));
  shard_ga_.reserve(static_cast<std::size_t>(cfg_.grad_shards));
  shard_gc_.reserve(static_cast<std::size_t>(cfg_.grad_shards));
  for (int s = 0; s < cfg_.grad_shards; ++s) {
    shard_ga_.push_back(zero_grads(actor_));
    shard_gc_.push_back(zero_grads(critic_));
  }
}

void Trainer::set_actor(const TransformerParams& p) {
  actor_ = p;
  adam_actor_.init(actor_);
  for (Eigen::Index r = 0; r < hidden_.rows(); ++r)
    hidden_.row(r) = actor_.hidden0.row(0);
  for (auto& g : shard_ga_) g = zero_grads(actor_);
}

void Trainer::set_critic(const TransformerParams& p) {
  critic_ = p;
  adam_critic_.init(critic_);
  for (auto& g : shard_gc_) g = zero_grads(critic_);
}

void Trainer::ensure_batch_storage() {
  const int T = cfg_.rollout_steps;
  const int E = cfg_.n_envs;
  const int A = env_cfg_.n_agents;
  const int R = env_cfg_.n_entities();

  batch_.T = T;
  batch_.n_envs = E;
  batch_.n_agents = A;
  batch_.n_rows = R;
  batch_.obs.resize(static_cast<Eigen::Index>(T) * E * A * R, kFeatureDim);
  batch_.global_obs.resize(static_cast<Eigen::Index>(T) * E * R, kFeatureDim);
  batch_.actions.resize(static_cast<std::size_t>(T) * E * A);
  batch_.masks.resize(static_cast<std::size_t>(T) * E * A * kNumActions);
  batch_.behavior_logp.resize(static_cast<Eigen::Index>(T) * E * A);
  batch_.values.resize(T, E);
  batch_.rewards.resize(T, E);
  batch_.dones.resize(T, E);
  batch_.ep_start.resize(T, E);
  batch_.hidden_start.resize(static_cast<Eigen::Index>(E) * A, cfg_.net.d);
  batch_.bootstrap.resize(E);
}

const RolloutBatch& Trainer::collect_rollout() {
  const int T = cfg_.rollout_steps;
  const int E = cfg_.n_envs;
  const int A = env_cfg_.n_agents;
  const int R = env_cfg_.n_entities();
  ensure_batch_storage();

  // Episodes starting exactly now must see the current initial hidden token.
  for (int e = 0; e < E; ++e) {
    if (venv_.env(e).world().step != 0) continue;
    for (int a = 0; a < A; ++a)
      hidden_.row(static_cast<Eigen::Index>(e) * A + a) = actor_.hidden0.row(0);
  }
  batch_.hidden_start = hidden_;

  const int S = std::min(cfg_.rollout_shards, E);
  auto shard_range = [E, S](int s) {
    return std::pair<int, int>{s * E / S, (s + 1) * E / S};
  };

  double reward_sum = 0.0, track_sum = 0.0, ret_sum = 0.0;
  int completed = 0;

  for (int t = 0; t < T; ++t) {
    for (int e = 0; e < E; ++e)
      batch_.ep_start(t, e) = venv_.env(e).world().step == 0 ? 1.0 : 0.0;

    batch_.obs.middleRows(static_cast<Eigen::Index>(t) * E * A * R,
                          static_cast<Eigen::Index>(E) * A * R) = venv_.obs_stack();
    batch_.global_obs.middleRows(static_cast<Eigen::Index>(t) * E * R,
                                 static_cast<Eigen::Index>(E) * R) =
        venv_.global_stack();
    std::copy(venv_.masks().begin(), venv_.masks().end(),
              batch_.masks.begin() + static_cast<std::ptrdiff_t>(t) *
                                         static_cast<std::ptrdiff_t>(E) * A * kNumActions);

    venv_.pool().parallel_for(S, [&, t](int s) {
      const auto [e0, e1] = shard_range(s);
      if (e0 >= e1) return;
      const int ke = e1 - e0;
      ShardSlot& slot = slots_[static_cast<std::size_t>(s)];
      if (slot.caches.empty()) slot.caches.resize(1);

      auto tokens = batch_.obs.middleRows(
          (static_cast<Eigen::Index>(t) * E + e0) * A * R,
          static_cast<Eigen::Index>(ke) * A * R);
      auto hid = hidden_.middleRows(static_cast<Eigen::Index>(e0) * A,
                                    static_cast<Eigen::Index>(ke) * A);
      const ActorOutput out = actor_forward(actor_, tokens, hid, R, &slot.caches[0]);
      hidden_.middleRows(static_cast<Eigen::Index>(e0) * A,
                         static_cast<Eigen::Index>(ke) * A) = out.hidden_out;

      for (int e = e0; e < e1; ++e) {
        RngStream& rng = act_rng_[static_cast<std::size_t>(e)];
        for (int a = 0; a < A; ++a) {
          const int item = (e - e0) * A + a;
          const std::size_t gi =
              (static_cast<std::size_t>(t) * E + static_cast<std::size_t>(e)) * A +
              static_cast<std::size_t>(a);
          const auto mask = mask_at(batch_.masks, gi);
          const Eigen::VectorXd probs = masked_probs(out.logits.row(item), mask);
          const double u = rng.uniform();
          int action = -1;
          double cum = 0.0;
          for (int k = 0; k < kNumActions; ++k) {
            if (probs(k) <= 0.0) continue;
            cum += probs(k);
            action = k;
            if (u < cum) break;
          }
          batch_.actions[gi] = action;
          batch_.behavior_logp(static_cast<Eigen::Index>(gi)) =
              std::log(std::max(probs(action), 1e-300));
        }
      }

      auto gtokens = batch_.global_obs.middleRows(
          (static_cast<Eigen::Index>(t) * E + e0) * R,
          static_cast<Eigen::Index>(ke) * R);
      const Eigen::VectorXd v = critic_forward(critic_, gtokens, R, &slot.critic_cache);
      for (int e = e0; e < e1; ++e) batch_.values(t, e) = v(e - e0);
    });

    venv_.step({batch_.actions.data() + static_cast<std::ptrdiff_t>(t) * E * A,
                static_cast<std::size_t>(E) * A});

    for (int e = 0; e < E; ++e) {
      const double r = venv_.rewards()(e);
      const bool done = venv_.dones()[static_cast<std::size_t>(e)] != 0;
      batch_.rewards(t, e) = r;
      batch_.dones(t, e) = done ? 1.0 : 0.0;
      reward_sum += r;
      const StepOutput& info = venv_.infos()[static_cast<std::size_t>(e)];
      double terr = 0.0;
      for (double x : info.tracking_error) terr += x;
      track_sum += terr / static_cast<double>(info.tracking_error.size());
      ep_return_(e) += r;
      if (done) {
        ++completed;
        ret_sum += ep_return_(e);
        ep_return_(e) = 0.0;
        for (int a = 0; a < A; ++a)
          hidden_.row(static_cast<Eigen::Index>(e) * A + a) = actor_.hidden0.row(0);
      }
    }
  }

  venv_.pool().parallel_for(S, [&](int s) {
    const auto [e0, e1] = shard_range(s);
    if (e0 >= e1) return;
    ShardSlot& slot = slots_[static_cast<std::size_t>(s)];
    auto gtokens =
        venv_.global_stack().middleRows(static_cast<Eigen::Index>(e0) * R,
                                        static_cast<Eigen::Index>(e1 - e0) * R);
    const Eigen::VectorXd v = critic_forward(critic_, gtokens, R, &slot.critic_cache);
    for (int e = e0; e < e1; ++e) batch_.bootstrap(e) = v(e - e0);
  });

  compute_gae(batch_.rewards, batch_.values, batch_.dones, batch_.bootstrap,
              cfg_.gamma, cfg_.lam, batch_.advantages, batch_.returns);

  batch_.mean_step_reward = reward_sum / static_cast<double>(T) / E;
  batch_.mean_tracking_error = track_sum / static_cast<double>(T) / E;
  batch_.episodes_completed = completed;
  batch_.mean_episode_return = completed > 0 ? ret_sum / completed : 0.0;
  return batch_;
}

void Trainer::run_actor_shard(const RolloutBatch& batch,
                              std::span<const int> env_ids, double adv_mu,
                              double adv_sigma, double inv_actor_n,
                              TransformerGrads* ga, ShardSlot& slot, PpoStats& st) {
  const int T = batch.T;
  const int E = batch.n_envs;
  const int A = batch.n_agents;
  const int R = batch.n_rows;
  const int K = static_cast<int>(env_ids.size());
  const int B = K * A;
  const int d = cfg_.net.d;
  const bool want_grads = ga != nullptr;

  slot.tokens.resize(static_cast<Eigen::Index>(B) * R, kFeatureDim);
  slot.hidden.resize(B, d);
  if (static_cast<int>(slot.caches.size()) < T) slot.caches.resize(static_cast<std::size_t>(T));
  if (want_grads && static_cast<int>(slot.d_logits.size()) < T)
    slot.d_logits.resize(static_cast<std::size_t>(T));

  for (int i = 0; i < K; ++i)
    slot.hidden.middleRows(static_cast<Eigen::Index>(i) * A, A) =
        batch.hidden_start.middleRows(static_cast<Eigen::Index>(env_ids[static_cast<std::size_t>(i)]) * A, A);

  double actor_sum = 0.0, ent_sum = 0.0, kl_sum = 0.0;
  long long clip_cnt = 0;

  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < K; ++i) {
      const int e = env_ids[static_cast<std::size_t>(i)];
      if (batch.ep_start(t, e) != 0.0) {
        for (int a = 0; a < A; ++a)
          slot.hidden.row(static_cast<Eigen::Index>(i) * A + a) = actor_.hidden0.row(0);
      }
      slot.tokens.middleRows(static_cast<Eigen::Index>(i) * A * R,
                             static_cast<Eigen::Index>(A) * R) =
          batch.obs.middleRows(
              (static_cast<Eigen::Index>(t) * E + e) * A * R,
              static_cast<Eigen::Index>(A) * R);
    }

    const ActorOutput out =
        actor_forward(actor_, slot.tokens, slot.hidden, R, &slot.caches[static_cast<std::size_t>(t)]);
    slot.hidden = out.hidden_out;

    Eigen::MatrixXd* dl = nullptr;
    if (want_grads) {
      dl = &slot.d_logits[static_cast<std::size_t>(t)];
      dl->setZero(B, kNumActions);
    }

    for (int i = 0; i < K; ++i) {
      const int e = env_ids[static_cast<std::size_t>(i)];
      for (int a = 0; a < A; ++a) {
        const int item = i * A + a;
        const std::size_t gi =
            (static_cast<std::size_t>(t) * E + static_cast<std::size_t>(e)) * A +
            static_cast<std::size_t>(a);
        const auto mask = mask_at(batch.masks, gi);
        const Eigen::VectorXd probs = masked_probs(out.logits.row(item), mask);
        const int action = batch.actions[gi];
        const double lp_old = batch.behavior_logp(static_cast<Eigen::Index>(gi));
        const double lp_new = std::log(std::max(probs(action), 1e-300));
        const double ratio = std::exp(lp_new - lp_old);
        const double adv = (batch.advantages(t, e) - adv_mu) / (adv_sigma + 1e-8);

        const double unclipped = ratio * adv;
        const double clipped =
            std::clamp(ratio, 1.0 - cfg_.clip_eps, 1.0 + cfg_.clip_eps) * adv;
        actor_sum -= std::min(unclipped, clipped);

        double entropy = 0.0;
        for (int k = 0; k < kNumActions; ++k)
          if (probs(k) > 0.0) entropy -= probs(k) * std::log(probs(k));
        ent_sum += entropy;
        kl_sum += lp_old - lp_new;
        if (std::abs(ratio - 1.0) > cfg_.clip_eps) ++clip_cnt;

        if (want_grads) {
          // min() routes the gradient: zero when the clipped branch is
          // strictly smaller (ratio saturated), -adv*ratio otherwise.
          const double coeff = clipped < unclipped ? 0.0 : -adv * ratio;
          for (int k = 0; k < kNumActions; ++k) {
            if (probs(k) <= 0.0 && k != action) continue;
            if (!mask[static_cast<std::size_t>(k)]) continue;
            const double indicator = k == action ? 1.0 : 0.0;
            const double lnp = std::log(std::max(probs(k), 1e-300));
            (*dl)(item, k) =
                inv_actor_n * (coeff * (indicator - probs(k)) +
                               cfg_.entropy_coef * probs(k) * (lnp + entropy));
          }
        }
      }
    }
  }

  if (want_grads) {
    slot.d_hidden_next.setZero(B, d);
    for (int t = T - 1; t >= 0; --t) {
      actor_backward(actor_, slot.caches[static_cast<std::size_t>(t)],
                     slot.d_logits[static_cast<std::size_t>(t)], slot.d_hidden_next,
                     *ga, &slot.d_hidden);
      for (int i = 0; i < K; ++i) {
        const int e = env_ids[static_cast<std::size_t>(i)];
        const bool reset = batch.ep_start(t, e) != 0.0;
        for (int a = 0; a < A; ++a) {
          const Eigen::Index row = static_cast<Eigen::Index>(i) * A + a;
          if (reset) {
            ga->hidden0.row(0) += slot.d_hidden.row(row);
            slot.d_hidden_next.row(row).setZero();
          } else {
            slot.d_hidden_next.row(row) = slot.d_hidden.row(row);
          }
        }
      }
    }
  }

  st.actor_loss += actor_sum * inv_actor_n;
  st.entropy += ent_sum * inv_actor_n;
  st.approx_kl += kl_sum * inv_actor_n;
  st.clip_fraction += static_cast<double>(clip_cnt) * inv_actor_n;
}

void Trainer::run_critic_shard(const RolloutBatch& batch,
                               std::span<const int> env_ids, double inv_value_n,
                               TransformerGrads* gc, ShardSlot& slot, PpoStats& st) {
  const int T = batch.T;
  const int E = batch.n_envs;
  const int R = batch.n_rows;
  const int K = static_cast<int>(env_ids.size());
  const int B = K * T;

  slot.ctokens.resize(static_cast<Eigen::Index>(B) * R, kFeatureDim);
  for (int i = 0; i < K; ++i) {
    const int e = env_ids[static_cast<std::size_t>(i)];
    for (int t = 0; t < T; ++t) {
      slot.ctokens.middleRows((static_cast<Eigen::Index>(i) * T + t) * R, R) =
          batch.global_obs.middleRows((static_cast<Eigen::Index>(t) * E + e) * R, R);
    }
  }

  const Eigen::VectorXd v = critic_forward(critic_, slot.ctokens, R, &slot.critic_cache);

  Eigen::VectorXd d_value(B);
  double mse_sum = 0.0;
  for (int i = 0; i < K; ++i) {
    const int e = env_ids[static_cast<std::size_t>(i)];
    for (int t = 0; t < T; ++t) {
      const int idx = i * T + t;
      const double diff = v(idx) - batch.returns(t, e);
      mse_sum += diff * diff;
      d_value(idx) = gc ? inv_value_n * cfg_.value_coef * 2.0 * diff : 0.0;
    }
  }
  st.value_loss += mse_sum * inv_value_n;

  if (gc) critic_backward(critic_, slot.critic_cache, d_value, *gc);
}

namespace {

struct MinibatchNorm {
  double mu = 0.0;
  double sigma = 1.0;
};

MinibatchNorm adv_norm(const RolloutBatch& batch, std::span<const int> env_ids) {
  double sum = 0.0, sq = 0.0;
  const auto n = static_cast<double>(batch.T) * static_cast<double>(env_ids.size());
  for (int e : env_ids)
    for (int t = 0; t < batch.T; ++t) {
      const double a = batch.advantages(t, e);
      sum += a;
      sq += a * a;
    }
  MinibatchNorm out;
  out.mu = sum / n;
  out.sigma = std::sqrt(std::max(sq / n - out.mu * out.mu, 0.0));
  return out;
}

}  // namespace

double Trainer::ppo_loss(const RolloutBatch& batch, std::span<const int> env_ids,
                         PpoStats* stats) {
  std::vector<int> all;
  if (env_ids.empty()) {
    all.resize(static_cast<std::size_t>(batch.n_envs));
    std::iota(all.begin(), all.end(), 0);
    env_ids = all;
  }
  const MinibatchNorm nrm = adv_norm(batch, env_ids);
  const double inv_a = 1.0 / (static_cast<double>(batch.T) * env_ids.size() * batch.n_agents);
  const double inv_v = 1.0 / (static_cast<double>(batch.T) * env_ids.size());

  PpoStats st;
  if (slots_.empty()) slots_.resize(1);
  run_actor_shard(batch, env_ids, nrm.mu, nrm.sigma, inv_a, nullptr, slots_[0], st);
  run_critic_shard(batch, env_ids, inv_v, nullptr, slots_[0], st);
  st.total_loss = st.actor_loss + cfg_.value_coef * st.value_loss -
                  cfg_.entropy_coef * st.entropy;
  if (stats) *stats = st;
  return st.total_loss;
}

double Trainer::ppo_loss_grads(const RolloutBatch& batch,
                               std::span<const int> env_ids, TransformerGrads& ga,
                               TransformerGrads& gc, PpoStats* stats) {
  std::vector<int> all;
  if (env_ids.empty()) {
    all.resize(static_cast<std::size_t>(batch.n_envs));
    std::iota(all.begin(), all.end(), 0);
    env_ids = all;
  }
  const MinibatchNorm nrm = adv_norm(batch, env_ids);
  const double inv_a = 1.0 / (static_cast<double>(batch.T) * env_ids.size() * batch.n_agents);
  const double inv_v = 1.0 / (static_cast<double>(batch.T) * env_ids.size());

  PpoStats st;
  if (slots_.empty()) slots_.resize(1);
  run_actor_shard(batch, env_ids, nrm.mu, nrm.sigma, inv_a, &ga, slots_[0], st);
  run_critic_shard(batch, env_ids, inv_v, &gc, slots_[0], st);
  st.total_loss = st.actor_loss + cfg_.value_coef * st.value_loss -
                  cfg_.entropy_coef * st.entropy;
  if (stats) *stats = st;
  return st.total_loss;
}

PpoStats Trainer::update(const RolloutBatch& batch) {
  const int E = batch.n_envs;
  const int K = E / cfg_.minibatches;
  const int S = std::min(cfg_.grad_shards, K);

  PpoStats agg;
  int n_minibatches = 0;

  std::vector<int> perm(static_cast<std::size_t>(E));
  std::vector<PpoStats> task_stats(static_cast<std::size_t>(2 * S));

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    RngStream shuffle(
        RngStream::derive_key(seed_, 0x73687566u, static_cast<std::uint64_t>(update_idx_),
                              static_cast<std::uint64_t>(epoch)),
        0);
    for (int i = E - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle.uniform_int(static_cast<std::uint32_t>(i + 1)));
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }

    for (int mb = 0; mb < cfg_.minibatches; ++mb) {
      const std::span<const int> env_ids{perm.data() + static_cast<std::ptrdiff_t>(mb) * K,
                                         static_cast<std::size_t>(K)};
      const MinibatchNorm nrm = adv_norm(batch, env_ids);
      const double inv_a =
          1.0 / (static_cast<double>(batch.T) * K * batch.n_agents);
      const double inv_v = 1.0 / (static_cast<double>(batch.T) * K);

      for (int s = 0; s < S; ++s) {
        shard_ga_[static_cast<std::size_t>(s)].set_zero();
        shard_gc_[static_cast<std::size_t>(s)].set_zero();
        task_stats[static_cast<std::size_t>(s)] = PpoStats{};
        task_stats[static_cast<std::size_t>(S + s)] = PpoStats{};
      }

      auto shard_ids = [&](int s) {
        const int lo = s * K / S, hi = (s + 1) * K / S;
        return std::span<const int>{env_ids.data() + lo,
                                    static_cast<std::size_t>(hi - lo)};
      };

      venv_.pool().parallel_for(2 * S, [&](int task) {
        const int s = task % S;
        const auto ids = shard_ids(s);
        if (ids.empty()) return;
        if (task < S) {
          run_actor_shard(batch, ids, nrm.mu, nrm.sigma, inv_a,
                          &shard_ga_[static_cast<std::size_t>(s)],
                          slots_[static_cast<std::size_t>(task)],
                          task_stats[static_cast<std::size_t>(task)]);
        } else {
          run_critic_shard(batch, ids, inv_v,
                           &shard_gc_[static_cast<std::size_t>(s)],
                           slots_[static_cast<std::size_t>(task)],
                           task_stats[static_cast<std::size_t>(task)]);
        }
      });

      PpoStats st;
      for (int s = 1; s < S; ++s) {
        grads_add(shard_ga_[0], shard_ga_[static_cast<std::size_t>(s)]);
        grads_add(shard_gc_[0], shard_gc_[static_cast<std::size_t>(s)]);
      }
      for (const PpoStats& ts : task_stats) {
        st.actor_loss += ts.actor_loss;
        st.value_loss += ts.value_loss;
        st.entropy += ts.entropy;
        st.clip_fraction += ts.clip_fraction;
        st.approx_kl += ts.approx_kl;
      }
      st.total_loss = st.actor_loss + cfg_.value_coef * st.value_loss -
                      cfg_.entropy_coef * st.entropy;

      const bool finite = std::isfinite(st.total_loss) &&
                          grads_finite(shard_ga_[0]) && grads_finite(shard_gc_[0]);
      if (!finite) {
        st.skipped = true;
      } else {
        st.grad_norm = clip_global_norm(shard_ga_[0], shard_gc_[0], cfg_.max_grad_norm);
        ++adam_t_;
        adam_actor_.apply(actor_, shard_ga_[0], cfg_.lr, adam_t_);
        adam_critic_.apply(critic_, shard_gc_[0], cfg_.lr, adam_t_);
      }

      agg.total_loss += st.total_loss;
      agg.actor_loss += st.actor_loss;
      agg.value_loss += st.value_loss;
      agg.entropy += st.entropy;
      agg.clip_fraction += st.clip_fraction;
      agg.approx_kl += st.approx_kl;
      agg.grad_norm += st.grad_norm;
      agg.skipped = agg.skipped || st.skipped;
      ++n_minibatches;
    }
  }

  const double inv = 1.0 / n_minibatches;
  agg.total_loss *= inv;
  agg.actor_loss *= inv;
  agg.value_loss *= inv;
  agg.entropy *= inv;
  agg.clip_fraction *= inv;
  agg.approx_kl *= inv;
  agg.grad_norm *= inv;
  ++update_idx_;
  return agg;
}

TrainResult Trainer::train(const std::string& out_dir, const MetricsSink& extra_sink) {
  fs::create_directories(fs::path(out_dir) / "checkpoints");
  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw DataError("cannot open metrics log: " + metrics_path);

  const long long steps_per_update =
      static_cast<long long>(cfg_.rollout_steps) * cfg_.n_envs;

  while (steps_done_ < cfg_.total_timesteps) {
    const auto t0 = std::chrono::steady_clock::now();
    const RolloutBatch& batch = collect_rollout();
    const PpoStats st = update(batch);
    steps_done_ += steps_per_update;
    const auto t1 = std::chrono::steady_clock::now();
    const double secs =
        std::chrono::duration_cast<std::chrono::duration<double>>(t1 - t0).count();

    json line;
    line["update"] = update_idx_;
    line["timesteps"] = steps_done_;
    line["mean_return"] = batch.mean_episode_return;
    line["episodes"] = batch.episodes_completed;
    line["mean_step_reward"] = batch.mean_step_reward;
    line["mean_tracking_error"] = batch.mean_tracking_error;
    line["total_loss"] = st.total_loss;
    line["actor_loss"] = st.actor_loss;
    line["value_loss"] = st.value_loss;
    line["entropy"] = st.entropy;
    line["clip_fraction"] = st.clip_fraction;
    line["approx_kl"] = st.approx_kl;
    line["grad_norm"] = st.grad_norm;
    line["skipped"] = st.skipped;
    line["sps"] = static_cast<double>(steps_per_update) / secs;
    const std::string out = line.dump();
    metrics << out << "\n";
    metrics.flush();
    if (extra_sink) extra_sink(out);

    if (cfg_.checkpoint_every > 0 && update_idx_ % cfg_.checkpoint_every == 0 &&
        steps_done_ < cfg_.total_timesteps) {
      char name[32];
      std::snprintf(name, sizeof(name), "update_%08lld", update_idx_);
      save_now((fs::path(out_dir) / "checkpoints" / name).string());
    }
  }

  const std::string final_dir = (fs::path(out_dir) / "checkpoints" / "final").string();
  save_now(final_dir);

  TrainResult res;
  res.final_checkpoint = final_dir;
  res.metrics_path = metrics_path;
  res.updates = update_idx_;
  res.timesteps = steps_done_;
  return res;
}

void Trainer::save_now(const std::string& dir) {
  const std::vector<double> state = serialize_training_state();
  save_checkpoint(dir, actor_, critic_, meta(), &state);
}

CheckpointMeta Trainer::meta() const {
  CheckpointMeta m;
  m.version = 1;
  m.net = cfg_.net;
  m.actor_out_dim = kNumActions;
  m.training_step = steps_done_;
  m.update_index = update_idx_;
  return m;
}

std::vector<double> Trainer::serialize_training_state() const {
  std::vector<double> blob;
  blob.push_back(static_cast<double>(update_idx_));
  blob.push_back(static_cast<double>(steps_done_));
  blob.push_back(static_cast<double>(adam_t_));

  for (const AdamOptimizer* opt : {&adam_actor_, &adam_critic_}) {
    for (const auto* vec : {&opt->m(), &opt->v()}) {
      for (const Eigen::MatrixXd& t : *vec)
        blob.insert(blob.end(), t.data(), t.data() + t.size());
    }
  }

  blob.insert(blob.end(), hidden_.data(), hidden_.data() + hidden_.size());
  for (const RngStream& r : act_rng_) {
    const RngStream::State s = r.state();
    blob.push_back(static_cast<double>(s.position));
    blob.push_back(s.have_spare ? 1.0 : 0.0);
    blob.push_back(s.spare);
  }
  blob.insert(blob.end(), ep_return_.data(), ep_return_.data() + ep_return_.size());
  for (int e = 0; e < cfg_.n_envs; ++e) {
    const std::vector<double> env_blob = venv_.env(e).serialize_state();
    blob.insert(blob.end(), env_blob.begin(), env_blob.end());
  }
  return blob;
}

void Trainer::restore_training_state(std::span<const double> blob) {
  std::size_t i = 0;
  auto next = [&]() {
    if (i >= blob.size()) throw DataError("training state blob truncated");
    return blob[i++];
  };

  update_idx_ = static_cast<long long>(next());
  steps_done_ = static_cast<long long>(next());
  adam_t_ = static_cast<long long>(next());

  for (auto* opt : {&adam_actor_, &adam_critic_}) {
    for (auto* vec : {&opt->m(), &opt->v()}) {
      for (Eigen::MatrixXd& t : *vec) {
        for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = next();
      }
    }
  }

  for (Eigen::Index k = 0; k < hidden_.size(); ++k) hidden_.data()[k] = next();
  for (RngStream& r : act_rng_) {
    RngStream::State s;
    s.position = static_cast<std::uint64_t>(next());
    s.have_spare = next() != 0.0;
    s.spare = next();
    r.restore(s);
  }
  for (Eigen::Index k = 0; k < ep_return_.size(); ++k) ep_return_(k) = next();

  const std::size_t env_doubles = (blob.size() - i) / static_cast<std::size_t>(cfg_.n_envs);
  for (int e = 0; e < cfg_.n_envs; ++e) {
    venv_.env(e).deserialize_state(blob.subspan(i, env_doubles));
    i += env_doubles;
  }
  if (i != blob.size()) throw DataError("training state blob has trailing data");
  venv_.refresh_outputs();
}

}  // namespace utrack
