#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "utrack/checkpoint.hpp"
#include "utrack/config.hpp"
#include "utrack/nets.hpp"
#include "utrack/vecenv.hpp"

namespace utrack {

/// Time-major trajectories across parallel envs for one PPO update.
/// Row layouts (z = kFeatureDim, A = n_agents, R = entity rows per item):
///   obs:        ((t*E + e)*A + a)*R + row
///   global_obs: ((t*E + e))*R + row
struct RolloutBatch {
  int T = 0, n_envs = 0, n_agents = 0, n_rows = 0;

  Eigen::MatrixXd obs;
  Eigen::MatrixXd global_obs;
  std::vector<int> actions;             // (t*E + e)*A + a
  std::vector<std::uint8_t> masks;      // ((t*E + e)*A + a)*kNumActions + k
  Eigen::VectorXd behavior_logp;        // (t*E + e)*A + a
  Eigen::MatrixXd values;               // T x E, critic on the global state
  Eigen::MatrixXd rewards;              // T x E, shared across agents
  Eigen::MatrixXd dones;                // T x E
  Eigen::MatrixXd ep_start;             // T x E, hidden reset before step t
  Eigen::MatrixXd hidden_start;         // (E*A) x d at segment start
  Eigen::VectorXd bootstrap;            // E, value after the last step
  Eigen::MatrixXd advantages, returns;  // T x E

  double mean_step_reward = 0.0;
  double mean_tracking_error = 0.0;
  double mean_episode_return = 0.0;
  int episodes_completed = 0;
};

/// GAE(lambda): delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t,
/// A_t = delta_t + gamma*lambda*(1-done_t)*A_{t+1}; returns = A + V.
void compute_gae(const Eigen::MatrixXd& rewards, const Eigen::MatrixXd& values,
                 const Eigen::MatrixXd& dones, const Eigen::VectorXd& bootstrap,
                 double gamma, double lam, Eigen::MatrixXd& advantages,
                 Eigen::MatrixXd& returns);

struct PpoStats {
  double total_loss = 0.0;
  double actor_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;  // non-finite loss/grads: step skipped
};

/// Adam with the standard bias correction; moment tensors align with the
/// parameter tensor order.
class AdamOptimizer {
 public:
  void init(const TransformerParams& params);
  /// One first-order step; `t` is the shared step counter (bias correction).
  void apply(TransformerParams& params, const TransformerGrads& grads, double lr,
             long long t);

  std::vector<Eigen::MatrixXd>& m() { return m_; }
  std::vector<Eigen::MatrixXd>& v() { return v_; }
  const std::vector<Eigen::MatrixXd>& m() const { return m_; }
  const std::vector<Eigen::MatrixXd>& v() const { return v_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  std::vector<Eigen::MatrixXd> m_, v_;
};

struct TrainResult {
  std::string final_checkpoint;
  std::string metrics_path;
  long long updates = 0;
  long long timesteps = 0;
};

/// Joint gradient-norm clipping over actor and critic; returns the pre-clip
/// global norm.
double clip_global_norm(TransformerGrads& ga, TransformerGrads& gc,
                        double max_norm);

/// MAPPO: decentralized recurrent transformer actors (one shared parameter
/// set), centralized transformer critic, clipped-surrogate updates over
/// whole-sequence recurrent minibatches.
class Trainer {
 public:
  Trainer(const EnvConfig& env_cfg, const TrainConfig& cfg, std::uint64_t seed);
  ~Trainer();

  TransformerParams& actor() { return actor_; }
  TransformerParams& critic() { return critic_; }
  const TransformerParams& actor() const { return actor_; }
  const TransformerParams& critic() const { return critic_; }
  VecEnv& venv() { return venv_; }
  long long update_index() const { return update_idx_; }
  long long timesteps_done() const { return steps_done_; }

  void set_actor(const TransformerParams& p);
  void set_critic(const TransformerParams& p);

  /// T steps across all envs with the current policy; fills advantages.
  const RolloutBatch& collect_rollout();

  /// Epochs x minibatches of clipped-surrogate optimization on the batch.
  PpoStats update(const RolloutBatch& batch);

  /// Forward-only PPO loss over the given env sequences (the whole batch
  /// when empty); the finite-difference oracle target.
  double ppo_loss(const RolloutBatch& batch, std::span<const int> env_ids,
                  PpoStats* stats = nullptr);
  /// Same quantity with analytic gradients accumulated into ga / gc.
  double ppo_loss_grads(const RolloutBatch& batch, std::span<const int> env_ids,
                        TransformerGrads& ga, TransformerGrads& gc,
                        PpoStats* stats = nullptr);

  using MetricsSink = std::function<void(const std::string& json_line)>;

  /// Runs collect/update until total_timesteps, writing metrics.jsonl and
  /// checkpoints under out_dir. Returns the final checkpoint path.
  TrainResult train(const std::string& out_dir, const MetricsSink& extra_sink = {});

  /// Writes a full checkpoint (params + training-state sidecar) to `dir`.
  void save(const std::string& dir) { save_now(dir); }

  // -- exact-resume support --
  std::vector<double> serialize_training_state() const;
  void restore_training_state(std::span<const double> blob);
  CheckpointMeta meta() const;

 private:
  struct ShardSlot;

  void ensure_batch_storage();
  void run_actor_shard(const RolloutBatch& batch, std::span<const int> env_ids,
                       double adv_mu, double adv_sigma, double inv_actor_n,
                       TransformerGrads* ga, ShardSlot& slot, PpoStats& st);
  void run_critic_shard(const RolloutBatch& batch, std::span<const int> env_ids,
                        double inv_value_n, TransformerGrads* gc, ShardSlot& slot,
                        PpoStats& st);
  void save_now(const std::string& dir);

  EnvConfig env_cfg_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  VecEnv venv_;
  TransformerParams actor_, critic_;
  AdamOptimizer adam_actor_, adam_critic_;
  long long adam_t_ = 0;

  Eigen::MatrixXd hidden_;            // (E*A) x d carried across steps
  std::vector<RngStream> act_rng_;    // per env, action sampling
  Eigen::VectorXd ep_return_;         // per env accumulator

  RolloutBatch batch_;
  std::vector<ShardSlot> slots_;
  std::vector<TransformerGrads> shard_ga_, shard_gc_;

  long long update_idx_ = 0;
  long long steps_done_ = 0;
};

}  // namespace utrack
