#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "utrack/env_config.hpp"
#include "utrack/errors.hpp"

namespace utrack {

struct NetConfig {
  int z = kFeatureDim;  // token feature width
  int d = 64;           // model width
  int heads = 4;
  int blocks = 2;
};

/// y = x * W + b, rows are tokens. Biases and 1-row parameters are stored as
/// 1xN matrices so every parameter tensor has one uniform type.
struct LinearLayer {
  Eigen::MatrixXd W;
  Eigen::MatrixXd b;  // 1 x out
};

struct LayerNormParams {
  Eigen::MatrixXd gain;  // 1 x d
  Eigen::MatrixXd bias;  // 1 x d
};

struct BlockParams {
  LayerNormParams ln1;
  LinearLayer wq, wk, wv, wo;
  LayerNormParams ln2;
  LinearLayer ff1, ff2;  // d -> 4d -> d
};

/// Entity-token transformer. The same parameter set drives any number of
/// entities; the actor carries a recurrent hidden token appended to the
/// inputs and read back from the output, the critic mean-pools.
struct TransformerParams {
  NetConfig cfg;
  int out_dim = 0;
  bool has_hidden = false;

  LinearLayer embed;  // z -> d
  std::vector<BlockParams> blocks;
  LayerNormParams ln_final;
  LinearLayer head;          // d -> out_dim
  Eigen::MatrixXd hidden0;   // 1 x d learned initial hidden token (actor)

  /// Tensors in a stable order; the order defines checkpoint layout and
  /// optimizer state alignment.
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> tensor_refs();
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> tensor_refs() const;

  std::size_t parameter_count() const;
  void set_zero();
};

using TransformerGrads = TransformerParams;

/// Scaled-uniform fan-in init for linear maps, ones/zeros for layer norms,
/// zeros for biases and the initial hidden token. Deterministic per seed.
TransformerParams init_params(const NetConfig& cfg, int out_dim, bool with_hidden,
                              std::uint64_t seed);

/// Same shapes as `like`, all zeros; gradient accumulator.
TransformerGrads zero_grads(const TransformerParams& like);

inline constexpr double kLayerNormEps = 1e-5;

struct LnCache {
  Eigen::MatrixXd xhat;     // normalized pre gain/bias
  Eigen::VectorXd inv_std;  // per row
};

struct BlockCache {
  Eigen::MatrixXd x_in;  // block input
  LnCache ln1;
  Eigen::MatrixXd t1;         // ln1 output
  Eigen::MatrixXd q, k, v;    // projections
  Eigen::MatrixXd attn;       // (B*heads*m) x m softmax rows
  Eigen::MatrixXd ctx;        // concatenated head outputs, pre-Wo
  Eigen::MatrixXd x_mid;      // after attention residual
  LnCache ln2;
  Eigen::MatrixXd t2;  // ln2 output
  Eigen::MatrixXd z1;  // ff1 pre-activation
  Eigen::MatrixXd h1;  // relu(z1)
};

/// Activations of one batched forward pass, kept for the analytic backward.
struct ForwardCache {
  int batch = 0;   // B items
  int tokens = 0;  // m rows per item (hidden token included if present)
  Eigen::MatrixXd x_tokens;  // raw entity tokens (B*n) x z
  Eigen::MatrixXd x0;        // assembled model input (B*m) x d
  std::vector<BlockCache> blocks;
  LnCache ln_final;
  Eigen::MatrixXd y;       // final-norm output (B*m) x d
  Eigen::MatrixXd pooled;  // critic: B x d mean pool
  Eigen::MatrixXd out;     // B x out_dim
};

struct ActorOutput {
  Eigen::MatrixXd logits;      // B x out_dim
  Eigen::MatrixXd hidden_out;  // B x d, final-norm embedding of the hidden row
};

/// Batched actor pass over B items of `n_rows` entity tokens each.
/// `tokens` stacks the items ((B*n_rows) x z); `hidden_in` is B x d.
/// Logits and the next hidden state are read from the hidden-token output
/// position, which attends over all entities and carries history.
ActorOutput actor_forward(const TransformerParams& p,
                          const Eigen::Ref<const Eigen::MatrixXd>& tokens,
                          const Eigen::Ref<const Eigen::MatrixXd>& hidden_in,
                          int n_rows, ForwardCache* cache = nullptr);

/// Batched critic pass; value per item from mean-pooled output embeddings.
Eigen::VectorXd critic_forward(const TransformerParams& p,
                               const Eigen::Ref<const Eigen::MatrixXd>& tokens,
                               int n_rows, ForwardCache* cache = nullptr);

/// Exact gradients for the actor pass. `d_logits` (B x out_dim) and
/// `d_hidden_out` (B x d) are the upstream gradients; parameter gradients
/// accumulate into `grads`; the gradient w.r.t. hidden_in lands in
/// `d_hidden_in` (assigned, not accumulated) for chaining through time.
void actor_backward(const TransformerParams& p, const ForwardCache& cache,
                    const Eigen::MatrixXd& d_logits,
                    const Eigen::MatrixXd& d_hidden_out, TransformerGrads& grads,
                    Eigen::MatrixXd* d_hidden_in);

/// Exact gradients for the critic pass.
void critic_backward(const TransformerParams& p, const ForwardCache& cache,
                     const Eigen::VectorXd& d_value, TransformerGrads& grads);

/// Masked categorical head. Probabilities over legal actions; illegal
/// entries are exactly zero. Throws ContractViolation on an all-false mask.
Eigen::VectorXd masked_probs(const Eigen::RowVectorXd& logits,
                             const std::array<bool, kNumActions>& mask);

}  // namespace utrack
