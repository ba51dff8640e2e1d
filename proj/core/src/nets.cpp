#include "utrack/nets.hpp"

#include <cmath>

#include "utrack/rng.hpp"

namespace utrack {

namespace {

template <typename Params, typename Mat>
std::vector<std::pair<std::string, Mat*>> collect_refs(Params& p) {
  std::vector<std::pair<std::string, Mat*>> refs;
  refs.reserve(6 + p.blocks.size() * 16);
  refs.push_back({"embed.W", &p.embed.W});
  refs.push_back({"embed.b", &p.embed.b});
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& blk = p.blocks[i];
    const std::string base = "block" + std::to_string(i) + ".";
    refs.push_back({base + "ln1.g", &blk.ln1.gain});
    refs.push_back({base + "ln1.b", &blk.ln1.bias});
    refs.push_back({base + "wq.W", &blk.wq.W});
    refs.push_back({base + "wq.b", &blk.wq.b});
    refs.push_back({base + "wk.W", &blk.wk.W});
    refs.push_back({base + "wk.b", &blk.wk.b});
    refs.push_back({base + "wv.W", &blk.wv.W});
    refs.push_back({base + "wv.b", &blk.wv.b});
    refs.push_back({base + "wo.W", &blk.wo.W});
    refs.push_back({base + "wo.b", &blk.wo.b});
    refs.push_back({base + "ln2.g", &blk.ln2.gain});
    refs.push_back({base + "ln2.b", &blk.ln2.bias});
    refs.push_back({base + "ff1.W", &blk.ff1.W});
    refs.push_back({base + "ff1.b", &blk.ff1.b});
    refs.push_back({base + "ff2.W", &blk.ff2.W});
    refs.push_back({base + "ff2.b", &blk.ff2.b});
  }
  refs.push_back({"ln_f.g", &p.ln_final.gain});
  refs.push_back({"ln_f.b", &p.ln_final.bias});
  refs.push_back({"head.W", &p.head.W});
  refs.push_back({"head.b", &p.head.b});
  if (p.has_hidden) refs.push_back({"hidden0", &p.hidden0});
  return refs;
}

void ln_forward(const Eigen::MatrixXd& x, const LayerNormParams& p, LnCache& c,
                Eigen::MatrixXd& out) {
  const auto d = static_cast<double>(x.cols());
  const Eigen::VectorXd mu = x.rowwise().mean();
  const Eigen::VectorXd var =
      (x.colwise() - mu).array().square().rowwise().sum() / d;
  c.inv_std = (var.array() + kLayerNormEps).rsqrt();
  c.xhat = (x.colwise() - mu).array().colwise() * c.inv_std.array();
  out = (c.xhat.array().rowwise() * p.gain.row(0).array()).rowwise() +
        p.bias.row(0).array();
}

// dX is assigned; parameter grads accumulate.
void ln_backward(const Eigen::MatrixXd& d_out, const LnCache& c,
                 const LayerNormParams& p, LayerNormParams& g,
                 Eigen::MatrixXd& d_x) {
  g.gain.row(0).array() += (d_out.array() * c.xhat.array()).colwise().sum();
  g.bias.row(0).array() += d_out.array().colwise().sum();

  const Eigen::MatrixXd d_xhat =
      d_out.array().rowwise() * p.gain.row(0).array();
  const Eigen::VectorXd m1 = d_xhat.rowwise().mean();
  const Eigen::VectorXd m2 =
      (d_xhat.array() * c.xhat.array()).rowwise().mean();
  d_x = ((d_xhat.colwise() - m1).array() -
         (c.xhat.array().colwise() * m2.array()))
            .colwise() *
        c.inv_std.array();
}

void linear_forward(const Eigen::MatrixXd& x, const LinearLayer& l,
                    Eigen::MatrixXd& out) {
  out.noalias() = x * l.W;
  out.rowwise() += l.b.row(0);
}

// d_x assigned when non-null.
void linear_backward(const Eigen::MatrixXd& x, const LinearLayer& l,
                     const Eigen::MatrixXd& d_out, LinearLayer& g,
                     Eigen::MatrixXd* d_x) {
  g.W.noalias() += x.transpose() * d_out;
  g.b.row(0) += d_out.colwise().sum();
  if (d_x) d_x->noalias() = d_out * l.W.transpose();
}

void block_forward(const BlockParams& p, int batch, int m, int heads,
                   BlockCache& c, Eigen::MatrixXd& x) {
  const int d = static_cast<int>(x.cols());
  const int dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  c.x_in = x;
  ln_forward(c.x_in, p.ln1, c.ln1, c.t1);
  linear_forward(c.t1, p.wq, c.q);
  linear_forward(c.t1, p.wk, c.k);
  linear_forward(c.t1, p.wv, c.v);

  c.attn.resize(static_cast<Eigen::Index>(batch) * heads * m, m);
  c.ctx.resize(x.rows(), d);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * m;
    for (int h = 0; h < heads; ++h) {
      auto qh = c.q.block(r0, h * dk, m, dk);
      auto kh = c.k.block(r0, h * dk, m, dk);
      auto vh = c.v.block(r0, h * dk, m, dk);
      auto s = c.attn.block(static_cast<Eigen::Index>(b * heads + h) * m, 0, m, m);
      s.noalias() = qh * kh.transpose();
      s *= scale;
      for (int r = 0; r < m; ++r) {
        auto row = s.row(r).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
      }
      c.ctx.block(r0, h * dk, m, dk).noalias() = s * vh;
    }
  }

  Eigen::MatrixXd attn_out;
  linear_forward(c.ctx, p.wo, attn_out);
  c.x_mid = c.x_in + attn_out;

  ln_forward(c.x_mid, p.ln2, c.ln2, c.t2);
  linear_forward(c.t2, p.ff1, c.z1);
  c.h1 = c.z1.cwiseMax(0.0);
  Eigen::MatrixXd ff_out;
  linear_forward(c.h1, p.ff2, ff_out);
  x = c.x_mid + ff_out;
}

// d_x carries the gradient w.r.t. the block output on entry and w.r.t. the
// block input on exit.
void block_backward(const BlockParams& p, const BlockCache& c, int batch, int m,
                    int heads, BlockParams& g, Eigen::MatrixXd& d_x) {
  const int d = static_cast<int>(d_x.cols());
  const int dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  // feed-forward branch
  Eigen::MatrixXd d_h1;
  linear_backward(c.h1, p.ff2, d_x, g.ff2, &d_h1);
  const Eigen::MatrixXd d_z1 =
      (c.z1.array() > 0.0).select(d_h1.array(), 0.0);
  Eigen::MatrixXd d_t2;
  linear_backward(c.t2, p.ff1, d_z1, g.ff1, &d_t2);
  Eigen::MatrixXd d_mid_ln;
  ln_backward(d_t2, c.ln2, p.ln2, g.ln2, d_mid_ln);
  const Eigen::MatrixXd d_mid = d_x + d_mid_ln;

  // attention branch
  Eigen::MatrixXd d_ctx;
  linear_backward(c.ctx, p.wo, d_mid, g.wo, &d_ctx);

  Eigen::MatrixXd d_q = Eigen::MatrixXd::Zero(d_x.rows(), d);
  Eigen::MatrixXd d_k = Eigen::MatrixXd::Zero(d_x.rows(), d);
  Eigen::MatrixXd d_v = Eigen::MatrixXd::Zero(d_x.rows(), d);
  Eigen::MatrixXd d_a(m, m), d_s(m, m);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * m;
    for (int h = 0; h < heads; ++h) {
      auto a = c.attn.block(static_cast<Eigen::Index>(b * heads + h) * m, 0, m, m);
      auto qh = c.q.block(r0, h * dk, m, dk);
      auto kh = c.k.block(r0, h * dk, m, dk);
      auto vh = c.v.block(r0, h * dk, m, dk);
      auto d_ctx_h = d_ctx.block(r0, h * dk, m, dk);

      d_a.noalias() = d_ctx_h * vh.transpose();
      d_v.block(r0, h * dk, m, dk).noalias() += a.transpose() * d_ctx_h;

      // softmax backward, rowwise
      const Eigen::VectorXd dot = (d_a.array() * a.array()).rowwise().sum();
      d_s = a.array() * (d_a.colwise() - dot).array();

      d_q.block(r0, h * dk, m, dk).noalias() += scale * (d_s * kh);
      d_k.block(r0, h * dk, m, dk).noalias() += scale * (d_s.transpose() * qh);
    }
  }

  Eigen::MatrixXd d_t1, tmp;
  linear_backward(c.t1, p.wq, d_q, g.wq, &d_t1);
  linear_backward(c.t1, p.wk, d_k, g.wk, &tmp);
  d_t1 += tmp;
  linear_backward(c.t1, p.wv, d_v, g.wv, &tmp);
  d_t1 += tmp;

  Eigen::MatrixXd d_in_ln;
  ln_backward(d_t1, c.ln1, p.ln1, g.ln1, d_in_ln);
  d_x = d_mid + d_in_ln;
}

// Runs embed + blocks + final norm; fills the cache and returns tokens per
// item. hidden_in may be null (critic).
void trunk_forward(const TransformerParams& p,
                   const Eigen::Ref<const Eigen::MatrixXd>& tokens,
                   const Eigen::Ref<const Eigen::MatrixXd>* hidden_in, int n_rows,
                   ForwardCache& c) {
  if (n_rows < 1) throw ContractViolation("forward: need >= 1 token row per item");
  if (tokens.rows() % n_rows != 0)
    throw ContractViolation("forward: token stack not a multiple of n_rows");
  const int batch = static_cast<int>(tokens.rows()) / n_rows;
  const int m = n_rows + (hidden_in ? 1 : 0);
  const int d = p.cfg.d;

  c.batch = batch;
  c.tokens = m;
  c.x_tokens = tokens;

  Eigen::MatrixXd embedded;
  linear_forward(c.x_tokens, p.embed, embedded);

  c.x0.resize(static_cast<Eigen::Index>(batch) * m, d);
  for (int b = 0; b < batch; ++b) {
    c.x0.middleRows(static_cast<Eigen::Index>(b) * m, n_rows) =
        embedded.middleRows(static_cast<Eigen::Index>(b) * n_rows, n_rows);
    if (hidden_in)
      c.x0.row(static_cast<Eigen::Index>(b) * m + n_rows) = hidden_in->row(b);
  }

  c.blocks.resize(p.blocks.size());
  Eigen::MatrixXd x = c.x0;
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    block_forward(p.blocks[i], batch, m, p.cfg.heads, c.blocks[i], x);
  ln_forward(x, p.ln_final, c.ln_final, c.y);
}

// Backward through blocks + embed given d_y; d_hidden_in assigned per item
// when requested.
void trunk_backward(const TransformerParams& p, const ForwardCache& c,
                    const Eigen::MatrixXd& d_y, TransformerGrads& g,
                    Eigen::MatrixXd* d_hidden_in) {
  const int batch = c.batch;
  const int m = c.tokens;
  const bool has_hidden = p.has_hidden;
  const int n_rows = has_hidden ? m - 1 : m;

  Eigen::MatrixXd d_x;
  ln_backward(d_y, c.ln_final, p.ln_final, g.ln_final, d_x);
  for (std::size_t i = p.blocks.size(); i-- > 0;)
    block_backward(p.blocks[i], c.blocks[i], batch, m, p.cfg.heads,
                   g.blocks[i], d_x);

  Eigen::MatrixXd d_embedded(static_cast<Eigen::Index>(batch) * n_rows, p.cfg.d);
  for (int b = 0; b < batch; ++b) {
    d_embedded.middleRows(static_cast<Eigen::Index>(b) * n_rows, n_rows) =
        d_x.middleRows(static_cast<Eigen::Index>(b) * m, n_rows);
    if (has_hidden && d_hidden_in)
      d_hidden_in->row(b) = d_x.row(static_cast<Eigen::Index>(b) * m + n_rows);
  }
  linear_backward(c.x_tokens, p.embed, d_embedded, g.embed, nullptr);
}

}  // namespace

std::vector<std::pair<std::string, Eigen::MatrixXd*>>
TransformerParams::tensor_refs() {
  return collect_refs<TransformerParams, Eigen::MatrixXd>(*this);
}

std::vector<std::pair<std::string, const Eigen::MatrixXd*>>
TransformerParams::tensor_refs() const {
  return collect_refs<const TransformerParams, const Eigen::MatrixXd>(*this);
}

std::size_t TransformerParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensor_refs()) n += static_cast<std::size_t>(t->size());
  return n;
}

void TransformerParams::set_zero() {
  for (auto& [name, t] : tensor_refs()) t->setZero();
}

TransformerParams init_params(const NetConfig& cfg, int out_dim, bool with_hidden,
                              std::uint64_t seed) {
  if (cfg.d < 1 || cfg.heads < 1 || cfg.blocks < 1 || cfg.z < 1)
    throw ConfigError("net dims must be >= 1");
  if (cfg.d % cfg.heads != 0)
    throw ConfigError("net d_model (" + std::to_string(cfg.d) +
                      ") must be divisible by heads (" + std::to_string(cfg.heads) + ")");
  if (out_dim < 1) throw ConfigError("net out_dim must be >= 1");

  TransformerParams p;
  p.cfg = cfg;
  p.out_dim = out_dim;
  p.has_hidden = with_hidden;

  const int d = cfg.d;
  p.embed.W.resize(cfg.z, d);
  p.embed.b.resize(1, d);
  p.blocks.resize(static_cast<std::size_t>(cfg.blocks));
  for (auto& blk : p.blocks) {
    for (LinearLayer* l : {&blk.wq, &blk.wk, &blk.wv, &blk.wo}) {
      l->W.resize(d, d);
      l->b.resize(1, d);
    }
    blk.ff1.W.resize(d, 4 * d);
    blk.ff1.b.resize(1, 4 * d);
    blk.ff2.W.resize(4 * d, d);
    blk.ff2.b.resize(1, d);
    blk.ln1.gain.resize(1, d);
    blk.ln1.bias.resize(1, d);
    blk.ln2.gain.resize(1, d);
    blk.ln2.bias.resize(1, d);
  }
  p.ln_final.gain.resize(1, d);
  p.ln_final.bias.resize(1, d);
  p.head.W.resize(d, out_dim);
  p.head.b.resize(1, out_dim);
  p.hidden0.resize(1, with_hidden ? d : 0);
  if (!with_hidden) p.hidden0.resize(0, 0);

  RngStream rng(RngStream::derive_key(seed, 0x6e6574u, static_cast<std::uint64_t>(out_dim),
                                      with_hidden ? 1u : 0u),
                0);
  for (auto& [name, t] : p.tensor_refs()) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".W") == 0) {
      const double s = 1.0 / std::sqrt(static_cast<double>(t->rows()));
      for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] = rng.uniform(-s, s);
    } else if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0) {
      t->setOnes();
    } else {
      t->setZero();
    }
  }
  return p;
}

TransformerGrads zero_grads(const TransformerParams& like) {
  TransformerGrads g = like;
  g.set_zero();
  return g;
}

ActorOutput actor_forward(const TransformerParams& p,
                          const Eigen::Ref<const Eigen::MatrixXd>& tokens,
                          const Eigen::Ref<const Eigen::MatrixXd>& hidden_in,
                          int n_rows, ForwardCache* cache) {
  if (!p.has_hidden)
    throw ContractViolation("actor_forward: params built without hidden token");
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  trunk_forward(p, tokens, &hidden_in, n_rows, c);

  const int batch = c.batch;
  const int m = c.tokens;
  ActorOutput out;
  out.hidden_out.resize(batch, p.cfg.d);
  for (int b = 0; b < batch; ++b)
    out.hidden_out.row(b) = c.y.row(static_cast<Eigen::Index>(b) * m + (m - 1));
  linear_forward(out.hidden_out, p.head, out.logits);
  c.out = out.logits;
  return out;
}

Eigen::VectorXd critic_forward(const TransformerParams& p,
                               const Eigen::Ref<const Eigen::MatrixXd>& tokens,
                               int n_rows, ForwardCache* cache) {
  if (p.has_hidden)
    throw ContractViolation("critic_forward: params carry a hidden token");
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  trunk_forward(p, tokens, nullptr, n_rows, c);

  const int batch = c.batch;
  const int m = c.tokens;
  c.pooled.resize(batch, p.cfg.d);
  for (int b = 0; b < batch; ++b)
    c.pooled.row(b) =
        c.y.middleRows(static_cast<Eigen::Index>(b) * m, m).colwise().mean();
  linear_forward(c.pooled, p.head, c.out);
  return c.out.col(0);
}

void actor_backward(const TransformerParams& p, const ForwardCache& cache,
                    const Eigen::MatrixXd& d_logits,
                    const Eigen::MatrixXd& d_hidden_out, TransformerGrads& grads,
                    Eigen::MatrixXd* d_hidden_in) {
  const int batch = cache.batch;
  const int m = cache.tokens;

  Eigen::MatrixXd y_hidden(batch, p.cfg.d);
  for (int b = 0; b < batch; ++b)
    y_hidden.row(b) = cache.y.row(static_cast<Eigen::Index>(b) * m + (m - 1));

  Eigen::MatrixXd d_y_hidden;
  linear_backward(y_hidden, p.head, d_logits, grads.head, &d_y_hidden);
  d_y_hidden += d_hidden_out;

  Eigen::MatrixXd d_y = Eigen::MatrixXd::Zero(cache.y.rows(), cache.y.cols());
  for (int b = 0; b < batch; ++b)
    d_y.row(static_cast<Eigen::Index>(b) * m + (m - 1)) = d_y_hidden.row(b);

  if (d_hidden_in) d_hidden_in->resize(batch, p.cfg.d);
  trunk_backward(p, cache, d_y, grads, d_hidden_in);
}

void critic_backward(const TransformerParams& p, const ForwardCache& cache,
                     const Eigen::VectorXd& d_value, TransformerGrads& grads) {
  const int batch = cache.batch;
  const int m = cache.tokens;

  Eigen::MatrixXd d_pooled;
  linear_backward(cache.pooled, p.head, d_value, grads.head, &d_pooled);

  Eigen::MatrixXd d_y(cache.y.rows(), cache.y.cols());
  const double inv_m = 1.0 / static_cast<double>(m);
  for (int b = 0; b < batch; ++b)
    d_y.middleRows(static_cast<Eigen::Index>(b) * m, m) =
        (d_pooled.row(b) * inv_m).replicate(m, 1);

  trunk_backward(p, cache, d_y, grads, nullptr);
}

Eigen::VectorXd masked_probs(const Eigen::RowVectorXd& logits,
                             const std::array<bool, kNumActions>& mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < kNumActions; ++i)
    if (mask[static_cast<std::size_t>(i)]) mx = std::max(mx, logits(i));
  if (!std::isfinite(mx))
    throw ContractViolation("masked_probs: action mask allows nothing");

  Eigen::VectorXd probs = Eigen::VectorXd::Zero(kNumActions);
  double sum = 0.0;
  for (int i = 0; i < kNumActions; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    probs(i) = std::exp(logits(i) - mx);
    sum += probs(i);
  }
  probs /= sum;
  return probs;
}

}  // namespace utrack
