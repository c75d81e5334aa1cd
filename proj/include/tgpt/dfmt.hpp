#pragma once

// Dynamic fusion multi-scale transformer.
//
// Internal activations use a channels-last layout [batch, node, time, channel].
// Pipeline: scalar embedding -> two multi-head attentions fusing the recent
// window with the daily and weekly windows -> fused connectivity/correlation
// graph -> two-layer graph convolution with residual -> stacked
// spatial/temporal transformer blocks fed with temporal codes -> two 1x1
// convolutions producing the horizon.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgpt/autograd.hpp"
#include "tgpt/config.hpp"
#include "tgpt/data.hpp"
#include "tgpt/nn.hpp"

namespace tgpt {

using ag::Var;

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& layer)
      : std::runtime_error("non-finite values produced by layer '" + layer + "'"), layer_(layer) {}
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

template <class T>
Tensor<T> to_tensor(const Matrix& m) {
  Tensor<T> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<T>(m(i, j));
  return t;
}

inline Matrix to_matrix(const Tensor<double>& t) {
  if (t.rank() != 2) throw std::invalid_argument("to_matrix: rank must be 2");
  Matrix m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  for (std::size_t i = 0; i < t.numel(); ++i) m.data()[i] = t[i];
  return m;
}

/// D^-1/2 (A + I) D^-1/2 on a plain matrix.
inline Matrix normalize_adjacency(const Matrix& a) {
  ag::NoGradGuard ng;
  return to_matrix(ag::normalize_adjacency<double>(ag::constant(to_tensor<double>(a)))->value);
}

/// Normalized connectivity and correlation graphs; negative correlations are
/// clamped to zero before normalization.
struct NormalizedGraphs {
  Matrix a_hat_r;
  Matrix a_hat_c;

  static NormalizedGraphs from(const ConnectivityGraph& conn, const CorrelationGraph& corr) {
    return {normalize_adjacency(conn.a_r), normalize_adjacency(corr.a_c.cwiseMax(0.0))};
  }
};

/// Snapshot of the learned graph fusion.
struct FusedGraph {
  Matrix a_hat_r, a_hat_c;
  double w_r = 0, w_c = 0;        // logits
  double weight_r = 0.5, weight_c = 0.5;  // softmax of the logits
  Matrix a;
};

/// One-hot (time-of-day, day-of-week) rows: [batch, len, q + 7].
template <class T>
Tensor<T> one_hot_codes(const std::vector<TimeCode>& codes, std::size_t batch, std::size_t len,
                        std::size_t q) {
  if (codes.size() != batch * len) throw std::invalid_argument("one_hot_codes: size mismatch");
  Tensor<T> t({batch, len, q + 7});
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto& c = codes[i];
    if (c.time_of_day < 0 || static_cast<std::size_t>(c.time_of_day) >= q)
      throw std::out_of_range("time-of-day code " + std::to_string(c.time_of_day) +
                              " outside [0," + std::to_string(q) + ")");
    if (c.day_of_week < 0 || c.day_of_week >= 7)
      throw std::out_of_range("day-of-week code " + std::to_string(c.day_of_week) +
                              " outside [0,7)");
    t[i * (q + 7) + static_cast<std::size_t>(c.time_of_day)] = T(1);
    t[i * (q + 7) + q + static_cast<std::size_t>(c.day_of_week)] = T(1);
  }
  return t;
}

/// X^ST = A W2 (A W1 X) + X over the node axis of [B, N, L, C].
template <class T>
Var<T> graph_convolution(const Var<T>& x, const Var<T>& a, const Var<T>& w1, const Var<T>& w2) {
  auto h = ag::node_mix<T>(a, ag::linear<T>(x, w1));
  h = ag::node_mix<T>(a, ag::linear<T>(h, w2));
  return ag::add<T>(h, x);
}

template <class T>
class DfmtModel {
 public:
  struct Block {
    nn::MultiHeadAttention<T> spatial_attn;
    nn::FeedForward<T> spatial_ffn;
    nn::LayerNorm<T> spatial_norm;
    nn::MultiHeadAttention<T> temporal_attn;
    nn::FeedForward<T> temporal_ffn;
    nn::LayerNorm<T> temporal_norm;
  };

  DfmtModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
    cfg_.validate();
    const std::size_t c = cfg_.embed;
    auto& ps = params_;
    input_proj_ = nn::Dense<T>::make(ps, "input_proj", 1, c);
    fusion_rd_ = nn::MultiHeadAttention<T>::make(ps, "fusion_rd", c, cfg_.heads_fusion_rd);
    fusion_rw_ = nn::MultiHeadAttention<T>::make(ps, "fusion_rw", c, cfg_.heads_fusion_rw);
    fusion_w_rd_ = ps.uniform("fusion_w_rd", {c, c}, c);
    fusion_w_rw_ = ps.uniform("fusion_w_rw", {c, c}, c);
    fusion_conv_ = nn::Dense<T>::make(ps, "fusion_conv", c, c);
    graph_logits_ = ps.constant_init("graph_logits", {2}, T(0));
    gcn_w1_ = ps.uniform("gcn_w1", {c, c}, c);
    gcn_w2_ = ps.uniform("gcn_w2", {c, c}, c);
    code_embed_[0] = nn::Dense<T>::make(ps, "code_embed0", cfg_.q + 7, c);
    code_embed_[1] = nn::Dense<T>::make(ps, "code_embed1", c, c);
    code_embed_[2] = nn::Dense<T>::make(ps, "code_embed2", c, c);
    for (std::size_t l = 0; l < cfg_.n_blocks; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      Block b;
      b.spatial_attn = nn::MultiHeadAttention<T>::make(ps, p + "spatial_attn", c, cfg_.heads_spatial);
      b.spatial_ffn = nn::FeedForward<T>::make(ps, p + "spatial_ffn", c, cfg_.ffn_mult * c);
      b.spatial_norm = nn::LayerNorm<T>::make(ps, p + "spatial_norm", c);
      b.temporal_attn =
          nn::MultiHeadAttention<T>::make(ps, p + "temporal_attn", c, cfg_.heads_temporal);
      b.temporal_ffn = nn::FeedForward<T>::make(ps, p + "temporal_ffn", c, cfg_.ffn_mult * c);
      b.temporal_norm = nn::LayerNorm<T>::make(ps, p + "temporal_norm", c);
      blocks_.push_back(std::move(b));
    }
    head_time_ = nn::Dense<T>::make(ps, "head_time", cfg_.t_r, cfg_.horizon);
    head_out_ = nn::Dense<T>::make(ps, "head_out", c, 1);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const Var<T>& graph_logits() const { return graph_logits_; }

  /// Lifts scalar series [B, N, L] into [B, N, L, C].
  Var<T> embed_input(const Var<T>& x) const {
    const Shape& s = x->shape();
    return input_proj_(ag::reshape<T>(x, {s[0], s[1], s[2], 1}));
  }

  /// Multi-scale temporal fusion of embedded windows; output [B, N, T_r, C].
  /// Attention over the concatenated sequences is evaluated only at the
  /// recent positions, which equals cropping full self-attention to them.
  Var<T> temporal_fusion(const Var<T>& xr, const Var<T>& xd, const Var<T>& xw) const {
    const Shape& s = xr->shape();
    const std::size_t b = s[0], n = s[1], tr = s[2], c = s[3];
    auto flat = [&](const Var<T>& v) {
      return ag::reshape<T>(v, {b * n, v->shape()[2], c});
    };
    auto r = flat(xr);
    auto rd = ag::concat<T>({r, flat(xd)}, 1);
    auto rw = ag::concat<T>({r, flat(xw)}, 1);
    auto m_rd = fusion_rd_(r, rd);
    auto m_rw = fusion_rw_(r, rw);
    auto mixed = ag::add<T>(ag::add<T>(ag::linear<T>(m_rd, fusion_w_rd_),
                                       ag::linear<T>(m_rw, fusion_w_rw_)),
                            r);
    return ag::reshape<T>(fusion_conv_(mixed), {b, n, tr, c});
  }

  Var<T> fused_graph(const Var<T>& a_hat_r, const Var<T>& a_hat_c) const {
    return ag::fuse_graphs<T>(a_hat_r, a_hat_c, graph_logits_);
  }

  FusedGraph fused_graph_snapshot(const NormalizedGraphs& g) const {
    ag::NoGradGuard ng;
    FusedGraph f;
    f.a_hat_r = g.a_hat_r;
    f.a_hat_c = g.a_hat_c;
    f.w_r = static_cast<double>(graph_logits_->value[0]);
    f.w_c = static_cast<double>(graph_logits_->value[1]);
    const double mx = std::max(f.w_r, f.w_c);
    const double e0 = std::exp(f.w_r - mx), e1 = std::exp(f.w_c - mx);
    f.weight_r = e0 / (e0 + e1);
    f.weight_c = 1.0 - f.weight_r;
    auto a = fused_graph(ag::constant(to_tensor<T>(g.a_hat_r)), ag::constant(to_tensor<T>(g.a_hat_c)));
    f.a = to_matrix(a->value.template cast<double>());
    return f;
  }

  Var<T> graph_convolution(const Var<T>& x, const Var<T>& a) const {
    return tgpt::graph_convolution<T>(x, a, gcn_w1_, gcn_w2_);
  }

  /// One-hot codes [B, L, q+7] -> three 1x1 layers -> [B, L, C].
  Var<T> temporal_embedding(const std::vector<TimeCode>& codes, std::size_t batch,
                            std::size_t len) const {
    auto oh = ag::constant(one_hot_codes<T>(codes, batch, len, cfg_.q));
    auto h = ag::relu<T>(code_embed_[0](oh));
    h = ag::relu<T>(code_embed_[1](h));
    return code_embed_[2](h);
  }

  /// One spatial-temporal block on [B, N, L, C]; `code_emb` is [B, Lc, C].
  Var<T> st_block(std::size_t index, const Var<T>& x, const Var<T>& a,
                  const Var<T>& code_emb) const {
    const Block& blk = blocks_.at(index);
    const Shape& s = x->shape();
    const std::size_t b = s[0], n = s[1], l = s[2], c = s[3];

    // Spatial transformer: attention over nodes, graph as additive log-bias.
    auto bias = ag::log_eps<T>(a, static_cast<T>(cfg_.graph_bias_eps));
    auto xs = ag::reshape<T>(ag::permute<T>(x, {0, 2, 1, 3}), {b * l, n, c});
    auto ys = blk.spatial_ffn(blk.spatial_attn(xs, xs, bias));
    ys = ag::permute<T>(ag::reshape<T>(ys, {b, l, n, c}), {0, 2, 1, 3});
    auto ys_hat = blk.spatial_norm(ag::add<T>(ys, x));

    // Temporal transformer: queries at the content positions, keys/values
    // extended with the temporal code sequence.
    const std::size_t lc = code_emb->shape()[1];
    auto codes = ag::broadcast_insert<T>(code_emb, 1, n);  // [B, N, Lc, C]
    auto kv = ag::reshape<T>(ag::concat<T>({ys_hat, codes}, 2), {b * n, l + lc, c});
    auto qv = ag::reshape<T>(ys_hat, {b * n, l, c});
    auto yt = blk.temporal_ffn(blk.temporal_attn(qv, kv));
    yt = ag::reshape<T>(yt, {b, n, l, c});
    return blk.temporal_norm(ag::add<T>(yt, ys_hat));
  }

  /// Conv(ReLU(Conv(x))): the first 1x1 conv maps T_r time channels to the
  /// horizon, the second maps C feature channels to one value. [B,N,T_r,C] -> [B,N,tau].
  Var<T> output_head(const Var<T>& x) const {
    const Shape& s = x->shape();
    auto h = ag::relu<T>(head_time_(ag::permute<T>(x, {0, 1, 3, 2})));  // [B,N,C,tau]
    h = head_out_(ag::permute<T>(h, {0, 1, 3, 2}));                    // [B,N,tau,1]
    return ag::reshape<T>(h, {s[0], s[1], cfg_.horizon});
  }

  /// Full forward pass in normalized units. Graph inputs are the normalized
  /// connectivity and correlation matrices [N, N].
  Var<T> forward(const WindowBatch& batch, const Var<T>& a_hat_r, const Var<T>& a_hat_c) const {
    check_batch(batch);
    const std::size_t b = batch.batch, n = batch.n_nodes;
    auto xr = embed_input(input_var(batch.x_r, {b, n, cfg_.t_r}));
    auto xd = embed_input(input_var(batch.x_d, {b, n, cfg_.t_d}));
    auto xw = embed_input(input_var(batch.x_w, {b, n, cfg_.t_w}));
    auto xt = checked(temporal_fusion(xr, xd, xw), "temporal_fusion");
    auto a = checked(fused_graph(a_hat_r, a_hat_c), "graph_fusion");
    auto x = checked(graph_convolution(xt, a), "graph_convolution");
    Var<T> emb_hist, emb_pred;
    for (std::size_t l = 0; l < cfg_.n_blocks; ++l) {
      const bool last = l + 1 == cfg_.n_blocks;
      Var<T>& emb = last ? emb_pred : emb_hist;
      if (!emb)
        emb = last ? temporal_embedding(batch.t_p, b, cfg_.horizon)
                   : temporal_embedding(batch.t_h, b, cfg_.t_r);
      x = checked(st_block(l, x, a, emb), "st_block" + std::to_string(l));
    }
    return checked(output_head(x), "output_head");
  }

  Var<T> forward(const WindowBatch& batch, const NormalizedGraphs& graphs) const {
    return forward(batch, ag::constant(to_tensor<T>(graphs.a_hat_r)),
                   ag::constant(to_tensor<T>(graphs.a_hat_c)));
  }

 private:
  static Var<T> input_var(const std::vector<double>& v, Shape shape) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
    return ag::constant(std::move(t));
  }

  static Var<T> checked(Var<T> v, const std::string& layer) {
    if (!v->value.all_finite()) throw NonFiniteError(layer);
    return v;
  }

  void check_batch(const WindowBatch& b) const {
    if (b.t_r != cfg_.t_r || b.t_d != cfg_.t_d || b.t_w != cfg_.t_w || b.horizon != cfg_.horizon)
      throw std::invalid_argument("batch window lengths do not match model config");
    if (b.batch == 0) throw std::invalid_argument("empty batch");
    for (const auto* v : {&b.x_r, &b.x_d, &b.x_w})
      for (double x : *v)
        if (!std::isfinite(x)) throw NonFiniteError("input");
  }

  ModelConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Dense<T> input_proj_;
  nn::MultiHeadAttention<T> fusion_rd_, fusion_rw_;
  Var<T> fusion_w_rd_, fusion_w_rw_;
  nn::Dense<T> fusion_conv_;
  Var<T> graph_logits_;
  Var<T> gcn_w1_, gcn_w2_;
  nn::Dense<T> code_embed_[3];
  std::vector<Block> blocks_;
  nn::Dense<T> head_time_, head_out_;
};

/// Copies parameter values between models with identical layouts (e.g. double -> float).
template <class To, class From>
void copy_parameters(const DfmtModel<From>& src, DfmtModel<To>& dst) {
  const auto& a = src.params().items();
  const auto& b = dst.params().items();
  if (a.size() != b.size()) throw std::invalid_argument("copy_parameters: layout mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second->shape() != b[i].second->shape())
      throw std::invalid_argument("copy_parameters: mismatch at " + a[i].first);
    b[i].second->value = a[i].second->value.template cast<To>();
  }
}

}  // namespace tgpt
