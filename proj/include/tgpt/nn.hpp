#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tgpt/autograd.hpp"

namespace tgpt::nn {

using ag::Var;

/// Ordered, named collection of trainable leaves.
template <class T>
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : rng_(seed) {}

  /// Uniform fan-in initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  Var<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(dist(rng_));
    return add(name, std::move(t));
  }

  Var<T> constant_init(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>(std::move(shape), value));
  }

  Var<T> add(const std::string& name, Tensor<T> value) {
    for (const auto& [n, _] : params_)
      if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = ag::parameter<T>(std::move(value), name);
    params_.emplace_back(name, p);
    return p;
  }

  /// Registers an existing leaf, e.g. to optimize several modules together.
  Var<T> adopt(const std::string& name, Var<T> p) {
    for (const auto& [n, _] : params_)
      if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
    params_.emplace_back(name, p);
    return p;
  }

  void adopt_all(const std::string& prefix, const ParamSet& other) {
    for (const auto& [n, p] : other.items()) adopt(prefix + n, p);
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Var<T> find(const std::string& name) const {
    for (const auto& [n, p] : params_)
      if (n == name) return p;
    return nullptr;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p->numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p->zero_grad();
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::mt19937_64 rng_;
};

template <class T>
struct Dense {
  Var<T> w;
  Var<T> b;  // may be null

  static Dense make(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                    bool bias = true) {
    Dense d;
    d.w = ps.uniform(name + ".w", {in, out}, in);
    if (bias) d.b = ps.uniform(name + ".b", {out}, in);
    return d;
  }

  Var<T> operator()(const Var<T>& x) const { return ag::linear<T>(x, w, b); }
};

template <class T>
struct LayerNorm {
  Var<T> gamma, beta;

  static LayerNorm make(ParamSet<T>& ps, const std::string& name, std::size_t dim) {
    return {ps.constant_init(name + ".gamma", {dim}, T(1)),
            ps.constant_init(name + ".beta", {dim}, T(0))};
  }

  Var<T> operator()(const Var<T>& x) const { return ag::layer_norm<T>(x, gamma, beta); }
};

/// Position-wise feed-forward: Linear(C, hidden) -> ReLU -> Linear(hidden, C).
template <class T>
struct FeedForward {
  Dense<T> up, down;

  static FeedForward make(ParamSet<T>& ps, const std::string& name, std::size_t dim,
                          std::size_t hidden) {
    return {Dense<T>::make(ps, name + ".up", dim, hidden),
            Dense<T>::make(ps, name + ".down", hidden, dim)};
  }

  Var<T> operator()(const Var<T>& x) const { return down(ag::relu(up(x))); }
};

/// Multi-head scaled dot-product attention over the second-to-last axis.
///
/// Queries come from `q_in` [G, Lq, C]; keys and values from `kv_in` [G, Lk, C].
/// Heads are concatenated and mixed by an output projection.
template <class T>
struct MultiHeadAttention {
  std::size_t heads = 1;
  std::size_t dim = 0;
  Var<T> wq, wk, wv, wo;

  static MultiHeadAttention make(ParamSet<T>& ps, const std::string& name, std::size_t dim,
                                 std::size_t heads) {
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument(name + ": embed size " + std::to_string(dim) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    MultiHeadAttention m;
    m.heads = heads;
    m.dim = dim;
    m.wq = ps.uniform(name + ".wq", {dim, dim}, dim);
    m.wk = ps.uniform(name + ".wk", {dim, dim}, dim);
    m.wv = ps.uniform(name + ".wv", {dim, dim}, dim);
    m.wo = ps.uniform(name + ".wo", {dim, dim}, dim);
    return m;
  }

  /// `bias` is an optional additive [Lq, Lk] term on the attention logits.
  /// When `probs` is non-null it receives the [G*heads, Lq, Lk] attention weights.
  Var<T> operator()(const Var<T>& q_in, const Var<T>& kv_in, const Var<T>& bias = nullptr,
                    Tensor<T>* probs = nullptr) const {
    const Shape& qs = q_in->shape();
    const Shape& ks = kv_in->shape();
    if (qs.size() != 3 || ks.size() != 3 || qs[0] != ks[0] || qs[2] != dim || ks[2] != dim)
      throw std::invalid_argument("attention: bad input shapes " + shape_str(qs) + ", " +
                                  shape_str(ks));
    const std::size_t g = qs[0], lq = qs[1], lk = ks[1], d = dim / heads;
    auto split = [&](const Var<T>& x, std::size_t len) {
      auto r = ag::reshape<T>(x, {g, len, heads, d});
      return ag::reshape<T>(ag::permute<T>(r, {0, 2, 1, 3}), {g * heads, len, d});
    };
    auto q = split(ag::linear<T>(q_in, wq), lq);
    auto k = split(ag::linear<T>(kv_in, wk), lk);
    auto v = split(ag::linear<T>(kv_in, wv), lk);
    auto scores = ag::scale<T>(ag::bmm<T>(q, k, true), T(1) / std::sqrt(static_cast<T>(d)));
    if (bias) scores = ag::add_bias2d<T>(scores, bias);
    auto p = ag::softmax_last<T>(scores);
    if (probs) *probs = p->value;
    auto o = ag::bmm<T>(p, v, false);
    o = ag::permute<T>(ag::reshape<T>(o, {g, heads, lq, d}), {0, 2, 1, 3});
    return ag::linear<T>(ag::reshape<T>(o, {g, lq, dim}), wo);
  }
};

/// Adam with global-norm gradient clipping.
template <class T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;  // <= 0 disables clipping
  };

  Adam(const ParamSet<T>& params, Options opt) : opt_(opt) {
    for (const auto& [_, p] : params.items()) {
      params_.push_back(p);
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }
  explicit Adam(const ParamSet<T>& params) : Adam(params, Options{}) {}

  /// Global L2 norm of current gradients.
  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      for (T g : p->grad.data) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  void step() {
    ++t_;
    double scale = 1.0;
    if (opt_.clip_norm > 0) {
      const double n = grad_norm();
      if (n > opt_.clip_norm) scale = opt_.clip_norm / n;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (p->grad.data.empty()) continue;
      for (std::size_t i = 0; i < p->numel(); ++i) {
        const double g = static_cast<double>(p->grad[i]) * scale;
        m_[k][i] = opt_.beta1 * m_[k][i] + (1 - opt_.beta1) * g;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1 - opt_.beta2) * g * g;
        const double upd = opt_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opt_.eps);
        p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - upd);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t steps_taken() const { return t_; }
  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }

 private:
  Options opt_;
  std::vector<Var<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace tgpt::nn
