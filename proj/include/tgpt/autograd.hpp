#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a shared handle to a graph node. Nodes keep strong references to
// their parents only, so dropping the loss releases the whole forward graph
// while parameters (leaf nodes owned by a model) survive.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tgpt/tensor.hpp"

namespace tgpt::ag {

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string name;
  std::vector<Var<T>> parents;
  std::function<void(Node&)> backward_fn;

  const Shape& shape() const { return value.shape; }
  std::size_t numel() const { return value.numel(); }

  Tensor<T>& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    return grad;
  }
  void zero_grad() {
    if (!grad.data.empty()) grad.fill(T(0));
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

template <class T>
Var<T> parameter(Tensor<T> v, std::string name = {}) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

/// Returns a constant holding a copy of v's value (cuts the graph).
template <class T>
Var<T> detach(const Var<T>& v) {
  return constant(v->value);
}

namespace detail {

template <class T>
Var<T> make(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!grad_mode()) return n;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
}

inline std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

template <class T>
void backward(const Var<T>& root) {
  if (root->numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a->shape(), b->shape(), "add");
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a->shape(), b->shape(), "sub");
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a->shape(), b->shape(), "mul");
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
  return detail::make<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] > T(0) ? a->value[i] : T(0);
  return detail::make<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (p->value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a->value[i]);
  return detail::make<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

/// log(a + eps), elementwise.
template <class T>
Var<T> log_eps(const Var<T>& a, T eps) {
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i] + eps);
  return detail::make<T>(std::move(out), {a}, [eps](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / (p->value[i] + eps);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a->value.data) s += v;
  return detail::make<T>(Tensor<T>({1}, s), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a->numel()));
}

/// Mean absolute error against a constant target.
template <class T>
Var<T> l1_loss(const Var<T>& pred, const Tensor<T>& target) {
  detail::require_same(pred->shape(), target.shape, "l1_loss");
  const std::size_t n = pred->numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(pred->value[i] - target[i]);
  Tensor<T> tgt = target;
  return detail::make<T>(
      Tensor<T>({1}, s / static_cast<T>(n)), {pred}, [tgt = std::move(tgt), n](Node<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->ensure_grad();
        const T w = self.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const T d = p->value[i] - tgt[i];
          g[i] += d > T(0) ? w : (d < T(0) ? -w : T(0));
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (shape_numel(shape) != a->numel())
    throw std::invalid_argument("reshape: " + shape_str(a->shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), a->value.data);
  return detail::make<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

// out[o] = in[perm-mapped index]; if accumulate_back, in_grad[...] += out_grad[o].
template <class T>
void permute_copy(Tensor<T>& in, const std::vector<std::size_t>& perm, Tensor<T>& out,
                  bool reverse_accumulate) {
  const std::size_t r = in.rank();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in.shape[i];
  std::vector<std::size_t> ostride(r);
  for (std::size_t i = 0; i < r; ++i) ostride[i] = in_stride[perm[i]];
  const Shape& os = out.shape;
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t n = out.numel();
  const std::size_t last = r - 1;
  for (std::size_t o = 0; o < n; ++o) {
    if (reverse_accumulate)
      in[src] += out[o];
    else
      out[o] = in[src];
    // odometer increment
    std::size_t d = last;
    ++idx[d];
    src += ostride[d];
    while (idx[d] == os[d] && d > 0) {
      src -= ostride[d] * os[d];
      idx[d] = 0;
      --d;
      ++idx[d];
      src += ostride[d];
    }
  }
}

}  // namespace detail

template <class T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> perm) {
  const Shape& s = a->shape();
  if (perm.size() != s.size()) throw std::invalid_argument("permute: rank mismatch");
  Shape os(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[perm.at(i)];
  Tensor<T> out(os);
  detail::permute_copy(a->value, perm, out, false);
  return detail::make<T>(std::move(out), {a}, [perm](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    detail::permute_copy(g, perm, self.grad, true);
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& a) {
  if (a->value.rank() != 2) throw std::invalid_argument("transpose2d: rank must be 2");
  return permute(a, {1, 0});
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input");
  Shape os = xs[0]->shape();
  if (axis >= os.size()) throw std::invalid_argument("concat: bad axis");
  os[axis] = 0;
  for (const auto& x : xs) {
    Shape s = x->shape();
    if (s.size() != os.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != xs[0]->shape()[i])
        throw std::invalid_argument("concat: length mismatch " + shape_str(s) + " vs " +
                                    shape_str(xs[0]->shape()));
    os[axis] += s[axis];
  }
  const std::size_t outer = detail::prod(os, 0, axis);
  const std::size_t inner = detail::prod(os, axis + 1, os.size());
  Tensor<T> out(os);
  std::vector<std::size_t> lens;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t len = x->shape()[axis];
    lens.push_back(len);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x->value.data.begin() + o * len * inner, len * inner,
                  out.data.begin() + (o * os[axis] + off) * inner);
    off += len;
  }
  return detail::make<T>(std::move(out), xs, [lens, outer, inner, axis](Node<T>& self) {
    const std::size_t total = self.shape()[axis];
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      const std::size_t len = lens[k];
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < len * inner; ++i)
            g[o * len * inner + i] += self.grad[(o * total + off) * inner + i];
      }
      off += len;
    }
  });
}

template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = a->shape();
  if (axis >= s.size() || start + len > s[axis])
    throw std::invalid_argument("slice: out of range on " + shape_str(s));
  Shape os = s;
  os[axis] = len;
  const std::size_t outer = detail::prod(s, 0, axis);
  const std::size_t inner = detail::prod(s, axis + 1, s.size());
  const std::size_t full = s[axis];
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a->value.data.begin() + (o * full + start) * inner, len * inner,
                out.data.begin() + o * len * inner);
  return detail::make<T>(std::move(out), {a}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len * inner; ++i)
        g[(o * full + start) * inner + i] += self.grad[o * len * inner + i];
  });
}

/// Inserts a new axis of size n at `axis`, repeating the input along it.
template <class T>
Var<T> broadcast_insert(const Var<T>& a, std::size_t axis, std::size_t n) {
  const Shape& s = a->shape();
  if (axis > s.size()) throw std::invalid_argument("broadcast_insert: bad axis");
  Shape os = s;
  os.insert(os.begin() + static_cast<std::ptrdiff_t>(axis), n);
  const std::size_t outer = detail::prod(s, 0, axis);
  const std::size_t inner = detail::prod(s, axis, s.size());
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(a->value.data.begin() + o * inner, inner,
                  out.data.begin() + (o * n + k) * inner);
  return detail::make<T>(std::move(out), {a}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i)
          g[o * inner + i] += self.grad[(o * n + k) * inner + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// y = x·W (+ b), contracting the last axis of x with W's first axis.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = nullptr) {
  using namespace detail;
  const Shape& xs = x->shape();
  if (w->value.rank() != 2 || xs.empty() || xs.back() != w->shape()[0])
    throw std::invalid_argument("linear: " + shape_str(xs) + " x " + shape_str(w->shape()));
  const std::size_t k = w->shape()[0], m = w->shape()[1];
  const std::size_t rows = x->numel() / k;
  if (b && b->numel() != m) throw std::invalid_argument("linear: bias size mismatch");
  Shape os = xs;
  os.back() = m;
  Tensor<T> out(os);
  CMapM<T> X(x->value.data.data(), rows, k);
  CMapM<T> W(w->value.data.data(), k, m);
  MapM<T> Y(out.data.data(), rows, m);
  Y.noalias() = X * W;
  if (b) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b->value.data.data(), m);
    Y.rowwise() += bv;
  }
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return make<T>(std::move(out), std::move(parents), [rows, k, m](Node<T>& self) {
    CMapM<T> dY(self.grad.data.data(), rows, m);
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    if (x->requires_grad) {
      MapM<T> dX(x->ensure_grad().data.data(), rows, k);
      dX.noalias() += dY * CMapM<T>(w->value.data.data(), k, m).transpose();
    }
    if (w->requires_grad) {
      MapM<T> dW(w->ensure_grad().data.data(), k, m);
      dW.noalias() += CMapM<T>(x->value.data.data(), rows, k).transpose() * dY;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(
          self.parents[2]->ensure_grad().data.data(), m);
      db += dY.colwise().sum();
    }
  });
}

/// 2-D matrix product.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a->value.rank() != 2) throw std::invalid_argument("matmul: lhs must be 2-D");
  return linear<T>(a, b, nullptr);
}

/// Batched product: [G,M,K]·[G,K,N] -> [G,M,N]; with trans_b, rhs is [G,N,K].
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b) {
  using namespace detail;
  const Shape& as = a->shape();
  const Shape& bs = b->shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0])
    throw std::invalid_argument("bmm: " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t g = as[0], m = as[1], k = as[2];
  const std::size_t n = trans_b ? bs[1] : bs[2];
  if ((trans_b ? bs[2] : bs[1]) != k) throw std::invalid_argument("bmm: inner dim mismatch");
  Tensor<T> out({g, m, n});
  for (std::size_t i = 0; i < g; ++i) {
    CMapM<T> A(a->value.data.data() + i * m * k, m, k);
    MapM<T> C(out.data.data() + i * m * n, m, n);
    if (trans_b)
      C.noalias() = A * CMapM<T>(b->value.data.data() + i * n * k, n, k).transpose();
    else
      C.noalias() = A * CMapM<T>(b->value.data.data() + i * k * n, k, n);
  }
  return make<T>(std::move(out), {a, b}, [g, m, k, n, trans_b](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    T* da = a->requires_grad ? a->ensure_grad().data.data() : nullptr;
    T* db = b->requires_grad ? b->ensure_grad().data.data() : nullptr;
    for (std::size_t i = 0; i < g; ++i) {
      CMapM<T> dC(self.grad.data.data() + i * m * n, m, n);
      CMapM<T> A(a->value.data.data() + i * m * k, m, k);
      if (trans_b) {
        CMapM<T> B(b->value.data.data() + i * n * k, n, k);
        if (da) MapM<T>(da + i * m * k, m, k).noalias() += dC * B;
        if (db) MapM<T>(db + i * n * k, n, k).noalias() += dC.transpose() * A;
      } else {
        CMapM<T> B(b->value.data.data() + i * k * n, k, n);
        if (da) MapM<T>(da + i * m * k, m, k).noalias() += dC * B.transpose();
        if (db) MapM<T>(db + i * k * n, k, n).noalias() += A.transpose() * dC;
      }
    }
  });
}

/// Mixes along the node axis: out[b,i,...] = sum_j adj[i,j] x[b,j,...].
template <class T>
Var<T> node_mix(const Var<T>& adj, const Var<T>& x) {
  using namespace detail;
  const Shape& xs = x->shape();
  if (adj->value.rank() != 2 || xs.size() < 2 || adj->shape()[1] != xs[1] ||
      adj->shape()[0] != adj->shape()[1])
    throw std::invalid_argument("node_mix: " + shape_str(adj->shape()) + " x " + shape_str(xs));
  const std::size_t bsz = xs[0], n = xs[1], rest = x->numel() / (bsz * n);
  Tensor<T> out(xs);
  CMapM<T> A(adj->value.data.data(), n, n);
  for (std::size_t b = 0; b < bsz; ++b)
    MapM<T>(out.data.data() + b * n * rest, n, rest).noalias() =
        A * CMapM<T>(x->value.data.data() + b * n * rest, n, rest);
  return make<T>(std::move(out), {adj, x}, [bsz, n, rest](Node<T>& self) {
    auto& adj = self.parents[0];
    auto& x = self.parents[1];
    CMapM<T> A(adj->value.data.data(), n, n);
    for (std::size_t b = 0; b < bsz; ++b) {
      CMapM<T> dY(self.grad.data.data() + b * n * rest, n, rest);
      if (adj->requires_grad)
        MapM<T>(adj->ensure_grad().data.data(), n, n).noalias() +=
            dY * CMapM<T>(x->value.data.data() + b * n * rest, n, rest).transpose();
      if (x->requires_grad)
        MapM<T>(x->ensure_grad().data.data() + b * n * rest, n, rest).noalias() +=
            A.transpose() * dY;
    }
  });
}

/// Adds a [M,N] bias to every trailing [M,N] slice of x.
template <class T>
Var<T> add_bias2d(const Var<T>& x, const Var<T>& bias) {
  const Shape& xs = x->shape();
  const Shape& bs = bias->shape();
  if (bs.size() != 2 || xs.size() < 2 || xs[xs.size() - 2] != bs[0] || xs.back() != bs[1])
    throw std::invalid_argument("add_bias2d: " + shape_str(xs) + " + " + shape_str(bs));
  const std::size_t mn = bias->numel(), groups = x->numel() / mn;
  Tensor<T> out = x->value;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < mn; ++i) out[g * mn + i] += bias->value[i];
  return detail::make<T>(std::move(out), {x, bias}, [mn, groups](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t k = 0; k < groups; ++k)
        for (std::size_t i = 0; i < mn; ++i) g[i] += self.grad[k * mn + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization layers

template <class T>
Var<T> softmax_last(const Var<T>& x) {
  const std::size_t d = x->shape().back(), rows = x->numel() / d;
  Tensor<T> out(x->shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x->value.data.data() + r * d;
    T* o = out.data.data() + r * d;
    T mx = *std::max_element(in, in + d);
    T s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < d; ++i) o[i] /= s;
  }
  return detail::make<T>(std::move(out), {x}, [d, rows](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data.data() + r * d;
      const T* dy = self.grad.data.data() + r * d;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += y[i] * dy[i];
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += y[i] * (dy[i] - dot);
    }
  });
}

/// Layer normalization over the last axis with affine gamma/beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x->shape().back(), rows = x->numel() / d;
  if (gamma->numel() != d || beta->numel() != d)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  Tensor<T> out(x->shape());
  Tensor<T> xhat(x->shape());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x->value.data.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (in[i] - mu) * rstd[r];
      xhat[r * d + i] = h;
      out[r * d + i] = h * gamma->value[i] + beta->value[i];
    }
  }
  return detail::make<T>(
      std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& x = self.parents[0];
        auto& gamma = self.parents[1];
        auto& beta = self.parents[2];
        T* dg = gamma->requires_grad ? gamma->ensure_grad().data.data() : nullptr;
        T* db = beta->requires_grad ? beta->ensure_grad().data.data() : nullptr;
        T* dx = x->requires_grad ? x->ensure_grad().data.data() : nullptr;
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data.data() + r * d;
          const T* h = xhat.data.data() + r * d;
          T s1 = 0, s2 = 0;
          for (std::size_t i = 0; i < d; ++i) {
            if (dg) dg[i] += dy[i] * h[i];
            if (db) db[i] += dy[i];
            dh[i] = dy[i] * gamma->value[i];
            s1 += dh[i];
            s2 += dh[i] * h[i];
          }
          if (dx) {
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::size_t i = 0; i < d; ++i)
              dx[r * d + i] += rstd[r] * (dh[i] - inv_d * s1 - h[i] * inv_d * s2);
          }
        }
      });
}

/// Scales each row to unit L2 norm; zero rows stay zero.
template <class T>
Var<T> row_normalize(const Var<T>& x) {
  const std::size_t d = x->shape().back(), rows = x->numel() / d;
  Tensor<T> out(x->shape());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t i = 0; i < d; ++i) s += x->value[r * d + i] * x->value[r * d + i];
    norms[r] = std::sqrt(s);
    if (norms[r] > T(0))
      for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x->value[r * d + i] / norms[r];
  }
  return detail::make<T>(std::move(out), {x}, [d, rows, norms](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] <= T(0)) continue;
      const T* y = self.value.data.data() + r * d;
      const T* dy = self.grad.data.data() + r * d;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += y[i] * dy[i];
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += (dy[i] - y[i] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Graph operators

/// Symmetric renormalization D^-1/2 (A + I) D^-1/2 with D the row sums of A + I.
/// Input must be square and elementwise non-negative.
template <class T>
Var<T> normalize_adjacency(const Var<T>& a) {
  const Shape& s = a->shape();
  if (s.size() != 2 || s[0] != s[1])
    throw std::invalid_argument("normalize_adjacency: matrix must be square, got " + shape_str(s));
  const std::size_t n = s[0];
  for (T v : a->value.data) {
    if (!(v >= T(0))) throw std::invalid_argument("normalize_adjacency: negative or NaN entry");
  }
  std::vector<T> deg(n, T(1)), rs(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a->value[i * n + j];
  for (std::size_t i = 0; i < n; ++i) rs[i] = T(1) / std::sqrt(deg[i]);
  Tensor<T> out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = rs[i] * (a->value[i * n + j] + (i == j ? T(1) : T(0))) * rs[j];
  return detail::make<T>(std::move(out), {a}, [n, deg, rs](Node<T>& self) {
    auto& a = self.parents[0];
    auto& g = a->ensure_grad();
    auto bval = [&](std::size_t i, std::size_t j) {
      return a->value[i * n + j] + (i == j ? T(1) : T(0));
    };
    std::vector<T> ds(n, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T gij = self.grad[i * n + j];
        ds[i] += gij * bval(i, j) * rs[j];
        ds[j] += gij * rs[i] * bval(i, j);
      }
    for (std::size_t i = 0; i < n; ++i) {
      const T dd = ds[i] * T(-0.5) * rs[i] / deg[i];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * rs[i] * rs[j] + dd;
    }
  });
}

/// Softmax-weighted elementwise blend of two graphs; w holds the two logits.
template <class T>
Var<T> fuse_graphs(const Var<T>& ar, const Var<T>& ac, const Var<T>& w) {
  detail::require_same(ar->shape(), ac->shape(), "fuse_graphs");
  if (w->numel() != 2) throw std::invalid_argument("fuse_graphs: need two logits");
  const T mx = std::max(w->value[0], w->value[1]);
  const T e0 = std::exp(w->value[0] - mx), e1 = std::exp(w->value[1] - mx);
  const T s0 = e0 / (e0 + e1);
  const T s1 = T(1) - s0;
  Tensor<T> out(ar->shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s0 * ar->value[i] + s1 * ac->value[i];
  return detail::make<T>(std::move(out), {ar, ac, w}, [s0, s1](Node<T>& self) {
    auto& ar = self.parents[0];
    auto& ac = self.parents[1];
    auto& w = self.parents[2];
    T d0 = 0, d1 = 0;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      d0 += self.grad[i] * ar->value[i];
      d1 += self.grad[i] * ac->value[i];
    }
    if (ar->requires_grad) {
      auto& g = ar->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s0 * self.grad[i];
    }
    if (ac->requires_grad) {
      auto& g = ac->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s1 * self.grad[i];
    }
    if (w->requires_grad) {
      auto& g = w->ensure_grad();
      const T dot = s0 * d0 + s1 * d1;
      g[0] += s0 * (d0 - dot);
      g[1] += s1 * (d1 - dot);
    }
  });
}

}  // namespace tgpt::ag
