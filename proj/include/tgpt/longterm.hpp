#pragma once

// Autoregressive long-term rollout and fine-tuning.
//
// Deployment rollout hands each stage's full horizon to the next stage; the
// daily and weekly lookups of later stages read the combined (history then
// prediction) buffer. Fine-tuning has two objectives. `full_horizon` replays the
// deployment rollout over the segment and fits every output step. `first_step`
// advances one step per stage: stage i sees the last T_r values of the real
// prefix followed by the first-step predictions of stages 1..i-1, and the first
// outputs of all L_g stages are fitted. Stage inputs are detached either way,
// so the stages can be batched.

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgpt/dfmt.hpp"
#include "tgpt/train.hpp"

namespace tgpt {

/// Growing normalized series: real columns [0, origin) followed by predictions.
class RolloutState {
 public:
  RolloutState(const PreparedData& data, std::size_t origin) : data_(&data), origin_(origin) {
    if (origin > data.panel.length())
      throw std::invalid_argument("rollout origin beyond the available history");
    if (origin < data.cfg.required_history())
      throw std::invalid_argument("rollout origin needs " +
                                  std::to_string(data.cfg.required_history()) +
                                  " steps of history, got " + std::to_string(origin));
    buffer_ = data.normalized.leftCols(static_cast<Eigen::Index>(origin));
  }

  std::size_t origin() const { return origin_; }
  std::size_t predicted() const { return static_cast<std::size_t>(buffer_.cols()) - origin_; }
  std::size_t stage() const { return stage_; }
  const Matrix& buffer() const { return buffer_; }

  /// Value at absolute step t (real before the origin, predicted after).
  double value(std::size_t node, std::size_t t) const {
    return buffer_(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(t));
  }

  /// Input window for the next prediction start.
  WindowBatch next_window() const {
    const std::size_t t = static_cast<std::size_t>(buffer_.cols());
    return make_batch(
        buffer_, data_->cfg, {t}, [&](std::int64_t k) { return data_->panel.code_at(k); }, false);
  }

  /// Appends normalized predictions [N, k].
  void append(const Matrix& values) {
    if (values.rows() != buffer_.rows()) throw std::invalid_argument("append: node count mismatch");
    const Eigen::Index old = buffer_.cols();
    buffer_.conservativeResize(Eigen::NoChange, old + values.cols());
    buffer_.rightCols(values.cols()) = values;
    ++stage_;
  }

 private:
  const PreparedData* data_;
  std::size_t origin_;
  std::size_t stage_ = 0;
  Matrix buffer_;
};

struct RolloutResult {
  std::size_t origin = 0;
  Matrix normalized;  // [N, n_stages * horizon]
  Matrix values;      // same, original units
};

/// Runs `n_stages` stages from `origin`; stage 1 consumes the real window.
template <class T>
RolloutResult autoregressive_rollout(const DfmtModel<T>& model, const PreparedData& data,
                                     std::size_t origin, std::size_t n_stages) {
  ag::NoGradGuard ng;
  RolloutState state(data, origin);
  const std::size_t n = data.cfg.n_nodes, h = data.cfg.horizon;
  auto a_r = ag::constant(to_tensor<T>(data.graphs.a_hat_r));
  auto a_c = ag::constant(to_tensor<T>(data.graphs.a_hat_c));
  for (std::size_t s = 0; s < n_stages; ++s) {
    auto y = model.forward(state.next_window(), a_r, a_c);
    Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(h));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < h; ++k)
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
            static_cast<double>(y->value[i * h + k]);
    state.append(out);
  }
  RolloutResult r;
  r.origin = origin;
  r.normalized = state.buffer().rightCols(static_cast<Eigen::Index>(n_stages * h));
  r.values = data.scaler.denormalize(r.normalized);
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Subset of windows of a batch, in the given order.
inline WindowBatch gather_batch(const WindowBatch& b, const std::vector<std::size_t>& idx) {
  WindowBatch o;
  o.batch = idx.size();
  o.n_nodes = b.n_nodes;
  o.t_r = b.t_r;
  o.t_d = b.t_d;
  o.t_w = b.t_w;
  o.horizon = b.horizon;
  o.has_target = b.has_target;
  const std::size_t n = b.n_nodes;
  const std::size_t ty = b.batch ? b.y.size() / (b.batch * n) : 0;
  auto copy = [&](const auto& src, auto& dst, std::size_t per) {
    for (std::size_t i : idx)
      dst.insert(dst.end(), src.begin() + static_cast<std::ptrdiff_t>(i * per),
                 src.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  };
  copy(b.x_r, o.x_r, n * b.t_r);
  copy(b.x_d, o.x_d, n * b.t_d);
  copy(b.x_w, o.x_w, n * b.t_w);
  if (ty) copy(b.y, o.y, n * ty);
  copy(b.t_h, o.t_h, b.t_r);
  copy(b.t_p, o.t_p, b.horizon);
  for (std::size_t i : idx)
    if (i < b.starts.size()) o.starts.push_back(b.starts[i]);
  return o;
}

/// Single window `i` of a batch as its own batch.
inline WindowBatch slice_batch(const WindowBatch& b, std::size_t i) {
  return gather_batch(b, {i});
}

/// Number of autoregressive stages for a segment: its length minus the input window.
inline std::size_t stage_count(std::size_t segment_length, std::size_t t_r) {
  if (segment_length < t_r + 1)
    throw std::invalid_argument("fine-tuning segment of " + std::to_string(segment_length) +
                                " steps is shorter than " + std::to_string(t_r + 1));
  return segment_length - t_r;
}

/// Stage windows of the segment [s, s + len): batch entry i is the input of
/// stage i+1 and its target row holds the real values from the stage start.
/// x_d and x_w come from the real series.
template <class T>
WindowBatch long_term_stage_windows(const DfmtModel<T>& model, const PreparedData& data,
                                    std::size_t s, std::size_t len) {
  const ModelConfig& cfg = data.cfg;
  const std::size_t lg = stage_count(len, cfg.t_r);
  const std::size_t first = s + cfg.t_r;  // t^r
  if (first < cfg.required_history() || s + len > data.panel.length())
    throw std::invalid_argument("fine-tuning segment out of range");
  ag::NoGradGuard ng;
  auto a_r = ag::constant(to_tensor<T>(data.graphs.a_hat_r));
  auto a_c = ag::constant(to_tensor<T>(data.graphs.a_hat_c));
  const std::size_t n = cfg.n_nodes;

  std::vector<std::size_t> starts(lg);
  for (std::size_t i = 0; i < lg; ++i) starts[i] = first + i;
  // only the first target step is used, so later steps may run past the data
  ModelConfig one_step = cfg;
  one_step.horizon = 1;
  WindowBatch all = make_batch(data.panel, data.normalized, one_step, starts, true);
  all.horizon = cfg.horizon;
  all.t_p.clear();
  for (std::size_t t : starts)
    for (std::size_t k = 0; k < cfg.horizon; ++k)
      all.t_p.push_back(data.panel.code_at(static_cast<std::int64_t>(t + k)));

  Matrix pred(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(lg));
  for (std::size_t i = 0; i < lg; ++i) {
    // x_r of stage i: real values before t^r, then first-step predictions
    for (std::size_t node = 0; node < n; ++node)
      for (std::size_t k = 0; k < cfg.t_r; ++k) {
        const std::size_t t = first + i - cfg.t_r + k;
        all.x_r[(i * n + node) * cfg.t_r + k] =
            t < first ? data.normalized(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(t))
                      : pred(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(t - first));
      }
    WindowBatch one = slice_batch(all, i);
    auto y = model.forward(one, a_r, a_c);
    for (std::size_t node = 0; node < n; ++node)
      pred(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(i)) =
          static_cast<double>(y->value[node * cfg.horizon]);
  }
  return all;
}

/// L1 between first-step outputs and the stage targets (normalized units).
template <class T>
Var<T> first_step_loss(const DfmtModel<T>& model, const WindowBatch& stages,
                       const Var<T>& a_r, const Var<T>& a_c) {
  const std::size_t b = stages.batch, n = stages.n_nodes;
  if (stages.y.size() != b * n) throw std::invalid_argument("stage targets must hold one step");
  Tensor<T> target({b, n, 1});
  for (std::size_t i = 0; i < b * n; ++i) target[i] = static_cast<T>(stages.y[i]);
  auto out = model.forward(stages, a_r, a_c);
  return ag::l1_loss<T>(ag::slice<T>(out, 2, 0, 1), target);
}

/// Deployment-style stages of the segment [s, s + len): stage i+1 starts at
/// s + T_r + i*horizon and consumes the previous stage's full output. Targets
/// hold the real values of each stage's horizon.
template <class T>
WindowBatch rollout_stage_windows(const DfmtModel<T>& model, const PreparedData& data,
                                  std::size_t s, std::size_t len) {
  const ModelConfig& cfg = data.cfg;
  const std::size_t h = cfg.horizon, n = cfg.n_nodes;
  if (len < cfg.t_r + h)
    throw std::invalid_argument("fine-tuning segment of " + std::to_string(len) +
                                " steps is shorter than " + std::to_string(cfg.t_r + h));
  const std::size_t stages = (len - cfg.t_r) / h;
  const std::size_t first = s + cfg.t_r;
  if (first < cfg.required_history() || s + len > data.panel.length())
    throw std::invalid_argument("fine-tuning segment out of range");
  ag::NoGradGuard ng;
  auto a_r = ag::constant(to_tensor<T>(data.graphs.a_hat_r));
  auto a_c = ag::constant(to_tensor<T>(data.graphs.a_hat_c));
  RolloutState state(data, first);
  std::vector<std::size_t> idx;
  WindowBatch all;
  for (std::size_t i = 0; i < stages; ++i) {
    WindowBatch w = state.next_window();
    auto y = model.forward(w, a_r, a_c);
    Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(h));
    const std::size_t t0 = first + i * h;
    w.has_target = true;
    w.y.resize(n * h);
    for (std::size_t node = 0; node < n; ++node)
      for (std::size_t k = 0; k < h; ++k) {
        const auto r = static_cast<Eigen::Index>(node), c = static_cast<Eigen::Index>(k);
        out(r, c) = static_cast<double>(y->value[node * h + k]);
        w.y[node * h + k] = data.normalized(r, static_cast<Eigen::Index>(t0 + k));
      }
    w.starts = {t0};
    state.append(out);
    if (i == 0) {
      all = std::move(w);
      continue;
    }
    ++all.batch;
    auto cat = [](auto& dst, const auto& src) { dst.insert(dst.end(), src.begin(), src.end()); };
    cat(all.x_r, w.x_r);
    cat(all.x_d, w.x_d);
    cat(all.x_w, w.x_w);
    cat(all.y, w.y);
    cat(all.t_h, w.t_h);
    cat(all.t_p, w.t_p);
    cat(all.starts, w.starts);
  }
  return all;
}

/// L1 over every output step (normalized units).
template <class T>
Var<T> horizon_loss(const DfmtModel<T>& model, const WindowBatch& stages, const Var<T>& a_r,
                    const Var<T>& a_c) {
  const std::size_t b = stages.batch, n = stages.n_nodes, h = stages.horizon;
  if (stages.y.size() != b * n * h) throw std::invalid_argument("stage targets must span the horizon");
  Tensor<T> target(Shape{b, n, h});
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] = static_cast<T>(stages.y[i]);
  return ag::l1_loss<T>(model.forward(stages, a_r, a_c), target);
}

enum class FinetuneObjective { full_horizon, first_step };

template <class T>
WindowBatch finetune_stages(const DfmtModel<T>& model, const PreparedData& data, std::size_t s,
                            std::size_t len, FinetuneObjective obj) {
  return obj == FinetuneObjective::full_horizon ? rollout_stage_windows(model, data, s, len)
                                                : long_term_stage_windows(model, data, s, len);
}

template <class T>
Var<T> finetune_loss(const DfmtModel<T>& model, const WindowBatch& stages, const Var<T>& a_r,
                     const Var<T>& a_c, FinetuneObjective obj) {
  return obj == FinetuneObjective::full_horizon ? horizon_loss(model, stages, a_r, a_c)
                                                : first_step_loss(model, stages, a_r, a_c);
}

/// Fine-tuning loss of one segment with the current weights.
template <class T>
double long_term_loss(const DfmtModel<T>& model, const PreparedData& data, std::size_t s,
                      std::size_t len, FinetuneObjective obj = FinetuneObjective::first_step) {
  auto stages = finetune_stages(model, data, s, len, obj);
  ag::NoGradGuard ng;
  return static_cast<double>(finetune_loss(model, stages,
                                           ag::constant(to_tensor<T>(data.graphs.a_hat_r)),
                                           ag::constant(to_tensor<T>(data.graphs.a_hat_c)), obj)
                                 ->value[0]);
}

struct FinetuneOptions {
  FinetuneObjective objective = FinetuneObjective::full_horizon;
  std::size_t segment_length = 312;     // T_r input steps plus 25 stages of 12
  std::size_t epochs = 600;             // one randomly drawn segment per epoch
  std::size_t batch_size = 32;          // stages per optimizer step
  double lr = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  std::size_t range_begin = 0, range_end = 0;  // segment placement window; 0,0 = training split
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct FinetuneReport {
  std::vector<double> loss;             // mean L1 per epoch, before its updates
  std::vector<std::size_t> segments;    // segment start per epoch
  std::size_t steps = 0;
  double wall_seconds = 0;
};

template <class T>
FinetuneReport finetune_long_term(DfmtModel<T>& model, const PreparedData& data,
                                  const FinetuneOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  tune_allocator();
  const ModelConfig& cfg = data.cfg;
  if (opt.objective == FinetuneObjective::first_step) stage_count(opt.segment_length, cfg.t_r);
  const std::size_t s_min = std::max(opt.range_begin, cfg.required_history() - cfg.t_r);
  const std::size_t end = opt.range_end ? opt.range_end : data.split.train_end;
  if (end < s_min + opt.segment_length)
    throw std::invalid_argument("no room for a fine-tuning segment of " +
                                std::to_string(opt.segment_length) + " steps");
  const std::size_t s_max = end - opt.segment_length;

  nn::Adam<T> adam(model.params(), {.lr = opt.lr, .clip_norm = opt.clip_norm});
  std::mt19937_64 rng(opt.seed);
  auto a_r = ag::constant(to_tensor<T>(data.graphs.a_hat_r));
  auto a_c = ag::constant(to_tensor<T>(data.graphs.a_hat_c));
  FinetuneReport rep;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    const std::size_t s = std::uniform_int_distribution<std::size_t>(s_min, s_max)(rng);
    auto stages = finetune_stages(model, data, s, opt.segment_length, opt.objective);
    std::vector<std::size_t> order(stages.batch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(order.size(), b + opt.batch_size)));
      auto mb = gather_batch(stages, idx);
      adam.zero_grad();
      auto loss = finetune_loss(model, mb, a_r, a_c, opt.objective);
      const double lv = static_cast<double>(loss->value[0]);
      if (!std::isfinite(lv))
        throw TrainingDiverged("long-term fine-tuning diverged at epoch " + std::to_string(e));
      ag::backward(loss);
      adam.step();
      ++rep.steps;
      total += lv * static_cast<double>(idx.size());
    }
    rep.loss.push_back(total / static_cast<double>(order.size()));
    rep.segments.push_back(s);
    if (opt.on_epoch) opt.on_epoch(e, rep.loss.back());
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace tgpt
