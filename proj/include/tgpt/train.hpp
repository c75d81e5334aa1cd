#pragma once

// Short-term training loop and evaluation metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "tgpt/data.hpp"
#include "tgpt/dfmt.hpp"
#include "tgpt/nn.hpp"

namespace tgpt {

// ---------------------------------------------------------------------------
// Metrics

/// MAE, RMSE and MAPE (percent), per horizon step and aggregated.
struct MetricSet {
  std::vector<double> mae, rmse, mape;
  double mae_all = 0, rmse_all = 0, mape_all = 0;
  std::size_t count = 0;       // evaluated values
  std::size_t mape_count = 0;  // values kept by the MAPE mask
};

inline void to_json(nlohmann::json& j, const MetricSet& m) {
  j = nlohmann::json{{"mae", m.mae_all},      {"rmse", m.rmse_all},
                     {"mape", m.mape_all},    {"count", m.count},
                     {"mape_count", m.mape_count}, {"per_step", {{"mae", m.mae}, {"rmse", m.rmse}, {"mape", m.mape}}}};
}

/// Streams (target, prediction, step) triples into per-step sums.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t steps, double mape_eps = 1e-3)
      : eps_(mape_eps), abs_(steps), sq_(steps), pct_(steps), n_(steps), n_pct_(steps) {}

  void add(std::size_t step, double y, double y_hat) {
    const double e = y_hat - y;
    abs_.at(step) += std::abs(e);
    sq_[step] += e * e;
    ++n_[step];
    if (std::abs(y) >= eps_) {
      pct_[step] += std::abs(e / y);
      ++n_pct_[step];
    }
  }

  /// Flat arrays laid out [..., step] with `steps` innermost.
  void add_flat(const std::vector<double>& y, const std::vector<double>& y_hat) {
    if (y.size() != y_hat.size() || y.size() % abs_.size() != 0)
      throw std::invalid_argument("metric arrays have mismatched sizes");
    for (std::size_t i = 0; i < y.size(); ++i) add(i % abs_.size(), y[i], y_hat[i]);
  }

  MetricSet result() const {
    MetricSet m;
    double a = 0, s = 0, p = 0;
    std::size_t n = 0, np = 0;
    for (std::size_t k = 0; k < abs_.size(); ++k) {
      const double nk = static_cast<double>(std::max<std::size_t>(n_[k], 1));
      m.mae.push_back(abs_[k] / nk);
      m.rmse.push_back(std::sqrt(sq_[k] / nk));
      m.mape.push_back(n_pct_[k] ? 100.0 * pct_[k] / static_cast<double>(n_pct_[k]) : 0.0);
      a += abs_[k];
      s += sq_[k];
      p += pct_[k];
      n += n_[k];
      np += n_pct_[k];
    }
    if (n == 0) throw std::invalid_argument("no values to evaluate");
    m.count = n;
    m.mape_count = np;
    m.mae_all = a / static_cast<double>(n);
    m.rmse_all = std::sqrt(s / static_cast<double>(n));
    m.mape_all = np ? 100.0 * p / static_cast<double>(np) : 0.0;
    return m;
  }

 private:
  double eps_;
  std::vector<double> abs_, sq_, pct_;
  std::vector<std::size_t> n_, n_pct_;
};

/// Metrics of flat prediction arrays with `steps` innermost.
inline MetricSet compute_metrics(const std::vector<double>& y, const std::vector<double>& y_hat,
                                 std::size_t steps = 1, double mape_eps = 1e-3) {
  MetricAccumulator acc(steps, mape_eps);
  acc.add_flat(y, y_hat);
  return acc.result();
}

// ---------------------------------------------------------------------------
// Prepared data

/// Everything derived from a dataset before training: scaler and correlation
/// graph from the training split, normalized values, graphs, window starts.
struct PreparedData {
  ModelConfig cfg;
  TimeSeriesPanel panel;  // original units
  Matrix normalized;
  ScalerStats scaler;
  ConnectivityGraph conn;
  CorrelationGraph corr;
  NormalizedGraphs graphs;
  Split split;
  WindowPlan train, val, test;

  WindowBatch batch(const std::vector<std::size_t>& starts, bool with_target = true) const {
    return make_batch(panel, normalized, cfg, starts, with_target);
  }
};

/// Windows whose targets lie inside [begin, end).
inline WindowPlan plan_split(const ModelConfig& cfg, std::size_t begin, std::size_t end) {
  if (end < begin + cfg.horizon) return {{}, end - begin};
  return plan_windows(end, cfg, begin, end - cfg.horizon + 1);
}

inline PreparedData prepare_data(const Dataset& ds, ModelConfig cfg) {
  ds.panel.validate();
  cfg.n_nodes = ds.panel.n_nodes();
  cfg.q = static_cast<std::size_t>(ds.panel.q);
  cfg.validate();
  PreparedData p;
  p.cfg = cfg;
  p.panel = ds.panel;
  p.split = Split::of(ds.panel.length());
  const Matrix train = ds.panel.values.leftCols(static_cast<Eigen::Index>(p.split.train_end));
  p.scaler = ScalerStats::fit(train);
  p.normalized = p.scaler.normalize(ds.panel.values);
  p.conn = build_connectivity_graph(ds.network);
  p.corr = pearson_correlation_graph(train);
  p.graphs = NormalizedGraphs::from(p.conn, p.corr);
  p.train = plan_split(cfg, 0, p.split.train_end);
  p.val = plan_split(cfg, p.split.train_end, p.split.val_end);
  p.test = plan_split(cfg, p.split.val_end, p.split.total);
  return p;
}

// ---------------------------------------------------------------------------
// Inference

/// Denormalized forecasts for the given starts, laid out [window][node][step].
template <class T>
std::vector<double> predict(const DfmtModel<T>& model, const PreparedData& data,
                            const std::vector<std::size_t>& starts, std::size_t batch_size = 32) {
  ag::NoGradGuard ng;
  const std::size_t n = data.cfg.n_nodes, h = data.cfg.horizon;
  std::vector<double> out;
  out.reserve(starts.size() * n * h);
  for (std::size_t s = 0; s < starts.size(); s += batch_size) {
    std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(s),
                                   starts.begin() + static_cast<std::ptrdiff_t>(
                                                        std::min(starts.size(), s + batch_size)));
    auto y = model.forward(data.batch(chunk, false), data.graphs);
    for (std::size_t w = 0; w < chunk.size(); ++w)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < h; ++k)
          out.push_back(data.scaler.denormalize(
              i, static_cast<double>(y->value[(w * n + i) * h + k])));
  }
  return out;
}

/// Ground truth in original units for the given starts, same layout as predict().
inline std::vector<double> targets(const PreparedData& data, const std::vector<std::size_t>& starts) {
  std::vector<double> out;
  const std::size_t n = data.cfg.n_nodes, h = data.cfg.horizon;
  for (std::size_t t : starts)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < h; ++k)
        out.push_back(data.panel.values(static_cast<Eigen::Index>(i),
                                        static_cast<Eigen::Index>(t + k)));
  return out;
}

/// Metrics in original units over the given windows.
template <class T>
MetricSet evaluate(const DfmtModel<T>& model, const PreparedData& data,
                   const std::vector<std::size_t>& starts) {
  if (starts.empty()) throw std::invalid_argument("evaluate: empty window set");
  return compute_metrics(targets(data, starts), predict(model, data, starts), data.cfg.horizon);
}

// ---------------------------------------------------------------------------
// Training

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double clip_norm = 5.0;
  std::size_t patience = 15;  // epochs without val improvement; 0 disables
  std::size_t max_steps = 0;  // optimizer steps cap; 0 = none
  std::uint64_t seed = 0;
  bool restore_best = true;
  bool cosine_decay = false;  // anneal lr to 0 over the planned number of steps
  std::function<void(std::size_t epoch, double train_loss, double val_mae)> on_epoch;
};

// Missing keys keep their defaults; the epoch callback is not serialized.
inline void from_json(const nlohmann::json& j, TrainOptions& o) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) j.at(k).get_to(field);
  };
  get("epochs", o.epochs);
  get("batch_size", o.batch_size);
  get("lr", o.lr);
  get("clip_norm", o.clip_norm);
  get("patience", o.patience);
  get("max_steps", o.max_steps);
  get("seed", o.seed);
  get("restore_best", o.restore_best);
  get("cosine_decay", o.cosine_decay);
}

inline void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs},         {"batch_size", o.batch_size},
                     {"lr", o.lr},                 {"clip_norm", o.clip_norm},
                     {"patience", o.patience},     {"max_steps", o.max_steps},
                     {"seed", o.seed},             {"restore_best", o.restore_best},
                     {"cosine_decay", o.cosine_decay}};
}

struct TrainReport {
  std::vector<double> train_loss;  // mean L1 in normalized units per epoch
  std::vector<double> val_mae;     // original units per epoch (empty without val windows)
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
  double wall_seconds = 0;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  j = nlohmann::json{{"train_loss", r.train_loss},
                     {"val_mae", r.val_mae},
                     {"best_epoch", r.best_epoch},
                     {"best_val_mae", std::isfinite(r.best_val_mae) ? nlohmann::json(r.best_val_mae)
                                                                     : nlohmann::json(nullptr)},
                     {"best_checkpoint", r.best_checkpoint},
                     {"wall_seconds", r.wall_seconds},
                     {"seed", r.seed},
                     {"steps", r.steps},
                     {"stopped_early", r.stopped_early}};
}

template <class T>
Tensor<T> target_tensor(const WindowBatch& b) {
  Tensor<T> t({b.batch, b.n_nodes, b.horizon});
  for (std::size_t i = 0; i < b.y.size(); ++i) t[i] = static_cast<T>(b.y[i]);
  return t;
}

/// Mean L1 loss in normalized units over the given windows.
template <class T>
double mean_loss(const DfmtModel<T>& model, const PreparedData& data,
                 const std::vector<std::size_t>& starts, std::size_t batch_size = 32) {
  ag::NoGradGuard ng;
  double total = 0;
  for (std::size_t s = 0; s < starts.size(); s += batch_size) {
    std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(s),
                                   starts.begin() + static_cast<std::ptrdiff_t>(
                                                        std::min(starts.size(), s + batch_size)));
    auto b = data.batch(chunk);
    total += static_cast<double>(
                 ag::l1_loss<T>(model.forward(b, data.graphs), target_tensor<T>(b))->value[0]) *
             static_cast<double>(chunk.size());
  }
  return starts.empty() ? 0.0 : total / static_cast<double>(starts.size());
}

/// Keeps large temporary tensors in the heap instead of fresh mmaps; the
/// autograd tape allocates and frees many of them per step.
inline void tune_allocator() {
#ifdef __GLIBC__
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

/// Adam on the L1 loss in normalized space with early selection by val MAE.
template <class T>
TrainReport fit(DfmtModel<T>& model, const PreparedData& data, const TrainOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  tune_allocator();
  TrainReport rep;
  rep.seed = opt.seed;
  if (opt.epochs == 0) return rep;
  if (data.train.starts.empty()) throw std::invalid_argument("no training windows");

  nn::Adam<T> adam(model.params(), {.lr = opt.lr, .clip_norm = opt.clip_norm});
  std::mt19937_64 rng(opt.seed);
  auto a_r = ag::constant(to_tensor<T>(data.graphs.a_hat_r));
  auto a_c = ag::constant(to_tensor<T>(data.graphs.a_hat_c));
  std::vector<Tensor<T>> best;
  std::size_t since_best = 0;
  std::vector<std::size_t> order = data.train.starts;
  const std::size_t per_epoch = (order.size() + opt.batch_size - 1) / opt.batch_size;
  std::size_t planned = per_epoch * opt.epochs;
  if (opt.max_steps) planned = std::min(planned, opt.max_steps);

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < order.size(); s += opt.batch_size) {
      if (opt.max_steps && rep.steps >= opt.max_steps) break;
      std::vector<std::size_t> chunk(
          order.begin() + static_cast<std::ptrdiff_t>(s),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + opt.batch_size)));
      auto b = data.batch(chunk);
      if (opt.cosine_decay)
        adam.set_lr(0.5 * opt.lr *
                    (1 + std::cos(std::numbers::pi * static_cast<double>(rep.steps) /
                                  static_cast<double>(planned))));
      adam.zero_grad();
      Var<T> loss;
      try {
        loss = ag::l1_loss<T>(model.forward(b, a_r, a_c), target_tensor<T>(b));
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(rep.steps) + ": " + e.what());
      }
      const double lv = static_cast<double>(loss->value[0]);
      ag::backward(loss);
      const double gn = adam.grad_norm();
      if (!std::isfinite(lv) || !std::isfinite(gn))
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(rep.steps) + ": loss=" + std::to_string(lv) +
                               " grad_norm=" + std::to_string(gn));
      adam.step();
      ++rep.steps;
      sum += lv * static_cast<double>(chunk.size());
      seen += chunk.size();
    }
    if (seen == 0) break;
    rep.train_loss.push_back(sum / static_cast<double>(seen));

    double val = std::numeric_limits<double>::quiet_NaN();
    if (!data.val.starts.empty()) {
      val = evaluate(model, data, data.val.starts).mae_all;
      rep.val_mae.push_back(val);
      if (val < rep.best_val_mae) {
        rep.best_val_mae = val;
        rep.best_epoch = epoch;
        since_best = 0;
        if (opt.restore_best) {
          best.clear();
          for (const auto& [_, p] : model.params().items()) best.push_back(p->value);
        }
      } else if (opt.patience && ++since_best >= opt.patience) {
        rep.stopped_early = true;
      }
    }
    if (opt.on_epoch) opt.on_epoch(epoch, rep.train_loss.back(), val);
    if (rep.stopped_early) break;
  }
  if (opt.restore_best && !best.empty()) {
    std::size_t i = 0;
    for (const auto& [_, p] : model.params().items()) p->value = best[i++];
  }
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

template <class T>
struct TrainResult {
  DfmtModel<T> model;
  TrainReport report;
  PreparedData data;
};

/// Builds a model for `ds` (N and q taken from the data) and trains it.
template <class T = float>
TrainResult<T> train_short_term(const Dataset& ds, const ModelConfig& cfg,
                                const TrainOptions& opt) {
  PreparedData data = prepare_data(ds, cfg);
  DfmtModel<T> model(data.cfg, opt.seed);
  TrainReport rep = fit(model, data, opt);
  return {std::move(model), std::move(rep), std::move(data)};
}

}  // namespace tgpt
