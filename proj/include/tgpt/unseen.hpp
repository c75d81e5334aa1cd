#pragma once

// Unseen-road estimation.
//
// Every node has a spatial semantic graph (upstream/downstream neighbours and
// their distances). A linear co-semantic model embeds a fixed-length encoding
// of that graph into a 1024-d space; cosine similarity of embeddings is
// pre-trained to track traffic correlation. For a proposed road the top-k most
// similar existing nodes are selected and a DFMT over those k nodes, with
// positive MLPs squaring the k x N_e graph rows, is trained to output the new
// road's series through a node-linear head.

#include <algorithm>
#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgpt/dfmt.hpp"
#include "tgpt/train.hpp"

namespace tgpt {

struct SpatialSemanticGraph {
  std::vector<std::size_t> c_up, c_down;  // indices into the existing network
  std::vector<double> d_up, d_down;       // km

  bool empty() const { return c_up.empty() && c_down.empty(); }

  void validate() const {
    if (c_up.size() != d_up.size() || c_down.size() != d_down.size())
      throw std::invalid_argument("spatial semantic graph: id and distance lists differ in length");
    for (const auto* d : {&d_up, &d_down})
      for (double v : *d)
        if (!(v > 0)) throw std::invalid_argument("spatial semantic graph: non-positive distance");
  }
};

/// Neighbour lists of an existing node. Undirected edges count both ways.
inline SpatialSemanticGraph spatial_semantic_graph(const RoadNetwork& net, std::size_t node) {
  if (node >= net.size()) throw std::out_of_range("node index out of range");
  std::vector<std::pair<std::size_t, double>> up, down;
  for (const auto& e : net.edges()) {
    if (e.dst == node) {
      up.emplace_back(e.src, e.distance);
      if (!net.directed()) down.emplace_back(e.src, e.distance);
    }
    if (e.src == node) {
      down.emplace_back(e.dst, e.distance);
      if (!net.directed()) up.emplace_back(e.dst, e.distance);
    }
  }
  std::sort(up.begin(), up.end());
  std::sort(down.begin(), down.end());
  SpatialSemanticGraph g;
  for (auto [i, d] : up) {
    g.c_up.push_back(i);
    g.d_up.push_back(d);
  }
  for (auto [i, d] : down) {
    g.c_down.push_back(i);
    g.d_down.push_back(d);
  }
  return g;
}

/// A road that does not exist yet, described by its planned connections.
struct ProposedConnection {
  enum class Direction { both, upstream, downstream };
  std::string node;
  double distance = 1.0;
  Direction direction = Direction::both;
};

struct ProposedNode {
  std::string id;
  std::vector<ProposedConnection> connections;
};

inline void to_json(nlohmann::json& j, const ProposedConnection& c) {
  static const char* names[] = {"both", "upstream", "downstream"};
  j = {{"node", c.node}, {"distance", c.distance}, {"direction", names[static_cast<int>(c.direction)]}};
}

inline void from_json(const nlohmann::json& j, ProposedConnection& c) {
  j.at("node").get_to(c.node);
  j.at("distance").get_to(c.distance);
  const std::string d = j.value("direction", "both");
  if (d == "both") c.direction = ProposedConnection::Direction::both;
  else if (d == "upstream") c.direction = ProposedConnection::Direction::upstream;
  else if (d == "downstream") c.direction = ProposedConnection::Direction::downstream;
  else throw std::invalid_argument("unknown connection direction '" + d + "'");
}

inline void to_json(nlohmann::json& j, const ProposedNode& n) {
  j = {{"id", n.id}, {"connections", n.connections}};
}

inline void from_json(const nlohmann::json& j, ProposedNode& n) {
  n.id = j.value("id", std::string("new"));
  j.at("connections").get_to(n.connections);
}

/// Graph of a proposed node; `upstream` connections feed into it.
inline SpatialSemanticGraph spatial_semantic_graph(const RoadNetwork& net, const ProposedNode& p) {
  SpatialSemanticGraph g;
  for (const auto& c : p.connections) {
    const std::size_t i = net.require_index(c.node);
    if (!(c.distance > 0))
      throw std::invalid_argument("proposed connection to '" + c.node + "' has non-positive distance");
    using D = ProposedConnection::Direction;
    if (c.direction != D::downstream) {
      g.c_up.push_back(i);
      g.d_up.push_back(c.distance);
    }
    if (c.direction != D::upstream) {
      g.c_down.push_back(i);
      g.d_down.push_back(c.distance);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Encoding

inline constexpr std::size_t kSemanticFeatures = 24;
inline constexpr std::size_t kDistanceBins = 8;
inline constexpr double kBinLowKm = 0.1, kBinHighKm = 100.0;

/// Log-spaced distance bin over [0.1, 100] km; values outside land in the end bins.
inline std::size_t distance_bin(double km) {
  const double u = (std::log10(km) - std::log10(kBinLowKm)) /
                   (std::log10(kBinHighKm) - std::log10(kBinLowKm));
  const auto b = static_cast<std::ptrdiff_t>(std::floor(u * kDistanceBins));
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(b, 0, kDistanceBins - 1));
}

/// Layout: log1p(count_up), log1p(count_down), up histogram (8 bins, fractions),
/// down histogram, then mean/min/max of log distance for up and for down.
/// Empty lists encode as zeros.
inline std::array<double, kSemanticFeatures> encode_semantic_graph(const SpatialSemanticGraph& g) {
  g.validate();
  std::array<double, kSemanticFeatures> f{};
  f[0] = std::log1p(static_cast<double>(g.c_up.size()));
  f[1] = std::log1p(static_cast<double>(g.c_down.size()));
  auto side = [&](const std::vector<double>& d, std::size_t hist, std::size_t stats) {
    if (d.empty()) return;
    for (double v : d) f[hist + distance_bin(v)] += 1.0 / static_cast<double>(d.size());
    double sum = 0, lo = std::log(d[0]), hi = lo;
    for (double v : d) {
      const double l = std::log(v);
      sum += l;
      lo = std::min(lo, l);
      hi = std::max(hi, l);
    }
    f[stats] = sum / static_cast<double>(d.size());
    f[stats + 1] = lo;
    f[stats + 2] = hi;
  };
  side(g.d_up, 2, 18);
  side(g.d_down, 2 + kDistanceBins, 21);
  return f;
}

inline Matrix encode_semantic_graphs(const std::vector<SpatialSemanticGraph>& gs) {
  Matrix m(static_cast<Eigen::Index>(gs.size()), static_cast<Eigen::Index>(kSemanticFeatures));
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const auto f = encode_semantic_graph(gs[i]);
    for (std::size_t k = 0; k < kSemanticFeatures; ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = f[k];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Co-semantic model

class CoSemanticModel {
 public:
  static constexpr std::size_t kLatent = 1024;

  explicit CoSemanticModel(std::uint64_t seed = 0, std::size_t n_top = 10)
      : params_(seed), n_top_(n_top), feat_mean_(kSemanticFeatures, 0.0),
        feat_std_(kSemanticFeatures, 1.0) {
    w_ = params_.uniform("w", {kSemanticFeatures, kLatent}, kSemanticFeatures);
    b_ = params_.uniform("b", {kLatent}, kSemanticFeatures);
  }

  nn::ParamSet<double>& params() { return params_; }
  const nn::ParamSet<double>& params() const { return params_; }
  std::size_t n_top() const { return n_top_; }
  const std::vector<double>& feature_mean() const { return feat_mean_; }
  const std::vector<double>& feature_std() const { return feat_std_; }

  /// Feature standardization, fixed once from the reference encodings.
  void fit_standardization(const Matrix& features) {
    for (std::size_t k = 0; k < kSemanticFeatures; ++k) {
      const auto col = features.col(static_cast<Eigen::Index>(k));
      const double m = col.mean();
      const double sd = std::sqrt((col.array() - m).square().mean());
      feat_mean_[k] = m;
      feat_std_[k] = sd > 1e-9 ? sd : 1.0;
    }
  }

  void set_standardization(std::vector<double> mean, std::vector<double> sd) {
    if (mean.size() != kSemanticFeatures || sd.size() != kSemanticFeatures)
      throw std::invalid_argument("standardization needs 24 means and 24 deviations");
    feat_mean_ = std::move(mean);
    feat_std_ = std::move(sd);
  }

  Var<double> embed(const Matrix& features) const {
    Tensor<double> x({static_cast<std::size_t>(features.rows()), kSemanticFeatures});
    for (Eigen::Index i = 0; i < features.rows(); ++i)
      for (std::size_t k = 0; k < kSemanticFeatures; ++k)
        x[static_cast<std::size_t>(i) * kSemanticFeatures + k] =
            (features(i, static_cast<Eigen::Index>(k)) - feat_mean_[k]) / feat_std_[k];
    return ag::linear<double>(ag::constant(std::move(x)), w_, b_);
  }

  /// Cosine similarity between all pairs of rows; zero-norm embeddings score 0.
  Var<double> similarity_matrix(const Matrix& features) const {
    auto e = ag::row_normalize<double>(embed(features));
    return ag::matmul<double>(e, ag::transpose2d<double>(e));
  }

 private:
  nn::ParamSet<double> params_;
  std::size_t n_top_;
  std::vector<double> feat_mean_, feat_std_;
  Var<double> w_, b_;
};

inline void to_json(nlohmann::json& j, const CoSemanticModel& m) {
  j = nlohmann::json{{"n_top", m.n_top()},
                     {"feature_mean", m.feature_mean()},
                     {"feature_std", m.feature_std()},
                     {"w", m.params().find("w")->value.data},
                     {"b", m.params().find("b")->value.data}};
}

inline CoSemanticModel cosemantic_from_json(const nlohmann::json& j) {
  CoSemanticModel m(0, j.at("n_top").get<std::size_t>());
  m.set_standardization(j.at("feature_mean").get<std::vector<double>>(),
                        j.at("feature_std").get<std::vector<double>>());
  for (const char* name : {"w", "b"}) {
    auto v = j.at(name).get<std::vector<double>>();
    auto& dst = m.params().find(name)->value;
    if (v.size() != dst.numel()) throw std::invalid_argument(std::string("co-semantic tensor '") + name + "' has the wrong size");
    dst.data = std::move(v);
  }
  return m;
}

inline void save_cosemantic(const std::filesystem::path& path, const CoSemanticModel& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json(m).dump();
}

inline CoSemanticModel load_cosemantic(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return cosemantic_from_json(nlohmann::json::parse(in));
}

/// One score per reference: cosine similarity of the 1024-d embeddings.
inline std::vector<double> cosemantic_similarity(const CoSemanticModel& model,
                                                 const SpatialSemanticGraph& target,
                                                 const std::vector<SpatialSemanticGraph>& refs) {
  ag::NoGradGuard ng;
  std::vector<SpatialSemanticGraph> all{target};
  all.insert(all.end(), refs.begin(), refs.end());
  auto e = ag::row_normalize<double>(model.embed(encode_semantic_graphs(all)));
  const std::size_t d = CoSemanticModel::kLatent;
  std::vector<double> out(refs.size());
  for (std::size_t j = 0; j < refs.size(); ++j) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += e->value[k] * e->value[(j + 1) * d + k];
    out[j] = std::clamp(s, -1.0, 1.0);
  }
  return out;
}

namespace detail {

/// Positions of the n largest values, descending; ties go to the lower position.
inline std::vector<std::size_t> top_positions(const std::vector<double>& v, std::size_t n) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(n, idx.size()));
  return idx;
}

}  // namespace detail

/// Pre-training loss over a similarity matrix S [N, N] and correlation matrix
/// C, averaged over nodes i. Per node, with j running over the other nodes:
///   mean_j |S_ij - C_ij| + mean_r |top_r(S_i)^2 - top_r(C_i)^2|,  r < n_top,
/// where top_r is the r-th largest value of the row without its diagonal.
inline Var<double> cosemantic_pretrain_loss(const Var<double>& s, const Matrix& corr,
                                            std::size_t n_top) {
  const Shape& sh = s->shape();
  const std::size_t n = sh.at(0);
  if (sh.size() != 2 || sh[1] != n || static_cast<std::size_t>(corr.rows()) != n ||
      static_cast<std::size_t>(corr.cols()) != n)
    throw std::invalid_argument("pre-training loss needs matching square matrices");
  if (n < 2) throw std::invalid_argument("pre-training needs at least 2 nodes");
  const std::size_t m = n - 1, top = std::min(n_top, m);
  Tensor<double> grad_s({n, n});
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v, c;
    std::vector<std::size_t> col;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      v.push_back(s->value[i * n + j]);
      c.push_back(corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      col.push_back(j);
    }
    for (std::size_t j = 0; j < m; ++j) {
      const double diff = v[j] - c[j];
      total += std::abs(diff) / static_cast<double>(m);
      grad_s[i * n + col[j]] += (diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0) / static_cast<double>(m);
    }
    if (top == 0) continue;
    const auto tv = detail::top_positions(v, top), tc = detail::top_positions(c, top);
    for (std::size_t r = 0; r < top; ++r) {
      const double a = v[tv[r]], b = c[tc[r]];
      const double diff = a * a - b * b;
      total += std::abs(diff) / static_cast<double>(top);
      grad_s[i * n + col[tv[r]]] +=
          (diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0) * 2.0 * a / static_cast<double>(top);
    }
  }
  for (double& g : grad_s.data) g /= static_cast<double>(n);
  Tensor<double> out({1});
  out[0] = total / static_cast<double>(n);
  return ag::detail::make<double>(std::move(out), {s}, [grad_s](ag::Node<double>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double up = self.grad[0];
    for (std::size_t k = 0; k < g.numel(); ++k) g[k] += up * grad_s[k];
  });
}

struct PretrainOptions {
  std::size_t epochs = 300;  // full-batch Adam steps
  double lr = 1e-3;
  double clip_norm = 5.0;
};

struct PretrainReport {
  std::vector<double> loss;  // per step, before its update
  double final_loss = 0;
  bool degenerate = false;   // all off-diagonal correlations equal
  double wall_seconds = 0;
};

/// Fits the co-semantic model so that leave-self-out similarity rows track the
/// correlation rows of the reference nodes.
inline PretrainReport pretrain_cosemantic(CoSemanticModel& model,
                                          const std::vector<SpatialSemanticGraph>& refs,
                                          const Matrix& corr, const PretrainOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (refs.size() < 2) throw std::invalid_argument("pre-training needs at least 2 reference nodes");
  if (static_cast<std::size_t>(corr.rows()) != refs.size() || corr.cols() != corr.rows())
    throw std::invalid_argument("correlation matrix does not match the reference nodes");
  PretrainReport rep;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (Eigen::Index i = 0; i < corr.rows(); ++i)
    for (Eigen::Index j = 0; j < corr.cols(); ++j)
      if (i != j) {
        lo = std::min(lo, corr(i, j));
        hi = std::max(hi, corr(i, j));
      }
  rep.degenerate = hi - lo < 1e-12;

  const Matrix features = encode_semantic_graphs(refs);
  model.fit_standardization(features);
  nn::Adam<double> adam(model.params(), {.lr = opt.lr, .clip_norm = opt.clip_norm});
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    adam.zero_grad();
    auto loss = cosemantic_pretrain_loss(model.similarity_matrix(features), corr, model.n_top());
    rep.loss.push_back(loss->value[0]);
    if (!std::isfinite(rep.loss.back())) throw TrainingDiverged("co-semantic pre-training diverged");
    ag::backward(loss);
    adam.step();
  }
  {
    ag::NoGradGuard ng;
    rep.final_loss =
        cosemantic_pretrain_loss(model.similarity_matrix(features), corr, model.n_top())->value[0];
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Indices of the k highest scores; ties go to the earlier node.
inline std::vector<std::size_t> select_top_k(const std::vector<double>& scores, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be positive");
  if (scores.size() < k)
    throw std::invalid_argument("need at least " + std::to_string(k) + " candidate nodes, have " +
                                std::to_string(scores.size()));
  return detail::top_positions(scores, k);
}

// ---------------------------------------------------------------------------
// Graph squaring

/// Maps a non-negative k x N_e matrix to a strictly positive k x k matrix:
/// relu(G exp(U1) + exp(c1)) exp(U2) + exp(c2). Stored values are logs, so
/// effective weights stay positive through any update.
template <class T>
struct PositiveMlp {
  Var<T> u1, c1, u2, c2;

  static PositiveMlp make(nn::ParamSet<T>& ps, const std::string& name, std::size_t n_e,
                          std::size_t k, std::size_t hidden) {
    auto log_uniform = [&](const std::string& n, Shape shape, double scale) {
      std::uniform_real_distribution<double> u(0.5, 1.5);
      Tensor<T> t(std::move(shape));
      for (auto& v : t.data) v = static_cast<T>(std::log(scale * u(ps.rng())));
      return ps.add(name + "." + n, std::move(t));
    };
    PositiveMlp m;
    m.u1 = log_uniform("u1", {n_e, hidden}, 1.0 / static_cast<double>(n_e));
    m.c1 = log_uniform("c1", {hidden}, 0.01);
    m.u2 = log_uniform("u2", {hidden, k}, 1.0 / static_cast<double>(hidden));
    m.c2 = log_uniform("c2", {k}, 0.01);
    return m;
  }

  Var<T> operator()(const Var<T>& g) const {
    auto h = ag::relu<T>(ag::linear<T>(g, ag::exp<T>(u1), ag::exp<T>(c1)));
    return ag::linear<T>(h, ag::exp<T>(u2), ag::exp<T>(c2));
  }
};

// ---------------------------------------------------------------------------
// Estimator

/// DFMT over the k selected nodes plus a node-linear head to one output series.
template <class T>
class UnseenEstimator {
 public:
  UnseenEstimator(const ModelConfig& cfg, std::size_t n_existing, std::uint64_t seed,
                  std::size_t hidden = 32)
      : dfmt_(cfg, seed), own_(seed + 1) {
    const std::size_t k = cfg.n_nodes;
    map_r_ = PositiveMlp<T>::make(own_, "map_r", n_existing, k, hidden);
    map_c_ = PositiveMlp<T>::make(own_, "map_c", n_existing, k, hidden);
    head_w_ = own_.constant_init("head.w", {k, 1}, T(1) / static_cast<T>(k));
    head_b_ = own_.constant_init("head.b", {1}, T(0));
    all_.adopt_all("dfmt.", dfmt_.params());
    all_.adopt_all("", own_);
  }

  const ModelConfig& config() const { return dfmt_.config(); }
  nn::ParamSet<T>& params() { return all_; }
  const nn::ParamSet<T>& params() const { return all_; }
  const DfmtModel<T>& dfmt() const { return dfmt_; }

  /// Square graphs before normalization, [k, k].
  Var<T> square_r(const Matrix& g_r) const { return map_r_(ag::constant(to_tensor<T>(g_r))); }
  Var<T> square_c(const Matrix& g_c) const { return map_c_(ag::constant(to_tensor<T>(g_c))); }

  /// Estimated series of the new node, normalized, [B, horizon].
  Var<T> forward(const WindowBatch& batch, const Matrix& g_r, const Matrix& g_c) const {
    auto a_r = ag::normalize_adjacency<T>(square_r(g_r));
    auto a_c = ag::normalize_adjacency<T>(square_c(g_c));
    auto y = dfmt_.forward(batch, a_r, a_c);                        // [B, k, tau]
    auto z = ag::linear<T>(ag::permute<T>(y, {0, 2, 1}), head_w_, head_b_);  // [B, tau, 1]
    return ag::reshape<T>(z, {batch.batch, batch.horizon});
  }

 private:
  DfmtModel<T> dfmt_;
  nn::ParamSet<T> own_;
  nn::ParamSet<T> all_;
  PositiveMlp<T> map_r_, map_c_;
  Var<T> head_w_, head_b_;
};

/// Inputs of one estimation problem: the selected nodes' series and graph
/// rows, plus the series the estimator is fitted to.
struct EstimationData {
  ModelConfig cfg;                 // n_nodes = k
  TimeSeriesPanel panel;           // selected nodes, original units
  Matrix inputs;                   // selected nodes, normalized with the existing scaler
  Matrix g_r, g_c;                 // k x N_e connectivity and clamped correlation rows
  std::vector<double> target;      // original units, full length
  double target_mean = 0, target_std = 1;
  Split split;
  WindowPlan train, val, test;

  WindowBatch batch(const std::vector<std::size_t>& starts) const {
    auto b = make_batch(panel, inputs, cfg, starts, false);
    b.has_target = true;
    b.y.clear();
    for (std::size_t t : starts)
      for (std::size_t k = 0; k < cfg.horizon; ++k)
        b.y.push_back((target[t + k] - target_mean) / target_std);
    return b;
  }
};

template <class T>
std::vector<double> estimate_windows(const UnseenEstimator<T>& est, const EstimationData& d,
                                     const std::vector<std::size_t>& starts,
                                     std::size_t batch_size = 64) {
  ag::NoGradGuard ng;
  std::vector<double> out;
  for (std::size_t s = 0; s < starts.size(); s += batch_size) {
    std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(s),
                                   starts.begin() + static_cast<std::ptrdiff_t>(
                                                        std::min(starts.size(), s + batch_size)));
    auto y = est.forward(make_batch(d.panel, d.inputs, d.cfg, chunk, false), d.g_r, d.g_c);
    for (T v : y->value.data) out.push_back(static_cast<double>(v) * d.target_std + d.target_mean);
  }
  return out;
}

template <class T>
MetricSet evaluate_estimator(const UnseenEstimator<T>& est, const EstimationData& d,
                             const std::vector<std::size_t>& starts) {
  if (starts.empty()) throw std::invalid_argument("evaluate: empty window set");
  std::vector<double> truth;
  for (std::size_t t : starts)
    for (std::size_t k = 0; k < d.cfg.horizon; ++k) truth.push_back(d.target[t + k]);
  return compute_metrics(truth, estimate_windows(est, d, starts), d.cfg.horizon);
}

/// Adam on the normalized L1 of the estimated series; keeps the weights with
/// the best validation MAE when `restore_best` is set.
template <class T>
TrainReport fit_estimator(UnseenEstimator<T>& est, const EstimationData& d,
                          const TrainOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  tune_allocator();
  TrainReport rep;
  rep.seed = opt.seed;
  if (d.train.starts.empty()) throw std::invalid_argument("no training windows");
  nn::Adam<T> adam(est.params(), {.lr = opt.lr, .clip_norm = opt.clip_norm});
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order = d.train.starts;
  const std::size_t per_epoch = (order.size() + opt.batch_size - 1) / opt.batch_size;
  std::size_t planned = per_epoch * opt.epochs;
  if (opt.max_steps) planned = std::min(planned, opt.max_steps);
  std::vector<Tensor<T>> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < order.size(); s += opt.batch_size) {
      if (opt.max_steps && rep.steps >= opt.max_steps) break;
      std::vector<std::size_t> chunk(
          order.begin() + static_cast<std::ptrdiff_t>(s),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + opt.batch_size)));
      auto b = d.batch(chunk);
      Tensor<T> target({b.batch, b.horizon});
      for (std::size_t i = 0; i < b.y.size(); ++i) target[i] = static_cast<T>(b.y[i]);
      if (opt.cosine_decay)
        adam.set_lr(0.5 * opt.lr *
                    (1 + std::cos(std::numbers::pi * static_cast<double>(rep.steps) /
                                  static_cast<double>(planned))));
      adam.zero_grad();
      Var<T> loss;
      try {
        loss = ag::l1_loss<T>(est.forward(b, d.g_r, d.g_c), target);
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(std::string("estimator training diverged: ") + e.what());
      }
      const double lv = static_cast<double>(loss->value[0]);
      if (!std::isfinite(lv)) throw TrainingDiverged("estimator training diverged");
      ag::backward(loss);
      adam.step();
      ++rep.steps;
      sum += lv * static_cast<double>(chunk.size());
      seen += chunk.size();
    }
    if (seen == 0) break;
    rep.train_loss.push_back(sum / static_cast<double>(seen));
    double val = std::numeric_limits<double>::quiet_NaN();
    if (!d.val.starts.empty()) {
      val = evaluate_estimator(est, d, d.val.starts).mae_all;
      rep.val_mae.push_back(val);
      if (val < rep.best_val_mae) {
        rep.best_val_mae = val;
        rep.best_epoch = epoch;
        since_best = 0;
        if (opt.restore_best) {
          best.clear();
          for (const auto& [_, p] : est.params().items()) best.push_back(p->value);
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
    for (const auto& [_, p] : est.params().items()) p->value = best[i++];
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct EstimateOptions {
  std::size_t k = 10;
  std::size_t mlp_hidden = 32;
  TrainOptions train;
};

template <class T>
struct UnseenEstimate {
  std::vector<std::size_t> selected;   // existing-node indices, best first
  std::vector<double> scores;          // similarity to every existing node
  bool pseudo_target = false;          // no observed series: fitted to a similarity-weighted blend
  EstimationData data;
  UnseenEstimator<T> estimator;
  TrainReport report;

  /// Estimated series over [begin, begin + m * horizon), original units.
  std::vector<double> series(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> starts;
    for (std::size_t t = std::max(begin, data.cfg.required_history());
         t + data.cfg.horizon <= end; t += data.cfg.horizon)
      starts.push_back(t);
    return estimate_windows(estimator, data, starts);
  }
};

/// Similarity-weighted mean of the selected series (weights clamped at 0).
inline std::vector<double> blended_series(const Matrix& values, const std::vector<std::size_t>& sel,
                                          const std::vector<double>& scores) {
  std::vector<double> w;
  double tot = 0;
  for (std::size_t i : sel) {
    w.push_back(std::max(scores[i], 0.0));
    tot += w.back();
  }
  if (!(tot > 0)) std::fill(w.begin(), w.end(), 1.0), tot = static_cast<double>(sel.size());
  std::vector<double> out(static_cast<std::size_t>(values.cols()), 0.0);
  for (std::size_t j = 0; j < sel.size(); ++j)
    for (std::size_t t = 0; t < out.size(); ++t)
      out[t] += w[j] / tot * values(static_cast<Eigen::Index>(sel[j]), static_cast<Eigen::Index>(t));
  return out;
}

/// Selects the k most similar existing nodes and builds the estimation inputs.
/// `observed` is the new road's series (same length as the panel) when it is
/// known; otherwise the target is the similarity-weighted blend of the
/// selected series.
inline EstimationData build_estimation_data(const PreparedData& existing,
                                            const std::vector<std::size_t>& selected,
                                            std::vector<double> target) {
  const auto n_e = static_cast<Eigen::Index>(existing.cfg.n_nodes);
  const auto k = static_cast<Eigen::Index>(selected.size());
  EstimationData d;
  d.cfg = existing.cfg;
  d.cfg.n_nodes = selected.size();
  d.panel = existing.panel;
  d.panel.values.resize(k, existing.panel.values.cols());
  d.inputs.resize(k, existing.normalized.cols());
  d.g_r.resize(k, n_e);
  d.g_c.resize(k, n_e);
  for (Eigen::Index r = 0; r < k; ++r) {
    const auto i = static_cast<Eigen::Index>(selected[static_cast<std::size_t>(r)]);
    d.panel.values.row(r) = existing.panel.values.row(i);
    d.inputs.row(r) = existing.normalized.row(i);
    d.g_r.row(r) = existing.conn.a_r.row(i);
    d.g_c.row(r) = existing.corr.a_c.row(i).cwiseMax(0.0);
  }
  d.panel.refresh_zero_variance();
  if (target.size() != existing.panel.length())
    throw std::invalid_argument("target series length " + std::to_string(target.size()) +
                                " does not match the panel length " +
                                std::to_string(existing.panel.length()));
  d.target = std::move(target);
  d.split = existing.split;
  double m = 0;
  for (std::size_t t = 0; t < d.split.train_end; ++t) m += d.target[t];
  m /= static_cast<double>(d.split.train_end);
  double v = 0;
  for (std::size_t t = 0; t < d.split.train_end; ++t) v += (d.target[t] - m) * (d.target[t] - m);
  const double sd = std::sqrt(v / static_cast<double>(d.split.train_end));
  d.target_mean = m;
  d.target_std = sd > 1e-12 ? sd : 1.0;
  d.train = existing.train;
  d.val = existing.val;
  d.test = existing.test;
  return d;
}

template <class T = float>
UnseenEstimate<T> estimate_unseen_road(const CoSemanticModel& cosem, const RoadNetwork& network,
                                       const PreparedData& existing, const ProposedNode& node,
                                       std::optional<std::vector<double>> observed,
                                       const EstimateOptions& opt = {}) {
  if (node.connections.empty())
    throw std::invalid_argument("proposed road '" + node.id + "' declares no connections");
  if (network.size() != existing.cfg.n_nodes)
    throw std::invalid_argument("network and data disagree on the node count");
  std::vector<SpatialSemanticGraph> refs;
  for (std::size_t i = 0; i < network.size(); ++i) refs.push_back(spatial_semantic_graph(network, i));
  auto scores = cosemantic_similarity(cosem, spatial_semantic_graph(network, node), refs);
  auto selected = select_top_k(scores, opt.k);
  const bool pseudo = !observed.has_value();
  auto target = pseudo ? blended_series(existing.panel.values, selected, scores) : std::move(*observed);
  EstimationData d = build_estimation_data(existing, selected, std::move(target));
  UnseenEstimator<T> est(d.cfg, network.size(), opt.train.seed, opt.mlp_hidden);
  TrainReport rep = fit_estimator(est, d, opt.train);
  return {std::move(selected), std::move(scores), pseudo, std::move(d), std::move(est), std::move(rep)};
}

}  // namespace tgpt
