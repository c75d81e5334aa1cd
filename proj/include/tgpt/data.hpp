#pragma once

// Road networks, traffic panels, graph construction, multi-scale windows and
// per-node scaling.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgpt/config.hpp"

namespace tgpt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Road network

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double distance = 1.0;
};

class RoadNetwork {
 public:
  RoadNetwork() = default;

  /// Validates ids and edges; throws DataError on any violation.
  RoadNetwork(std::vector<std::string> node_ids, std::vector<Edge> edges, bool directed = false)
      : node_ids_(std::move(node_ids)), edges_(std::move(edges)), directed_(directed) {
    for (std::size_t i = 0; i < node_ids_.size(); ++i) {
      if (!index_.emplace(node_ids_[i], i).second)
        throw DataError("duplicate node id '" + node_ids_[i] + "'");
    }
    for (const auto& e : edges_) {
      if (e.src >= node_ids_.size() || e.dst >= node_ids_.size())
        throw DataError("edge endpoint out of range");
      if (e.src == e.dst) throw DataError("self-loop edge on node '" + node_ids_[e.src] + "'");
      if (!(e.distance > 0.0))
        throw DataError("non-positive distance on edge " + node_ids_[e.src] + "-" +
                        node_ids_[e.dst]);
    }
  }

  std::size_t size() const { return node_ids_.size(); }
  const std::vector<std::string>& node_ids() const { return node_ids_; }
  const std::vector<Edge>& edges() const { return edges_; }
  bool directed() const { return directed_; }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t require_index(const std::string& id) const {
    auto i = index_of(id);
    if (!i) throw DataError("unknown node id '" + id + "'");
    return *i;
  }

 private:
  std::vector<std::string> node_ids_;
  std::vector<Edge> edges_;
  bool directed_ = false;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ConnectivityGraph {
  Matrix a_r;
};

struct CorrelationGraph {
  Matrix a_c;
};

// ---------------------------------------------------------------------------
// Time handling

struct TimeCode {
  int time_of_day = 0;  // [0, q)
  int day_of_week = 0;  // [0, 7), Monday = 0
  bool operator==(const TimeCode&) const = default;
};

/// Parses "YYYY-MM-DD[THH:MM[:SS]]" (a space may replace the T) to minutes
/// since 1970-01-01 00:00 UTC.
inline std::int64_t parse_timestamp_minutes(const std::string& s) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 'T';
  const int n = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &sec);
  if (n < 3 || (n > 3 && n < 6) || (n >= 4 && sep != 'T' && sep != ' '))
    throw DataError("bad timestamp '" + s + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59)
    throw DataError("bad timestamp '" + s + "'");
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 1440 + h * 60 + mi;
}

inline std::string format_timestamp_minutes(std::int64_t minutes) {
  using namespace std::chrono;
  std::int64_t days = minutes >= 0 ? minutes / 1440 : -((-minutes + 1439) / 1440);
  const std::int64_t mod = minutes - days * 1440;
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(mod / 60), static_cast<int>(mod % 60));
  return buf;
}

// ---------------------------------------------------------------------------
// Panel

/// N x T traffic values with sampling metadata.
struct TimeSeriesPanel {
  Matrix values;
  int slice_minutes = 5;
  int q = 288;
  std::int64_t start_minutes = 0;  // epoch minutes of column 0
  std::string units = "flow";
  std::vector<bool> zero_variance;

  std::size_t n_nodes() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t length() const { return static_cast<std::size_t>(values.cols()); }

  /// Time code of absolute step t (may lie beyond the stored columns).
  TimeCode code_at(std::int64_t t) const {
    const std::int64_t minutes = start_minutes + t * slice_minutes;
    std::int64_t day = minutes >= 0 ? minutes / 1440 : -((-minutes + 1439) / 1440);
    const std::int64_t minute_of_day = minutes - day * 1440;
    TimeCode c;
    c.time_of_day = static_cast<int>((minute_of_day / slice_minutes) % q);
    // 1970-01-01 was a Thursday (index 3 with Monday = 0)
    c.day_of_week = static_cast<int>(((day + 3) % 7 + 7) % 7);
    return c;
  }

  /// Columns [begin, end) as a new panel with adjusted start time.
  TimeSeriesPanel slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > length()) throw DataError("panel slice out of range");
    TimeSeriesPanel p = *this;
    p.values = values.middleCols(static_cast<Eigen::Index>(begin),
                                 static_cast<Eigen::Index>(end - begin));
    p.start_minutes = start_minutes + static_cast<std::int64_t>(begin) * slice_minutes;
    p.refresh_zero_variance();
    return p;
  }

  /// Block means over `factor` consecutive slices; q and slice length scale accordingly.
  /// A trailing partial block is dropped.
  TimeSeriesPanel downsample(int factor) const {
    if (factor <= 0 || q % factor != 0) throw DataError("downsample factor must divide q");
    TimeSeriesPanel p = *this;
    p.q = q / factor;
    p.slice_minutes = slice_minutes * factor;
    const Eigen::Index blocks = values.cols() / factor;
    p.values.resize(values.rows(), blocks);
    for (Eigen::Index b = 0; b < blocks; ++b)
      p.values.col(b) = values.middleCols(b * factor, factor).rowwise().mean();
    p.refresh_zero_variance();
    return p;
  }

  void refresh_zero_variance() {
    zero_variance.assign(n_nodes(), false);
    for (std::size_t i = 0; i < n_nodes(); ++i) {
      const auto row = values.row(static_cast<Eigen::Index>(i));
      zero_variance[i] = length() == 0 || (row.maxCoeff() - row.minCoeff()) == 0.0;
    }
  }

  void validate() const {
    if (slice_minutes <= 0 || q <= 0) throw DataError("slice_minutes and q must be positive");
    if (1440 % (static_cast<long>(q) * slice_minutes) != 0)
      throw DataError("q * slice_minutes must divide 1440");
    if (!values.allFinite()) throw DataError("panel contains non-finite values");
  }
};

/// Fills NaN runs per node by linear interpolation; edge runs copy the
/// nearest observed value. Returns the number of imputed cells.
inline std::size_t impute_linear(Matrix& values) {
  std::size_t filled = 0;
  const Eigen::Index t = values.cols();
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    Eigen::Index prev = -1;
    for (Eigen::Index k = 0; k <= t; ++k) {
      const bool valid = k < t && std::isfinite(values(i, k));
      if (k < t && !valid) continue;
      // gap is (prev, k)
      if (k - prev > 1) {
        if (prev < 0 && k == t) throw DataError("node row " + std::to_string(i) + " has no data");
        for (Eigen::Index m = prev + 1; m < k; ++m) {
          if (prev < 0)
            values(i, m) = values(i, k);
          else if (k == t)
            values(i, m) = values(i, prev);
          else {
            const double w = static_cast<double>(m - prev) / static_cast<double>(k - prev);
            values(i, m) = (1 - w) * values(i, prev) + w * values(i, k);
          }
          ++filled;
        }
      }
      prev = k;
    }
  }
  return filled;
}

// ---------------------------------------------------------------------------
// Graphs

inline ConnectivityGraph build_connectivity_graph(const RoadNetwork& net) {
  const auto n = static_cast<Eigen::Index>(net.size());
  ConnectivityGraph g{Matrix::Zero(n, n)};
  for (const auto& e : net.edges()) {
    g.a_r(static_cast<Eigen::Index>(e.src), static_cast<Eigen::Index>(e.dst)) = 1.0;
    g.a_r(static_cast<Eigen::Index>(e.dst), static_cast<Eigen::Index>(e.src)) = 1.0;
  }
  return g;
}

/// Pearson correlation between every pair of node rows. A zero-variance row
/// correlates 0 with every other row; the diagonal is always 1.
inline CorrelationGraph pearson_correlation_graph(const Matrix& train_values) {
  const Eigen::Index n = train_values.rows(), t = train_values.cols();
  if (t < 2) throw DataError("correlation needs at least 2 samples");
  Matrix centered = train_values.colwise() - train_values.rowwise().mean();
  Eigen::VectorXd norms = centered.rowwise().norm();
  CorrelationGraph g{Matrix::Identity(n, n)};
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double r = 0.0;
      if (norms(i) > 0 && norms(j) > 0) {
        r = centered.row(i).dot(centered.row(j)) / (norms(i) * norms(j));
        r = std::clamp(r, -1.0, 1.0);
      }
      g.a_c(i, j) = g.a_c(j, i) = r;
    }
  return g;
}

inline CorrelationGraph pearson_correlation_graph(const TimeSeriesPanel& train_panel) {
  return pearson_correlation_graph(train_panel.values);
}

// ---------------------------------------------------------------------------
// Splits and scaling

/// Contiguous 70/10/20 split in time.
struct Split {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;

  static Split of(std::size_t t) {
    return {static_cast<std::size_t>(t * 7 / 10), static_cast<std::size_t>(t * 8 / 10), t};
  }
};

struct ScalerStats {
  std::vector<double> mean;
  std::vector<double> std;

  static ScalerStats fit(const Matrix& train) {
    if (train.cols() == 0) throw DataError("cannot fit scaler on empty training split");
    ScalerStats s;
    for (Eigen::Index i = 0; i < train.rows(); ++i) {
      const double m = train.row(i).mean();
      const double var = (train.row(i).array() - m).square().mean();
      double sd = std::sqrt(var);
      if (!(sd > 1e-12)) sd = 1.0;
      s.mean.push_back(m);
      s.std.push_back(sd);
    }
    return s;
  }

  std::size_t size() const { return mean.size(); }

  double normalize(std::size_t node, double v) const { return (v - mean[node]) / std[node]; }
  double denormalize(std::size_t node, double v) const { return v * std[node] + mean[node]; }

  Matrix normalize(const Matrix& x) const {
    check(x);
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out.row(i) = (x.row(i).array() - mean[i]) / std[i];
    return out;
  }

  Matrix denormalize(const Matrix& x) const {
    check(x);
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = x.row(i).array() * std[i] + mean[i];
    return out;
  }

  /// Restricts the statistics to a subset of nodes, in the given order.
  ScalerStats select(const std::vector<std::size_t>& nodes) const {
    ScalerStats s;
    for (auto i : nodes) {
      s.mean.push_back(mean.at(i));
      s.std.push_back(std.at(i));
    }
    return s;
  }

 private:
  void check(const Matrix& x) const {
    if (static_cast<std::size_t>(x.rows()) != mean.size())
      throw DataError("scaler node count mismatch");
  }
};

inline void to_json(nlohmann::json& j, const ScalerStats& s) {
  j = nlohmann::json{{"mean", s.mean}, {"std", s.std}};
}
inline void from_json(const nlohmann::json& j, ScalerStats& s) {
  j.at("mean").get_to(s.mean);
  j.at("std").get_to(s.std);
}

// ---------------------------------------------------------------------------
// Windows

/// Multi-scale inputs and targets for a batch of prediction start steps.
/// Arrays are row-major: x_r is [batch][node][t_r], t_h is [batch][t_r].
struct WindowBatch {
  std::size_t batch = 0, n_nodes = 0, t_r = 0, t_d = 0, t_w = 0, horizon = 0;
  std::vector<double> x_r, x_d, x_w, y;
  std::vector<TimeCode> t_h, t_p;
  std::vector<std::size_t> starts;
  bool has_target = false;
};

struct WindowPlan {
  std::vector<std::size_t> starts;
  std::size_t skipped = 0;  // candidates rejected for insufficient history or horizon
};

/// Enumerates prediction starts t_i in [begin, end) whose full history and
/// target lie inside a series of `length` steps.
inline WindowPlan plan_windows(std::size_t length, const ModelConfig& cfg, std::size_t begin,
                               std::size_t end, bool need_target = true) {
  WindowPlan plan;
  const std::size_t hist = cfg.required_history();
  for (std::size_t t = begin; t < end; ++t) {
    const bool ok = t >= hist && (!need_target || t + cfg.horizon <= length) && t <= length;
    if (ok)
      plan.starts.push_back(t);
    else
      ++plan.skipped;
  }
  return plan;
}

inline WindowPlan plan_windows(const TimeSeriesPanel& panel, const ModelConfig& cfg,
                               std::size_t begin, std::size_t end) {
  return plan_windows(panel.length(), cfg, begin, end);
}

/// Cuts windows from `values` (N x T', normalized or not) at the given starts.
/// `code_of(t)` supplies the time code of absolute step t.
template <class CodeFn>
WindowBatch make_batch(const Matrix& values, const ModelConfig& cfg,
                       const std::vector<std::size_t>& starts, CodeFn&& code_of,
                       bool with_target = true) {
  WindowBatch b;
  b.batch = starts.size();
  b.n_nodes = static_cast<std::size_t>(values.rows());
  b.t_r = cfg.t_r;
  b.t_d = cfg.t_d;
  b.t_w = cfg.t_w;
  b.horizon = cfg.horizon;
  b.starts = starts;
  b.has_target = with_target;
  const std::size_t n = b.n_nodes, len = static_cast<std::size_t>(values.cols());
  b.x_r.resize(b.batch * n * cfg.t_r);
  b.x_d.resize(b.batch * n * cfg.t_d);
  b.x_w.resize(b.batch * n * cfg.t_w);
  if (with_target) b.y.resize(b.batch * n * cfg.horizon);
  b.t_h.resize(b.batch * cfg.t_r);
  b.t_p.resize(b.batch * cfg.horizon);
  const std::size_t q = cfg.q;
  for (std::size_t s = 0; s < b.batch; ++s) {
    const std::size_t ti = starts[s];
    if (ti < cfg.required_history() || ti > len || (with_target && ti + cfg.horizon > len))
      throw DataError("window start " + std::to_string(ti) + " out of range");
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      for (std::size_t k = 0; k < cfg.t_r; ++k)
        b.x_r[(s * n + i) * cfg.t_r + k] =
            values(row, static_cast<Eigen::Index>(ti - cfg.t_r + k));
      for (std::size_t k = 0; k < cfg.t_d; ++k)
        b.x_d[(s * n + i) * cfg.t_d + k] =
            values(row, static_cast<Eigen::Index>(ti - (cfg.t_d - k) * q));
      for (std::size_t k = 0; k < cfg.t_w; ++k)
        b.x_w[(s * n + i) * cfg.t_w + k] =
            values(row, static_cast<Eigen::Index>(ti - 7 * (cfg.t_w - k) * q));
      if (with_target)
        for (std::size_t k = 0; k < cfg.horizon; ++k)
          b.y[(s * n + i) * cfg.horizon + k] = values(row, static_cast<Eigen::Index>(ti + k));
    }
    for (std::size_t k = 0; k < cfg.t_r; ++k)
      b.t_h[s * cfg.t_r + k] = code_of(static_cast<std::int64_t>(ti - cfg.t_r + k));
    for (std::size_t k = 0; k < cfg.horizon; ++k)
      b.t_p[s * cfg.horizon + k] = code_of(static_cast<std::int64_t>(ti + k));
  }
  return b;
}

inline WindowBatch make_batch(const TimeSeriesPanel& panel, const Matrix& values,
                              const ModelConfig& cfg, const std::vector<std::size_t>& starts,
                              bool with_target = true) {
  return make_batch(
      values, cfg, starts, [&](std::int64_t t) { return panel.code_at(t); }, with_target);
}

// ---------------------------------------------------------------------------
// Files

/// Dataset manifest (JSON). Paths are relative to the manifest's directory.
struct DatasetManifest {
  std::string network = "network.csv";
  std::string series = "series.csv";
  std::string format = "csv";  // "csv" or "binary"
  int slice_minutes = 5;
  int q = 288;
  std::string start_timestamp = "1970-01-05T00:00";
  std::string units = "flow";
  std::optional<std::size_t> n_nodes;
  bool directed = false;
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"network", m.network},
                     {"series", m.series},
                     {"format", m.format},
                     {"slice_minutes", m.slice_minutes},
                     {"q", m.q},
                     {"start_timestamp", m.start_timestamp},
                     {"units", m.units},
                     {"directed", m.directed}};
  if (m.n_nodes) j["n_nodes"] = *m.n_nodes;
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("network").get_to(m.network);
  j.at("series").get_to(m.series);
  if (j.contains("format")) j.at("format").get_to(m.format);
  j.at("slice_minutes").get_to(m.slice_minutes);
  j.at("q").get_to(m.q);
  j.at("start_timestamp").get_to(m.start_timestamp);
  if (j.contains("units")) j.at("units").get_to(m.units);
  if (j.contains("n_nodes")) m.n_nodes = j.at("n_nodes").get<std::size_t>();
  if (j.contains("directed")) j.at("directed").get_to(m.directed);
}

struct Dataset {
  RoadNetwork network;
  TimeSeriesPanel panel;
  std::size_t imputed = 0;
};

namespace io {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_cell(const std::string& s, const std::string& where) {
  if (s.empty() || s == "nan" || s == "NaN" || s == "NA") return std::nan("");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw DataError("bad number '" + s + "' at " + where);
  return v;
}

struct RawSeries {
  std::vector<std::string> ids;
  Matrix values;
  std::optional<std::int64_t> first_minutes;
};

/// Series CSV: header "node_id,<ts_0>,<ts_1>,..." then one row per node.
/// Empty or "nan" cells are missing. Timestamps must increase by the slice.
inline RawSeries read_series_csv(const std::filesystem::path& path, int slice_minutes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty series file " + path.string());
  auto header = split_csv_line(line);
  if (header.size() < 2) throw DataError("series header has no time columns");
  const std::size_t t = header.size() - 1;
  RawSeries raw;
  std::int64_t prev = 0;
  for (std::size_t k = 0; k < t; ++k) {
    const std::int64_t m = parse_timestamp_minutes(header[k + 1]);
    if (k == 0)
      raw.first_minutes = m;
    else if (m <= prev)
      throw DataError("non-monotone timestamps at column " + std::to_string(k + 1));
    else if (m - prev != slice_minutes)
      throw DataError("timestamp spacing at column " + std::to_string(k + 1) +
                      " does not match slice length");
    prev = m;
  }
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t + 1)
      throw DataError("series row " + std::to_string(lineno) + " has " +
                      std::to_string(cells.size() - 1) + " values, expected " + std::to_string(t));
    raw.ids.push_back(cells[0]);
    std::vector<double> r(t);
    for (std::size_t k = 0; k < t; ++k)
      r[k] = parse_cell(cells[k + 1], "line " + std::to_string(lineno));
    rows.push_back(std::move(r));
  }
  raw.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < t; ++k)
      raw.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  return raw;
}

inline constexpr char kSeriesMagic[8] = {'T', 'G', 'P', 'T', 'S', 'E', 'R', '1'};

/// Dense binary series: magic, u64 N, u64 T, N x (u32 len, id bytes),
/// then N*T little-endian float64 row-major. NaN marks a missing value.
inline void write_series_binary(const std::filesystem::path& path,
                                const std::vector<std::string>& ids, const Matrix& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kSeriesMagic, 8);
  const std::uint64_t n = static_cast<std::uint64_t>(values.rows());
  const std::uint64_t t = static_cast<std::uint64_t>(values.cols());
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&t), 8);
  for (const auto& id : ids) {
    const std::uint32_t len = static_cast<std::uint32_t>(id.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(id.data(), len);
  }
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(n * t * sizeof(double)));
}

inline RawSeries read_series_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kSeriesMagic, 8) != 0)
    throw DataError("bad series binary header in " + path.string());
  std::uint64_t n = 0, t = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  in.read(reinterpret_cast<char*>(&t), 8);
  if (!in || n > (1u << 24) || t > (1ull << 32)) throw DataError("bad series binary dimensions");
  RawSeries raw;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    if (!in || len > 4096) throw DataError("bad node id record in series binary");
    std::string id(len, '\0');
    in.read(id.data(), len);
    raw.ids.push_back(std::move(id));
  }
  raw.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t));
  in.read(reinterpret_cast<char*>(raw.values.data()),
          static_cast<std::streamsize>(n * t * sizeof(double)));
  if (!in) throw DataError("truncated series binary " + path.string());
  return raw;
}

/// Edge list CSV with header "src,dst,distance"; ids must exist in `ids`.
inline std::vector<Edge> read_edges_csv(const std::filesystem::path& path,
                                        const std::unordered_map<std::string, std::size_t>& ids) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::vector<Edge> edges;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (lineno == 1 && !cells.empty() && cells[0] == "src") continue;
    if (cells.size() < 2) throw DataError("edge line " + std::to_string(lineno) + " malformed");
    auto a = ids.find(cells[0]);
    auto b = ids.find(cells[1]);
    if (a == ids.end() || b == ids.end())
      throw DataError("unknown node id in edge list at line " + std::to_string(lineno) + ": '" +
                      (a == ids.end() ? cells[0] : cells[1]) + "'");
    const double dist =
        cells.size() > 2 ? parse_cell(cells[2], "edge line " + std::to_string(lineno)) : 1.0;
    edges.push_back({a->second, b->second, dist});
  }
  return edges;
}

inline void write_edges_csv(const std::filesystem::path& path, const RoadNetwork& net) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "src,dst,distance\n";
  out.precision(10);
  for (const auto& e : net.edges())
    out << net.node_ids()[e.src] << ',' << net.node_ids()[e.dst] << ',' << e.distance << '\n';
}

inline void write_series_csv(const std::filesystem::path& path, const TimeSeriesPanel& panel,
                             const std::vector<std::string>& ids) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "node_id";
  for (std::size_t k = 0; k < panel.length(); ++k)
    out << ','
        << format_timestamp_minutes(panel.start_minutes +
                                    static_cast<std::int64_t>(k) * panel.slice_minutes);
  out << '\n';
  out.precision(10);
  for (std::size_t i = 0; i < panel.n_nodes(); ++i) {
    out << ids[i];
    for (std::size_t k = 0; k < panel.length(); ++k)
      out << ',' << panel.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    out << '\n';
  }
}

}  // namespace io

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  try {
    return nlohmann::json::parse(in).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + path.string() + ": " + e.what());
  }
}

/// Loads network and series, validates them, and imputes missing values.
inline Dataset load_dataset(const std::filesystem::path& network_path,
                            const std::filesystem::path& series_path, const std::string& format,
                            const DatasetManifest& meta) {
  io::RawSeries raw = format == "csv" ? io::read_series_csv(series_path, meta.slice_minutes)
                      : format == "binary" || format == "npz"
                          ? io::read_series_binary(series_path)
                          : throw DataError("unknown series format '" + format + "'");
  if (meta.n_nodes && *meta.n_nodes != raw.ids.size())
    throw DataError("shape mismatch: manifest declares " + std::to_string(*meta.n_nodes) +
                    " nodes, series has " + std::to_string(raw.ids.size()) + " rows");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < raw.ids.size(); ++i)
    if (!index.emplace(raw.ids[i], i).second)
      throw DataError("duplicate node id '" + raw.ids[i] + "' in series");
  auto edges = io::read_edges_csv(network_path, index);

  Dataset ds;
  ds.network = RoadNetwork(raw.ids, std::move(edges), meta.directed);
  ds.panel.slice_minutes = meta.slice_minutes;
  ds.panel.q = meta.q;
  ds.panel.units = meta.units;
  ds.panel.start_minutes = raw.first_minutes ? *raw.first_minutes
                                             : parse_timestamp_minutes(meta.start_timestamp);
  ds.panel.values = std::move(raw.values);
  ds.imputed = impute_linear(ds.panel.values);
  ds.panel.refresh_zero_variance();
  ds.panel.validate();
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto meta = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  return load_dataset(dir / meta.network, dir / meta.series, meta.format, meta);
}

/// Writes network.csv, series file and manifest.json into `dir`.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds,
                         const std::string& format = "csv") {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.format = format;
  m.series = format == "csv" ? "series.csv" : "series.bin";
  m.slice_minutes = ds.panel.slice_minutes;
  m.q = ds.panel.q;
  m.start_timestamp = format_timestamp_minutes(ds.panel.start_minutes);
  m.units = ds.panel.units;
  m.n_nodes = ds.network.size();
  m.directed = ds.network.directed();
  io::write_edges_csv(dir / m.network, ds.network);
  if (format == "csv")
    io::write_series_csv(dir / m.series, ds.panel, ds.network.node_ids());
  else
    io::write_series_binary(dir / m.series, ds.network.node_ids(), ds.panel.values);
  std::ofstream(dir / "manifest.json") << nlohmann::json(m).dump(2) << '\n';
}

}  // namespace tgpt
