#pragma once

// Synthetic datasets used by tests, the CLI `make-fixture` command and demos.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tgpt/data.hpp"

namespace tgpt::synthetic {

inline std::vector<std::string> numbered_ids(std::size_t n, std::size_t first = 0) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(first + i));
  return ids;
}

/// Random connected undirected network with exactly `n_edges` edges: a random
/// spanning tree plus uniformly drawn extra pairs.
inline RoadNetwork random_connected_network(std::size_t n, std::size_t n_edges, std::uint64_t seed,
                                            double min_km = 0.5, double max_km = 5.0) {
  if (n_edges + 1 < n || n_edges > n * (n - 1) / 2)
    throw DataError("edge count incompatible with a connected simple graph");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(min_km, max_km);
  std::set<std::pair<std::size_t, std::size_t>> used;
  std::vector<Edge> edges;
  auto add = [&](std::size_t a, std::size_t b) {
    if (a == b) return false;
    auto key = std::minmax(a, b);
    if (!used.insert(key).second) return false;
    edges.push_back({a, b, std::round(dist(rng) * 100) / 100});
    return true;
  };
  for (std::size_t i = 1; i < n; ++i) add(i, std::uniform_int_distribution<std::size_t>(0, i - 1)(rng));
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  while (edges.size() < n_edges) add(pick(rng), pick(rng));
  return RoadNetwork(numbered_ids(n), std::move(edges));
}

/// Ring 0-1-...-(n-1)-0 with unit distances (a single edge when n == 2).
inline RoadNetwork ring_network(std::size_t n, double km = 1.0) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i + 1 < n; ++i) edges.push_back({i, i + 1, km});
  if (n > 2) edges.push_back({n - 1, 0, km});
  return RoadNetwork(numbered_ids(n), std::move(edges));
}

struct SinusoidOptions {
  std::size_t n_nodes = 8;
  std::size_t days = 14;
  int q = 24;
  double base = 100.0;
  double amplitude = 50.0;
  double noise = 0.0;          // std of additive Gaussian noise
  double weekend_factor = 1.0;  // amplitude multiplier on Saturday/Sunday
  std::uint64_t seed = 7;
  std::string start = "2024-01-01T00:00";  // a Monday
};

/// Noise-free part of the daily sinusoid for node `i` at absolute step `t`.
struct SinusoidSignal {
  SinusoidOptions opt;
  std::vector<double> phase, offset;
  std::int64_t start_minutes = 0;

  explicit SinusoidSignal(const SinusoidOptions& o) : opt(o) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    start_minutes = parse_timestamp_minutes(o.start);
    for (std::size_t i = 0; i < o.n_nodes; ++i) {
      phase.push_back(2 * std::numbers::pi * u(rng));
      offset.push_back(o.base * (0.8 + 0.4 * u(rng)));
    }
  }

  int slice_minutes() const { return 1440 / opt.q; }

  double operator()(std::size_t i, std::int64_t t) const {
    const double x = 2 * std::numbers::pi * static_cast<double>(t) / opt.q + phase[i];
    const std::int64_t minutes = start_minutes + t * slice_minutes();
    const std::int64_t day = minutes / 1440;
    const int dow = static_cast<int>(((day + 3) % 7 + 7) % 7);
    const double amp = opt.amplitude * (dow >= 5 ? opt.weekend_factor : 1.0);
    return offset[i] + amp * std::sin(x);
  }
};

/// Daily-periodic panel on a ring network: node i carries
/// offset_i + amplitude * sin(2 pi t / q + phase_i) plus optional noise.
inline Dataset sinusoid_dataset(const SinusoidOptions& o) {
  SinusoidSignal sig(o);
  const std::size_t t = o.days * static_cast<std::size_t>(o.q);
  std::mt19937_64 rng(o.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> nd(0.0, 1.0);
  Dataset ds;
  ds.network = ring_network(o.n_nodes);
  ds.panel.q = o.q;
  ds.panel.slice_minutes = sig.slice_minutes();
  ds.panel.start_minutes = sig.start_minutes;
  ds.panel.values.resize(static_cast<Eigen::Index>(o.n_nodes), static_cast<Eigen::Index>(t));
  for (std::size_t i = 0; i < o.n_nodes; ++i)
    for (std::size_t k = 0; k < t; ++k)
      ds.panel.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          sig(i, static_cast<std::int64_t>(k)) + o.noise * nd(rng);
  ds.panel.refresh_zero_variance();
  return ds;
}

/// Small routable dataset for the service and CLI: daily sinusoids on a
/// random connected network.
/// Road ids run from `first_id`.
inline Dataset service_fixture(std::size_t n_nodes = 8, std::size_t days = 14, std::uint64_t seed = 5,
                               std::size_t first_id = 0) {
  SinusoidOptions o;
  o.n_nodes = n_nodes;
  o.days = days;
  o.q = 288;
  o.noise = 2.0;
  o.seed = seed;
  Dataset ds = sinusoid_dataset(o);
  auto net = random_connected_network(n_nodes, std::min(n_nodes * (n_nodes - 1) / 2, n_nodes + n_nodes / 2), seed);
  ds.network = RoadNetwork(numbered_ids(n_nodes, first_id), net.edges(), net.directed());
  return ds;
}

/// PeMS08-shaped dataset: 170 sensors, 548 road links, 5-minute slices.
inline Dataset pems08_style_dataset(std::size_t days = 1, std::uint64_t seed = 8) {
  SinusoidOptions o;
  o.n_nodes = 170;
  o.days = days;
  o.q = 288;
  o.base = 200;
  o.amplitude = 120;
  o.noise = 8;
  o.seed = seed;
  Dataset ds = sinusoid_dataset(o);
  ds.network = random_connected_network(170, 548, seed);
  return ds;
}

struct ClusterOptions {
  std::size_t cluster_size = 11;
  std::size_t days = 21;
  int q = 24;
  double base = 100.0;
  double amplitude = 50.0;
  double noise = 5.0;
  std::uint64_t seed = 11;
  std::string start = "2024-01-01T00:00";
};

/// Two clusters with distinct structure and traffic. Cluster 0 is a ring of
/// short links (0.2-0.6 km, degree 2) carrying a daily wave; cluster 1 is a
/// ring with chords of long links (3-8 km, degree 4+) carrying a half-day
/// wave, uncorrelated with the daily one. One cluster-0 node is held out: its
/// series is the mean of its two neighbours plus independent noise.
struct ClusterFixture {
  Dataset full;
  std::vector<int> cluster;  // per node of `full`
  std::size_t held_out = 0;

  /// `full` without the held-out node and its links.
  Dataset existing() const {
    std::vector<std::size_t> keep;
    std::vector<std::ptrdiff_t> remap(full.network.size(), -1);
    for (std::size_t i = 0; i < full.network.size(); ++i)
      if (i != held_out) {
        remap[i] = static_cast<std::ptrdiff_t>(keep.size());
        keep.push_back(i);
      }
    std::vector<std::string> ids;
    for (auto i : keep) ids.push_back(full.network.node_ids()[i]);
    std::vector<Edge> edges;
    for (const auto& e : full.network.edges())
      if (e.src != held_out && e.dst != held_out)
        edges.push_back({static_cast<std::size_t>(remap[e.src]),
                         static_cast<std::size_t>(remap[e.dst]), e.distance});
    Dataset d;
    d.network = RoadNetwork(std::move(ids), std::move(edges));
    d.panel = full.panel;
    d.panel.values.resize(static_cast<Eigen::Index>(keep.size()), full.panel.values.cols());
    for (std::size_t r = 0; r < keep.size(); ++r)
      d.panel.values.row(static_cast<Eigen::Index>(r)) =
          full.panel.values.row(static_cast<Eigen::Index>(keep[r]));
    d.panel.refresh_zero_variance();
    return d;
  }

  std::vector<int> existing_clusters() const {
    std::vector<int> c;
    for (std::size_t i = 0; i < cluster.size(); ++i)
      if (i != held_out) c.push_back(cluster[i]);
    return c;
  }

  std::vector<double> held_out_series() const {
    const auto row = full.panel.values.row(static_cast<Eigen::Index>(held_out));
    return {row.begin(), row.end()};
  }

  /// (neighbour id, km) of the held-out node.
  std::vector<std::pair<std::string, double>> held_out_links() const {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& e : full.network.edges()) {
      if (e.src == held_out) out.emplace_back(full.network.node_ids()[e.dst], e.distance);
      if (e.dst == held_out) out.emplace_back(full.network.node_ids()[e.src], e.distance);
    }
    return out;
  }
};

inline ClusterFixture two_cluster_fixture(const ClusterOptions& o = {}) {
  const std::size_t m = o.cluster_size, n = 2 * m;
  if (m < 4) throw DataError("clusters need at least 4 nodes");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto km = [&](double lo, double hi) { return std::round((lo + (hi - lo) * u(rng)) * 100) / 100; };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < m; ++i) edges.push_back({i, (i + 1) % m, km(0.2, 0.6)});
  for (std::size_t i = 0; i < m; ++i) {
    edges.push_back({m + i, m + (i + 1) % m, km(3.0, 8.0)});
    edges.push_back({m + i, m + (i + 3) % m, km(3.0, 8.0)});
  }
  ClusterFixture f;
  f.full.network = RoadNetwork(numbered_ids(n), std::move(edges));
  f.cluster.assign(n, 0);
  for (std::size_t i = m; i < n; ++i) f.cluster[i] = 1;
  f.held_out = m / 2;

  const std::size_t len = o.days * static_cast<std::size_t>(o.q);
  auto& p = f.full.panel;
  p.q = o.q;
  p.slice_minutes = 1440 / o.q;
  p.start_minutes = parse_timestamp_minutes(o.start);
  p.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(len));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double offset = o.base * (0.8 + 0.4 * u(rng));
    const double amp = o.amplitude * (0.7 + 0.6 * u(rng));
    for (std::size_t t = 0; t < len; ++t) {
      const double x = 2 * std::numbers::pi * static_cast<double>(t) / o.q;
      const double wave = f.cluster[i] == 0 ? std::sin(x) : std::sin(2 * x + 1.0);
      p.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) =
          offset + amp * wave + o.noise * nd(rng);
    }
  }
  const auto h = static_cast<Eigen::Index>(f.held_out);
  const auto a = static_cast<Eigen::Index>((f.held_out + m - 1) % m);
  const auto b = static_cast<Eigen::Index>((f.held_out + 1) % m);
  for (Eigen::Index t = 0; t < p.values.cols(); ++t)
    p.values(h, t) = 0.5 * (p.values(a, t) + p.values(b, t)) + o.noise * nd(rng);
  p.refresh_zero_variance();
  return f;
}

}  // namespace tgpt::synthetic
