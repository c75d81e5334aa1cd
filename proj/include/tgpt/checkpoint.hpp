#pragma once

// Self-describing model checkpoint.
//
// Layout: 8-byte magic "TGPTCKPT", u32 version, u64 header length, JSON header
// (config, scaler, node ids, parameter names and shapes, metadata), then every
// parameter as little-endian float64 in header order, then the normalized
// connectivity and correlation matrices (N*N float64 each).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgpt/dfmt.hpp"
#include "tgpt/train.hpp"

namespace tgpt {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'T', 'G', 'P', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig cfg;
  ScalerStats scaler;
  std::vector<std::string> node_ids;
  NormalizedGraphs graphs;
  std::vector<std::pair<std::string, Tensor<double>>> params;
  nlohmann::json meta = nlohmann::json::object();

  /// Rebuilds a model of scalar type T with the stored weights.
  template <class T>
  DfmtModel<T> model() const {
    DfmtModel<T> m(cfg, 0);
    const auto& items = m.params().items();
    if (items.size() != params.size())
      throw CheckpointError("checkpoint has " + std::to_string(params.size()) +
                            " tensors, model expects " + std::to_string(items.size()));
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].first != params[i].first || items[i].second->shape() != params[i].second.shape)
        throw CheckpointError("checkpoint tensor '" + params[i].first + "' does not match model");
      items[i].second->value = params[i].second.template cast<T>();
    }
    return m;
  }
};

template <class T>
Checkpoint make_checkpoint(const DfmtModel<T>& model, const PreparedData& data,
                           std::vector<std::string> node_ids, nlohmann::json meta = {}) {
  Checkpoint c;
  c.cfg = model.config();
  c.scaler = data.scaler;
  c.node_ids = std::move(node_ids);
  c.graphs = data.graphs;
  for (const auto& [name, p] : model.params().items())
    c.params.emplace_back(name, p->value.template cast<double>());
  if (!meta.is_null()) c.meta = std::move(meta);
  return c;
}

namespace detail {

inline void write_doubles(std::ostream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::istream& in, double* p, std::size_t n) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw CheckpointError("truncated checkpoint data");
}

}  // namespace detail

/// Writes to a temporary sibling and renames, so readers never see a partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  nlohmann::json header;
  header["config"] = c.cfg;
  header["scaler"] = c.scaler;
  header["node_ids"] = c.node_ids;
  header["meta"] = c.meta;
  auto& ps = header["params"] = nlohmann::json::array();
  for (const auto& [name, t] : c.params) ps.push_back({{"name", name}, {"shape", t.shape}});
  header["graph_nodes"] = c.graphs.a_hat_r.rows();
  const std::string text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kCheckpointMagic, 8);
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, t] : c.params) detail::write_doubles(out, t.data.data(), t.numel());
    for (const Matrix* m : {&c.graphs.a_hat_r, &c.graphs.a_hat_c})
      detail::write_doubles(out, m->data(), static_cast<std::size_t>(m->size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  if (len > (1ull << 30)) throw CheckpointError("checkpoint header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint header");

  Checkpoint c;
  try {
    const auto header = nlohmann::json::parse(text);
    header.at("config").get_to(c.cfg);
    header.at("scaler").get_to(c.scaler);
    header.at("node_ids").get_to(c.node_ids);
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& p : header.at("params"))
      c.params.emplace_back(p.at("name").get<std::string>(),
                            Tensor<double>(p.at("shape").get<Shape>()));
    const auto n = header.at("graph_nodes").get<Eigen::Index>();
    c.graphs.a_hat_r.resize(n, n);
    c.graphs.a_hat_c.resize(n, n);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  for (auto& [_, t] : c.params) detail::read_doubles(in, t.data.data(), t.numel());
  for (Matrix* m : {&c.graphs.a_hat_r, &c.graphs.a_hat_c})
    detail::read_doubles(in, m->data(), static_cast<std::size_t>(m->size()));
  return c;
}

inline void require_matching_ids(const Dataset& ds, const Checkpoint& c) {
  if (c.node_ids != ds.network.node_ids())
    throw std::invalid_argument("checkpoint node ids do not match the dataset network");
}

/// Windows and splits from `ds`; scaler and graphs from the checkpoint.
inline PreparedData prepare_for_checkpoint(const Dataset& ds, const Checkpoint& c) {
  require_matching_ids(ds, c);
  PreparedData p = prepare_data(ds, c.cfg);
  p.scaler = c.scaler;
  p.normalized = p.scaler.normalize(ds.panel.values);
  p.graphs = c.graphs;
  return p;
}

}  // namespace tgpt
