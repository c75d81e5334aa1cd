#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace tgpt {

/// Hyperparameters of the forecasting network and its input windows.
struct ModelConfig {
  std::size_t n_nodes = 0;
  std::size_t t_r = 12;  // recent window (30 for 2-minute data)
  std::size_t t_d = 3;   // daily-periodic window
  std::size_t t_w = 3;   // weekly-periodic window
  std::size_t horizon = 12;
  std::size_t embed = 64;
  std::size_t n_blocks = 2;
  std::size_t heads_fusion_rd = 4;
  std::size_t heads_fusion_rw = 4;
  std::size_t heads_spatial = 16;
  std::size_t heads_temporal = 16;
  std::size_t q = 288;  // samples per day
  double learning_rate = 1e-3;
  std::size_t ffn_mult = 4;  // transformer feed-forward width = ffn_mult * embed
  double graph_bias_eps = 1e-6;

  /// History needed before the first predicted step.
  std::size_t required_history() const {
    std::size_t h = t_r;
    h = std::max(h, t_d * q);
    h = std::max(h, 7 * t_w * q);
    return h;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (n_nodes == 0) fail("n_nodes must be positive");
    if (t_r == 0) fail("t_r must be positive");
    if (horizon == 0) fail("horizon must be positive");
    if (n_blocks == 0) fail("n_blocks must be >= 1");
    if (q == 0) fail("q must be positive");
    if (embed == 0) fail("embed must be positive");
    for (std::size_t h : {heads_fusion_rd, heads_fusion_rw, heads_spatial, heads_temporal})
      if (h == 0 || embed % h != 0)
        fail("embed size " + std::to_string(embed) + " not divisible by head count " +
             std::to_string(h));
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_nodes", c.n_nodes},
                     {"t_r", c.t_r},
                     {"t_d", c.t_d},
                     {"t_w", c.t_w},
                     {"horizon", c.horizon},
                     {"embed", c.embed},
                     {"n_blocks", c.n_blocks},
                     {"heads_fusion_rd", c.heads_fusion_rd},
                     {"heads_fusion_rw", c.heads_fusion_rw},
                     {"heads_spatial", c.heads_spatial},
                     {"heads_temporal", c.heads_temporal},
                     {"q", c.q},
                     {"learning_rate", c.learning_rate},
                     {"ffn_mult", c.ffn_mult},
                     {"graph_bias_eps", c.graph_bias_eps}};
}

// Missing keys keep their defaults so partial config files work.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) j.at(k).get_to(field);
  };
  get("n_nodes", c.n_nodes);
  get("t_r", c.t_r);
  get("t_d", c.t_d);
  get("t_w", c.t_w);
  get("horizon", c.horizon);
  get("embed", c.embed);
  get("n_blocks", c.n_blocks);
  get("heads_fusion_rd", c.heads_fusion_rd);
  get("heads_fusion_rw", c.heads_fusion_rw);
  get("heads_spatial", c.heads_spatial);
  get("heads_temporal", c.heads_temporal);
  get("q", c.q);
  get("learning_rate", c.learning_rate);
  get("ffn_mult", c.ffn_mult);
  get("graph_bias_eps", c.graph_bias_eps);
}

}  // namespace tgpt
