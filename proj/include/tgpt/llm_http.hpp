#pragma once
// OpenAI-compatible chat-completions client over cpp-httplib.

#include <cstdlib>
#include <optional>
#include <string>
#include <utility>

#include "tgpt/agents.hpp"

// after Eigen: <resolv.h> defines a `_res` macro
#include <httplib.h>

namespace tgpt::agents {

struct OpenAiConfig {
  std::string endpoint;  // base URL, e.g. https://api.openai.com/v1
  std::string api_key;
  std::string model = "gpt-3.5-turbo";
  int timeout_seconds = 30;

  /// TGPT_LLM_ENDPOINT (required), TGPT_LLM_API_KEY, TGPT_LLM_MODEL.
  static std::optional<OpenAiConfig> from_env() {
    const char* ep = std::getenv("TGPT_LLM_ENDPOINT");
    if (!ep || !*ep) return std::nullopt;
    OpenAiConfig c;
    c.endpoint = ep;
    if (const char* k = std::getenv("TGPT_LLM_API_KEY")) c.api_key = k;
    if (const char* m = std::getenv("TGPT_LLM_MODEL"); m && *m) c.model = m;
    return c;
  }
};

/// Splits "scheme://host[:port]/prefix" into the httplib origin and the path prefix.
inline std::pair<std::string, std::string> split_base_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("endpoint needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  std::string origin = slash == std::string::npos ? url : url.substr(0, slash);
  std::string prefix = slash == std::string::npos ? "" : url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {origin, prefix};
}

class OpenAiClient : public LlmClient {
 public:
  explicit OpenAiClient(OpenAiConfig cfg) : cfg_(std::move(cfg)) {
    std::tie(origin_, prefix_) = split_base_url(cfg_.endpoint);
  }

  std::string complete(const std::vector<ChatMessage>& messages) override {
    httplib::Client cli(origin_);
    if (!cli.is_valid()) throw LlmError("unsupported endpoint: " + cfg_.endpoint);
    cli.set_connection_timeout(cfg_.timeout_seconds);
    cli.set_read_timeout(cfg_.timeout_seconds);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    const json body{{"model", cfg_.model}, {"messages", messages}, {"temperature", 0}};
    auto res = cli.Post(prefix_ + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) throw LlmError("LLM request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw LlmError("LLM returned HTTP " + std::to_string(res->status));
    auto j = json::parse(res->body, nullptr, false);
    if (j.is_discarded()) throw LlmError("LLM reply is not JSON");
    try {
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw LlmError(std::string("unexpected LLM reply: ") + e.what());
    }
  }

  const OpenAiConfig& config() const { return cfg_; }

 private:
  OpenAiConfig cfg_;
  std::string origin_, prefix_;
};

}  // namespace tgpt::agents
