#pragma once
// Text-to-demand extraction and the suggestion engine (routes, congestion alerts).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgpt/data.hpp"
#include "tgpt/prompts_resource.hpp"

namespace tgpt::agents {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Demand

enum class Task { short_term, long_term, unseen_estimate, route, alert };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::short_term: return "short_term";
    case Task::long_term: return "long_term";
    case Task::unseen_estimate: return "unseen_estimate";
    case Task::route: return "route";
    case Task::alert: return "alert";
  }
  return "?";
}

inline std::optional<Task> task_from_string(std::string_view s) {
  for (Task t : {Task::short_term, Task::long_term, Task::unseen_estimate, Task::route, Task::alert})
    if (s == to_string(t)) return t;
  return std::nullopt;
}

/// Version tag carried by every structured demand, from the LLM or the fallback.
inline constexpr const char* kDemandSchema = "tgpt.demand/1";
inline constexpr int kMaxHorizonMinutes = 30 * 1440;

struct DemandSpec {
  Task task = Task::short_term;
  std::vector<std::string> target_roads;
  int horizon_minutes = 60;
  std::optional<std::string> origin;
  std::optional<std::string> destination;
  std::vector<std::string> connections;
  std::string free_text;
  std::string source = "fallback";

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const {
    if (horizon_minutes <= 0) throw std::invalid_argument("horizon must be positive");
    if (horizon_minutes > kMaxHorizonMinutes) throw std::invalid_argument("horizon too long");
    switch (task) {
      case Task::route:
        if (!origin || !destination) throw std::invalid_argument("route needs origin and destination");
        if (*origin == *destination) throw std::invalid_argument("origin equals destination");
        break;
      case Task::unseen_estimate:
        if (connections.empty()) throw std::invalid_argument("unseen estimate needs connections");
        break;
      default:
        if (target_roads.empty()) throw std::invalid_argument("no target road");
    }
  }
};

struct DemandError {
  std::string code;
  std::string message;
  std::string clarification;
};

struct ParseResult {
  std::optional<DemandSpec> demand;
  std::optional<DemandError> error;

  bool ok() const { return demand.has_value(); }

  static ParseResult fail(std::string code, std::string message, std::string clarification) {
    ParseResult r;
    r.error = DemandError{std::move(code), std::move(message), std::move(clarification)};
    return r;
  }
};

inline void to_json(json& j, const DemandSpec& d) {
  j = json{{"schema", kDemandSchema},
           {"task", to_string(d.task)},
           {"target_roads", d.target_roads},
           {"horizon_minutes", d.horizon_minutes},
           {"origin", d.origin ? json(*d.origin) : json(nullptr)},
           {"destination", d.destination ? json(*d.destination) : json(nullptr)},
           {"connections", d.connections},
           {"free_text", d.free_text},
           {"source", d.source}};
}

inline void to_json(json& j, const DemandError& e) {
  j = json{{"schema", kDemandSchema},
           {"error", e.code},
           {"message", e.message},
           {"clarification", e.clarification}};
}

inline void to_json(json& j, const ParseResult& r) {
  if (r.demand)
    j = *r.demand;
  else if (r.error)
    j = *r.error;
  else
    j = nullptr;
}

/// "Road 053", "road 53", 53 and "53" all become "53".
inline std::string normalize_road_id(const json& v) {
  std::string s;
  if (v.is_number_integer())
    s = std::to_string(v.get<long long>());
  else if (v.is_string())
    s = v.get<std::string>();
  else
    throw std::invalid_argument("road id must be a string or integer");
  auto trim = [](std::string& x) {
    while (!x.empty() && std::isspace(static_cast<unsigned char>(x.front()))) x.erase(x.begin());
    while (!x.empty() && std::isspace(static_cast<unsigned char>(x.back()))) x.pop_back();
  };
  trim(s);
  if (s.size() > 4) {
    std::string head = s.substr(0, 4);
    for (auto& c : head) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (head == "road") {
      s.erase(0, 4);
      trim(s);
    }
  }
  if (s.empty()) throw std::invalid_argument("empty road id");
  if (std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    const auto nz = s.find_first_not_of('0');
    s = nz == std::string::npos ? "0" : s.substr(nz);
  }
  return s;
}

/// Reads a structured demand. A declared `error` object yields an error result;
/// anything malformed or violating an invariant throws std::invalid_argument.
inline ParseResult demand_from_json(const json& j) {
  try {
    if (!j.is_object()) throw std::invalid_argument("demand must be a JSON object");
    if (j.value("schema", std::string()) != kDemandSchema)
      throw std::invalid_argument(std::string("schema must be ") + kDemandSchema);
    if (j.contains("error")) {
      return ParseResult::fail(j.at("error").is_string() ? j.at("error").get<std::string>() : "unparseable",
                               j.value("message", std::string("request not understood")),
                               j.value("clarification", std::string("Could you rephrase your request?")));
    }
    DemandSpec d;
    auto task = task_from_string(j.at("task").get<std::string>());
    if (!task) throw std::invalid_argument("unknown task '" + j.at("task").get<std::string>() + "'");
    d.task = *task;
    auto roads = [](const json& arr) {
      std::vector<std::string> out;
      if (arr.is_null()) return out;
      if (!arr.is_array()) throw std::invalid_argument("road lists must be arrays");
      for (const auto& v : arr) out.push_back(normalize_road_id(v));
      return out;
    };
    d.target_roads = roads(j.value("target_roads", json::array()));
    d.connections = roads(j.value("connections", json::array()));
    const json& h = j.at("horizon_minutes");
    if (!h.is_number()) throw std::invalid_argument("horizon_minutes must be a number");
    const double hv = h.get<double>();
    if (!(hv >= 1 && hv <= kMaxHorizonMinutes)) throw std::invalid_argument("horizon out of range");
    d.horizon_minutes = static_cast<int>(std::lround(hv));
    for (auto [key, field] : {std::pair{"origin", &d.origin}, std::pair{"destination", &d.destination}})
      if (j.contains(key) && !j.at(key).is_null()) *field = normalize_road_id(j.at(key));
    if (d.target_roads.empty() && d.task != Task::unseen_estimate) {
      if (d.destination) d.target_roads.push_back(*d.destination);
      if (d.origin && d.task == Task::route) d.target_roads.insert(d.target_roads.begin(), *d.origin);
    }
    d.free_text = j.value("free_text", std::string());
    d.validate();
    ParseResult r;
    r.demand = std::move(d);
    return r;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed demand: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Rule-based extraction

namespace detail {

struct Token {
  std::string text;
  bool number = false;
};

inline std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
  auto is_alpha = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); };
  while (i < s.size()) {
    if (is_digit(s[i])) {
      std::size_t j = i;
      while (j < s.size() && is_digit(s[j])) ++j;
      if (j + 1 < s.size() && s[j] == '.' && is_digit(s[j + 1])) {
        ++j;
        while (j < s.size() && is_digit(s[j])) ++j;
      }
      out.push_back({std::string(s.substr(i, j - i)), true});
      i = j;
    } else if (is_alpha(s[i])) {
      std::size_t j = i;
      std::string w;
      while (j < s.size() && is_alpha(s[j]))
        w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[j++]))));
      out.push_back({std::move(w), false});
      i = j;
    } else {
      ++i;
    }
  }
  return out;
}

inline std::optional<double> word_number(const std::string& w) {
  static const std::map<std::string, double> words = {
      {"zero", 0},     {"one", 1},        {"two", 2},       {"three", 3},     {"four", 4},
      {"five", 5},     {"six", 6},        {"seven", 7},     {"eight", 8},     {"nine", 9},
      {"ten", 10},     {"eleven", 11},    {"twelve", 12},   {"thirteen", 13}, {"fourteen", 14},
      {"fifteen", 15}, {"sixteen", 16},   {"seventeen", 17}, {"eighteen", 18}, {"nineteen", 19},
      {"twenty", 20},  {"thirty", 30},    {"forty", 40},    {"fifty", 50},    {"sixty", 60},
      {"seventy", 70}, {"eighty", 80},    {"ninety", 90},   {"a", 1},         {"an", 1}};
  auto it = words.find(w);
  if (it == words.end()) return std::nullopt;
  return it->second;
}

/// Number starting at token i: digits, number words ("twenty five"), "half an",
/// optionally followed by "and a half". Returns value and tokens consumed.
inline std::optional<std::pair<double, std::size_t>> parse_number(const std::vector<Token>& t,
                                                                  std::size_t i) {
  if (i >= t.size()) return std::nullopt;
  double v = 0;
  std::size_t used = 0;
  if (t[i].number) {
    if (t[i].text.size() > 12) return std::nullopt;
    v = std::strtod(t[i].text.c_str(), nullptr);
    used = 1;
  } else if (t[i].text == "half" && i + 1 < t.size() && (t[i + 1].text == "a" || t[i + 1].text == "an")) {
    return std::pair{0.5, std::size_t{2}};
  } else if (auto w = word_number(t[i].text)) {
    v = *w;
    used = 1;
    if (v >= 20 && std::fmod(v, 10.0) == 0 && i + 1 < t.size())
      if (auto u = word_number(t[i + 1].text); u && *u >= 1 && *u <= 9 && t[i + 1].text != "a" &&
                                               t[i + 1].text != "an") {
        v += *u;
        used = 2;
      }
  } else {
    return std::nullopt;
  }
  if (i + used + 2 < t.size() && t[i + used].text == "and" && t[i + used + 1].text == "a" &&
      t[i + used + 2].text == "half") {
    v += 0.5;
    used += 3;
  }
  return std::pair{v, used};
}

inline std::optional<double> unit_minutes(const std::string& w) {
  if (w == "minute" || w == "minutes" || w == "min" || w == "mins") return 1.0;
  if (w == "hour" || w == "hours" || w == "hr" || w == "hrs" || w == "h") return 60.0;
  if (w == "day" || w == "days") return 1440.0;
  if (w == "week" || w == "weeks") return 10080.0;
  return std::nullopt;
}

inline bool has_any(const std::vector<Token>& t, std::initializer_list<std::string_view> words) {
  for (const auto& tok : t)
    for (auto w : words)
      if (tok.text == w) return true;
  return false;
}

inline bool has_pair(const std::vector<Token>& t, std::string_view a, std::string_view b) {
  for (std::size_t i = 0; i + 1 < t.size(); ++i)
    if (t[i].text == a && t[i + 1].text == b) return true;
  return false;
}

/// A building verb with a road-like noun within the next three tokens.
inline bool mentions_new_road(const std::vector<Token>& t) {
  static const std::vector<std::string_view> verbs = {"add",   "adding",       "build",    "building",
                                                      "new",   "construct",    "constructing",
                                                      "open",  "opening",      "proposed", "propose"};
  static const std::vector<std::string_view> nouns = {"road", "link", "street", "connection", "lane",
                                                      "bridge"};
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (std::find(verbs.begin(), verbs.end(), t[i].text) == verbs.end()) continue;
    for (std::size_t k = i + 1; k < std::min(t.size(), i + 4); ++k)
      if (std::find(nouns.begin(), nouns.end(), t[k].text) != nouns.end()) return true;
  }
  return has_any(t, {"unseen", "construction"});
}

struct RoadMention {
  std::string id;
  std::string role;  // "origin", "destination" or ""
};

inline std::vector<RoadMention> road_mentions(const std::vector<Token>& t) {
  std::vector<RoadMention> out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto& w = t[i].text;
    if (w != "road" && w != "roads" && w != "rd") continue;
    std::size_t k = i + 1;
    if (k < t.size() && (t[k].text == "no" || t[k].text == "number")) ++k;
    if (k >= t.size() || !t[k].number || t[k].text.find('.') != std::string::npos) continue;
    std::string role;
    if (i > 0) {
      const auto& p = t[i - 1].text;
      if (p == "from") role = "origin";
      if (p == "to" || p == "towards" || p == "toward" || p == "into" || p == "reach" || p == "reaching")
        role = "destination";
    }
    out.push_back({normalize_road_id(json(t[k].text)), role});
    // "roads 3 and 7"
    while (w == "roads" && k + 2 < t.size() && (t[k + 1].text == "and" || t[k + 1].text == "or") &&
           t[k + 2].number && t[k + 2].text.find('.') == std::string::npos) {
      k += 2;
      out.push_back({normalize_road_id(json(t[k].text)), ""});
    }
    i = k;
  }
  return out;
}

inline void push_unique(std::vector<std::string>& v, const std::string& s) {
  if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
}

}  // namespace detail

/// Default horizons when the text names none.
inline int default_horizon(Task t) {
  switch (t) {
    case Task::long_term:
    case Task::unseen_estimate: return 1440;
    default: return 60;
  }
}

/// Rule-based extraction. Total: every input yields a demand or a structured error.
inline ParseResult parse_demand_rules(std::string_view text) {
  using namespace detail;
  const auto toks = tokenize(text);
  if (toks.empty())
    return ParseResult::fail("empty", "empty request",
                             "What would you like to know? For example: \"How busy will Road 12 be in "
                             "the next 30 minutes?\"");

  // first duration in the text
  std::optional<double> minutes;
  for (std::size_t i = 0; i < toks.size() && !minutes; ++i) {
    auto n = parse_number(toks, i);
    if (!n) continue;
    const std::size_t u = i + n->second;
    if (u < toks.size())
      if (auto m = unit_minutes(toks[u].text)) {
        double v = n->first;
        // "an hour and a half"
        if (u + 3 < toks.size() && toks[u + 1].text == "and" && toks[u + 2].text == "a" &&
            toks[u + 3].text == "half")
          v += 0.5;
        minutes = v * *m;
      }
  }
  if (minutes && (!(*minutes >= 0.5) || *minutes > kMaxHorizonMinutes))
    return ParseResult::fail("bad_horizon", "time horizon out of range",
                             "How far ahead should I look? Anything from one minute to 30 days works, "
                             "for example \"in the next 30 minutes\".");

  const auto roads = road_mentions(toks);
  DemandSpec d;
  d.free_text = std::string(text);
  for (const auto& r : roads) {
    if (r.role == "origin" && !d.origin) d.origin = r.id;
    if (r.role == "destination" && !d.destination) d.destination = r.id;
  }

  const bool routeish = has_any(toks, {"route", "routes", "path", "fastest", "quickest", "shortest",
                                       "navigate", "directions", "way"});
  if (mentions_new_road(toks)) {
    d.task = Task::unseen_estimate;
    d.origin.reset();
    d.destination.reset();
    for (const auto& r : roads) push_unique(d.connections, r.id);
    if (d.connections.empty())
      return ParseResult::fail("no_road", "no existing road named for the new connection",
                               "Which existing roads would the new road connect to? For example: "
                               "\"a road between Road 3 and Road 7\".");
  } else {
    if (roads.empty())
      return ParseResult::fail("no_road", "no road mentioned",
                               "Which road do you mean? Please name it as \"Road <number>\".");
    if (has_any(toks, {"congestion", "congested", "alert", "alerts", "jam", "jams", "warn", "warning",
                       "crowded", "busy"}) ||
        has_pair(toks, "rush", "hour") || has_pair(toks, "peak", "hour") || has_pair(toks, "peak", "hours"))
      d.task = Task::alert;
    else if ((d.origin && d.destination) || routeish)
      d.task = Task::route;
    else if (has_pair(toks, "long", "term") || has_any(toks, {"tomorrow", "week", "weekly", "days", "longterm"}) ||
             (minutes && *minutes >= 1440))
      d.task = Task::long_term;
    else
      d.task = Task::short_term;

    if (d.task == Task::route) {
      if (!d.destination && roads.size() >= 2 && !d.origin) {
        d.origin = roads[0].id;
        d.destination = roads[1].id;
      }
      if (!d.origin)
        return ParseResult::fail("missing_origin", "route requested without a starting road",
                                 "Where are you starting from? For example: \"from Road 4 to Road 53\".");
      if (!d.destination)
        return ParseResult::fail("missing_destination", "route requested without a destination",
                                 "Where do you want to go? For example: \"from Road 4 to Road 53\".");
      if (*d.origin == *d.destination)
        return ParseResult::fail("same_endpoints", "start and destination are the same road",
                                 "Your start and destination are the same road. Where do you want to go?");
      d.target_roads = {*d.origin, *d.destination};
    } else {
      if (d.destination) push_unique(d.target_roads, *d.destination);
      for (const auto& r : roads) push_unique(d.target_roads, r.id);
    }
  }
  d.horizon_minutes = minutes ? static_cast<int>(std::lround(*minutes)) : default_horizon(d.task);
  d.validate();
  ParseResult r;
  r.demand = std::move(d);
  return r;
}

// ---------------------------------------------------------------------------
// LLM access

struct ChatMessage {
  std::string role;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

inline void to_json(json& j, const ChatMessage& m) { j = json{{"role", m.role}, {"content", m.content}}; }
inline void from_json(const json& j, ChatMessage& m) {
  j.at("role").get_to(m.role);
  j.at("content").get_to(m.content);
}

class LlmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  /// Returns the assistant reply text; throws LlmError on transport failure.
  virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

struct Prompts {
  std::vector<ChatMessage> pre_prompts;
  std::string reply_format;

  static Prompts from_json(const json& j) {
    Prompts p;
    j.at("pre_prompts").get_to(p.pre_prompts);
    j.at("reply_format").get_to(p.reply_format);
    return p;
  }

  /// The compiled-in resources/prompts.json.
  static const Prompts& defaults() {
    static const Prompts p = from_json(json::parse(resource::kPromptsJson));
    return p;
  }

  /// Pre-prompts, the reply-format instruction, then the user's text.
  std::vector<ChatMessage> conversation(std::string_view user_text) const {
    auto msgs = pre_prompts;
    msgs.push_back({"system", reply_format});
    msgs.push_back({"user", std::string(user_text)});
    return msgs;
  }
};

/// Replays recorded replies keyed by the final user message. Records every call.
class ReplayLlmClient : public LlmClient {
 public:
  ReplayLlmClient() = default;
  explicit ReplayLlmClient(std::map<std::string, std::string> replies) : replies_(std::move(replies)) {}
  ReplayLlmClient(ReplayLlmClient&& o) noexcept : replies_(std::move(o.replies_)), calls_(std::move(o.calls_)) {}

  /// {"recordings": [{"user": "...", "reply": "..."}]}
  static ReplayLlmClient from_json(const json& j) {
    std::map<std::string, std::string> m;
    for (const auto& r : j.at("recordings")) m[r.at("user").get<std::string>()] = r.at("reply").get<std::string>();
    return ReplayLlmClient(std::move(m));
  }

  void record(std::string user, std::string reply) {
    std::lock_guard lk(mu_);
    replies_[std::move(user)] = std::move(reply);
  }

  std::string complete(const std::vector<ChatMessage>& messages) override {
    std::lock_guard lk(mu_);
    calls_.push_back(messages);
    if (messages.empty() || messages.back().role != "user") throw LlmError("no user message");
    auto it = replies_.find(messages.back().content);
    if (it == replies_.end()) throw LlmError("no recording for: " + messages.back().content);
    return it->second;
  }

  std::vector<std::vector<ChatMessage>> calls() const {
    std::lock_guard lk(mu_);
    return calls_;
  }

 private:
  std::map<std::string, std::string> replies_;
  std::vector<std::vector<ChatMessage>> calls_;
  mutable std::mutex mu_;
};

/// First balanced {...} object in an LLM reply, tolerating prose or code fences.
inline std::optional<json> extract_json_object(std::string_view reply) {
  const auto open = reply.find('{');
  if (open == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_str = false, esc = false;
  for (std::size_t i = open; i < reply.size(); ++i) {
    const char c = reply[i];
    if (in_str) {
      if (esc) esc = false;
      else if (c == '\\') esc = true;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) {
      auto j = json::parse(reply.substr(open, i - open + 1), nullptr, false);
      if (j.is_discarded()) return std::nullopt;
      return j;
    }
  }
  return std::nullopt;
}

/// LLM extraction when a client is given, rule-based otherwise. A failing call
/// or an off-schema reply falls back to the rules; an error the LLM declares is
/// returned as is.
inline ParseResult parse_demand(std::string_view text, LlmClient* llm = nullptr,
                                const Prompts& prompts = Prompts::defaults()) {
  const bool blank = std::all_of(text.begin(), text.end(),
                                 [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
  if (blank || !llm) return parse_demand_rules(text);
  try {
    const std::string reply = llm->complete(prompts.conversation(text));
    if (auto j = extract_json_object(reply)) {
      auto r = demand_from_json(*j);
      if (r.demand) {
        r.demand->free_text = std::string(text);
        r.demand->source = "llm";
      }
      return r;
    }
  } catch (const LlmError&) {
  } catch (const std::invalid_argument&) {
  }
  return parse_demand_rules(text);
}

// ---------------------------------------------------------------------------
// Suggestions

enum class SuggestionKind { route, alert, estimate_summary };

inline const char* to_string(SuggestionKind k) {
  switch (k) {
    case SuggestionKind::route: return "route";
    case SuggestionKind::alert: return "alert";
    case SuggestionKind::estimate_summary: return "estimate_summary";
  }
  return "?";
}

struct RouteSuggestion {
  std::vector<std::string> path;
  std::vector<double> step_minutes;  // per entered road
  double total_minutes = 0;
  std::size_t departure_step = 0;
};

struct AlertWindow {
  std::string road;
  std::size_t begin = 0, end = 0;  // [begin, end) in prediction steps
  double severity = 0;             // peak relative exceedance
  double peak = 0;
  bool operator==(const AlertWindow&) const = default;
};

struct AlertSuggestion {
  std::vector<AlertWindow> windows;
};

struct EstimateSummary {
  std::string road;
  std::vector<std::string> similar_roads;
  double mean = 0, peak = 0;
  std::size_t peak_step = 0, length = 0;
};

struct Suggestion {
  SuggestionKind kind;
  std::variant<RouteSuggestion, AlertSuggestion, EstimateSummary> payload;
};

inline void to_json(json& j, const RouteSuggestion& r) {
  j = json{{"path", r.path},
           {"step_minutes", r.step_minutes},
           {"total_minutes", r.total_minutes},
           {"departure_step", r.departure_step}};
}
inline void to_json(json& j, const AlertWindow& w) {
  j = json{{"road", w.road}, {"begin", w.begin}, {"end", w.end}, {"severity", w.severity}, {"peak", w.peak}};
}
inline void to_json(json& j, const AlertSuggestion& a) { j = json{{"windows", a.windows}}; }
inline void to_json(json& j, const EstimateSummary& e) {
  j = json{{"road", e.road},   {"similar_roads", e.similar_roads}, {"mean", e.mean},
           {"peak", e.peak},   {"peak_step", e.peak_step},         {"length", e.length}};
}
inline void to_json(json& j, const Suggestion& s) {
  j = json{{"kind", to_string(s.kind)}};
  std::visit([&](const auto& p) { j["payload"] = p; }, s.payload);
}

class RouteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adjacency lists; undirected networks get both directions.
inline std::vector<std::vector<std::size_t>> adjacency(const RoadNetwork& net) {
  std::vector<std::vector<std::size_t>> adj(net.size());
  for (const auto& e : net.edges()) {
    adj[e.src].push_back(e.dst);
    if (!net.directed()) adj[e.dst].push_back(e.src);
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return adj;
}

/// Dijkstra over roads. Entering road v costs travel_minutes(v, departure_step).
/// Equal costs prefer fewer hops, then the lexicographically smaller index path.
inline RouteSuggestion plan_route(const RoadNetwork& net, const Matrix& travel_minutes,
                                  const std::string& origin, const std::string& destination,
                                  std::size_t departure_step = 0) {
  const std::size_t n = net.size();
  if (static_cast<std::size_t>(travel_minutes.rows()) != n)
    throw std::invalid_argument("travel time rows must match the network");
  if (departure_step >= static_cast<std::size_t>(travel_minutes.cols()))
    throw std::invalid_argument("departure step beyond the predictions");
  const std::size_t src = net.require_index(origin), dst = net.require_index(destination);
  for (std::size_t v = 0; v < n; ++v) {
    const double c = travel_minutes(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(departure_step));
    if (!(c >= 0) || !std::isfinite(c)) throw std::invalid_argument("travel times must be finite and >= 0");
  }
  const auto adj = adjacency(net);

  struct Label {
    double cost = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> path;
  };
  auto better = [](const Label& a, const Label& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.path.size() != b.path.size()) return a.path.size() < b.path.size();
    return a.path < b.path;
  };
  std::vector<Label> best(n);
  std::vector<bool> done(n, false);
  best[src] = {0.0, {src}};
  for (;;) {
    std::size_t u = n;
    for (std::size_t v = 0; v < n; ++v)
      if (!done[v] && !best[v].path.empty() && (u == n || better(best[v], best[u]))) u = v;
    if (u == n || u == dst) break;
    done[u] = true;
    for (auto v : adj[u]) {
      if (done[v]) continue;
      Label cand{best[u].cost + travel_minutes(static_cast<Eigen::Index>(v),
                                               static_cast<Eigen::Index>(departure_step)),
                 best[u].path};
      cand.path.push_back(v);
      if (best[v].path.empty() || better(cand, best[v])) best[v] = std::move(cand);
    }
  }
  if (best[dst].path.empty())
    throw RouteError("road '" + destination + "' is unreachable from road '" + origin + "'");
  RouteSuggestion r;
  r.departure_step = departure_step;
  r.total_minutes = best[dst].cost;
  for (std::size_t k = 0; k < best[dst].path.size(); ++k) {
    const auto v = best[dst].path[k];
    r.path.push_back(net.node_ids()[v]);
    if (k > 0)
      r.step_minutes.push_back(
          travel_minutes(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(departure_step)));
  }
  return r;
}

/// Per-road length: mean distance of incident edges, 1 km for isolated roads.
inline std::vector<double> road_lengths_km(const RoadNetwork& net) {
  std::vector<double> sum(net.size(), 0.0), cnt(net.size(), 0.0);
  for (const auto& e : net.edges()) {
    sum[e.src] += e.distance;
    sum[e.dst] += e.distance;
    cnt[e.src] += 1;
    cnt[e.dst] += 1;
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = cnt[i] > 0 ? sum[i] / cnt[i] : 1.0;
  return sum;
}

/// Travel minutes from predicted values. Speed panels use length / speed;
/// flow and other panels use a BPR curve against a per-road capacity.
struct TravelTimeModel {
  double free_speed_kmh = 60.0;
  double min_speed_kmh = 1.0;
  double bpr_alpha = 0.15;
  double bpr_beta = 4.0;

  Matrix operator()(const Matrix& predicted, const std::string& units, const std::vector<double>& length_km,
                    const std::vector<double>& capacity) const {
    const auto n = static_cast<std::size_t>(predicted.rows());
    if (length_km.size() != n) throw std::invalid_argument("one length per road required");
    const bool speed = units == "speed";
    if (!speed && capacity.size() != n) throw std::invalid_argument("one capacity per road required");
    Matrix out(predicted.rows(), predicted.cols());
    for (Eigen::Index i = 0; i < predicted.rows(); ++i) {
      const double len = length_km[static_cast<std::size_t>(i)];
      const double free_min = 60.0 * len / free_speed_kmh;
      for (Eigen::Index k = 0; k < predicted.cols(); ++k) {
        const double x = predicted(i, k);
        if (speed) {
          out(i, k) = 60.0 * len / std::max(x, min_speed_kmh);
        } else {
          const double cap = std::max(capacity[static_cast<std::size_t>(i)], 1e-9);
          const double ratio = std::max(x, 0.0) / cap;
          out(i, k) = free_min * (1.0 + bpr_alpha * std::pow(ratio, bpr_beta));
        }
      }
    }
    return out;
  }
};

/// Linear-interpolated percentile, p in [0, 1].
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("percentile of empty data");
  if (!(p >= 0 && p <= 1)) throw std::invalid_argument("percentile must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Per-road percentile of the given (training) columns.
inline std::vector<double> percentile_thresholds(const Matrix& train, double p = 0.85) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < train.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(train.cols()));
    for (Eigen::Index k = 0; k < train.cols(); ++k) row[static_cast<std::size_t>(k)] = train(i, k);
    out.push_back(percentile(std::move(row), p));
  }
  return out;
}

enum class AlertDirection { above, below };

/// Maximal runs of steps beyond the threshold, per road. Severity is the peak
/// relative exceedance |x - thr| / |thr| (absolute when thr is 0).
inline AlertSuggestion congestion_alert(const Matrix& predicted, const std::vector<double>& thresholds,
                                        const std::vector<std::string>& roads,
                                        AlertDirection dir = AlertDirection::above) {
  const auto n = static_cast<std::size_t>(predicted.rows());
  if (thresholds.size() != n || roads.size() != n)
    throw std::invalid_argument("one threshold and one road id per predicted row required");
  AlertSuggestion out;
  for (std::size_t i = 0; i < n; ++i) {
    const double thr = thresholds[i];
    const double scale = thr != 0 ? std::abs(thr) : 1.0;
    std::optional<AlertWindow> open;
    for (Eigen::Index k = 0; k <= predicted.cols(); ++k) {
      bool hit = false;
      double x = 0;
      if (k < predicted.cols()) {
        x = predicted(static_cast<Eigen::Index>(i), k);
        hit = dir == AlertDirection::above ? x > thr : x < thr;
      }
      if (hit) {
        const double sev = std::abs(x - thr) / scale;
        if (!open) open = AlertWindow{roads[i], static_cast<std::size_t>(k), 0, sev, x};
        if (sev > open->severity) {
          open->severity = sev;
          open->peak = x;
        }
      } else if (open) {
        open->end = static_cast<std::size_t>(k);
        out.windows.push_back(*open);
        open.reset();
      }
    }
  }
  return out;
}

inline EstimateSummary summarize_estimate(std::string road, std::vector<std::string> similar,
                                          const std::vector<double>& series) {
  EstimateSummary s;
  s.road = std::move(road);
  s.similar_roads = std::move(similar);
  s.length = series.size();
  if (series.empty()) return s;
  const auto it = std::max_element(series.begin(), series.end());
  s.peak = *it;
  s.peak_step = static_cast<std::size_t>(it - series.begin());
  double sum = 0;
  for (double v : series) sum += v;
  s.mean = sum / static_cast<double>(series.size());
  return s;
}

}  // namespace tgpt::agents
