#pragma once
// HTTP facade: demand parsing, forecasts, unseen-road estimates and suggestions.

#include <chrono>
#include <cmath>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "tgpt/agents.hpp"
#include "tgpt/checkpoint.hpp"
#include "tgpt/longterm.hpp"
#include "tgpt/unseen.hpp"

// after Eigen: <resolv.h> defines a `_res` macro
#include <httplib.h>

namespace tgpt::service {

using nlohmann::json;

struct ServiceOptions {
  std::optional<std::size_t> now_step;  // first forecast step; default: end of the panel
  double alert_percentile = 0.85;
  std::size_t max_long_days = 7;
  agents::TravelTimeModel travel;
  EstimateOptions estimate = [] {
    EstimateOptions e;
    e.train.epochs = 20;
    e.train.max_steps = 300;
    e.train.lr = 3e-3;
    e.train.cosine_decay = true;
    e.train.patience = 0;
    e.train.seed = 1;
    return e;
  }();
  std::string cors_origin = "*";
  std::size_t threads = 16;
  std::function<void(const std::string&)> log = [](const std::string& line) {
    static std::mutex mu;
    std::lock_guard lk(mu);
    std::clog << line << '\n';
  };
};

/// What a running service needs; the long-term checkpoint and co-semantic
/// model are optional.
struct ServiceAssets {
  Dataset dataset;
  Checkpoint short_term;
  std::optional<Checkpoint> long_term;
  std::optional<CoSemanticModel> cosemantic;
};

struct Response {
  int status = 200;
  json body;
  std::map<std::string, std::string> headers;
};

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, std::string code, const std::string& message, json extra = json::object())
      : std::runtime_error(message), status(status), code(std::move(code)), extra(std::move(extra)) {}
  int status;
  std::string code;
  json extra;
};

/// Frozen models and data shared by concurrent requests. Forecasts and
/// estimates are memoized per state.
class ModelState {
 public:
  ModelState(ServiceAssets assets, const ServiceOptions& opt)
      : dataset_(std::move(assets.dataset)),
        data_(prepare_for_checkpoint(dataset_, assets.short_term)),
        short_(assets.short_term.model<float>()),
        cosem_(std::move(assets.cosemantic)) {
    if (assets.long_term) {
      require_matching_ids(dataset_, *assets.long_term);
      if (assets.long_term->cfg.horizon != data_.cfg.horizon || assets.long_term->cfg.t_r != data_.cfg.t_r ||
          assets.long_term->cfg.t_d != data_.cfg.t_d || assets.long_term->cfg.t_w != data_.cfg.t_w)
        throw std::invalid_argument("long-term checkpoint windows differ from the short-term one");
      long_.emplace(assets.long_term->model<float>());
    }
    now_ = opt.now_step.value_or(dataset_.panel.length());
    if (now_ > dataset_.panel.length() || now_ < data_.cfg.required_history())
      throw std::invalid_argument("now step must lie in [" + std::to_string(data_.cfg.required_history()) + ", " +
                                  std::to_string(dataset_.panel.length()) + "]");
    const Matrix train = dataset_.panel.values.leftCols(static_cast<Eigen::Index>(data_.split.train_end));
    speed_ = dataset_.panel.units == "speed";
    thresholds_ = agents::percentile_thresholds(train, speed_ ? 1.0 - opt.alert_percentile : opt.alert_percentile);
    for (Eigen::Index i = 0; i < train.rows(); ++i) capacity_.push_back(train.row(i).maxCoeff());
    lengths_ = agents::road_lengths_km(dataset_.network);
    std::vector<double> d;
    for (const auto& e : dataset_.network.edges()) d.push_back(e.distance);
    default_km_ = d.empty() ? 1.0 : agents::percentile(d, 0.5);
  }

  const Dataset& dataset() const { return dataset_; }
  const RoadNetwork& network() const { return dataset_.network; }
  const PreparedData& data() const { return data_; }
  std::size_t now() const { return now_; }
  bool has_long_model() const { return long_.has_value(); }
  bool has_cosemantic() const { return cosem_.has_value(); }
  const std::vector<double>& thresholds() const { return thresholds_; }
  agents::AlertDirection alert_direction() const {
    return speed_ ? agents::AlertDirection::below : agents::AlertDirection::above;
  }
  double default_connection_km() const { return default_km_; }

  /// All roads, `steps` forecast steps from now, original units.
  std::shared_ptr<const Matrix> forecast(std::size_t steps, bool long_term) const {
    const std::size_t h = data_.cfg.horizon;
    const std::size_t stages = (steps + h - 1) / h;
    const bool use_long = long_term && long_;
    auto full = memo(rollouts_, std::to_string(use_long) + ":" + std::to_string(stages), [&] {
      return std::make_shared<const Matrix>(
          autoregressive_rollout(use_long ? *long_ : short_, data_, now_, stages).values);
    });
    if (static_cast<std::size_t>(full->cols()) == steps) return full;
    return std::make_shared<const Matrix>(full->leftCols(static_cast<Eigen::Index>(steps)));
  }

  Matrix travel_minutes(const Matrix& predicted, const agents::TravelTimeModel& tm) const {
    return tm(predicted, dataset_.panel.units, lengths_, capacity_);
  }

  /// Memoized by the canonical JSON of the proposal.
  std::shared_ptr<const json> estimate(const ProposedNode& node, const EstimateOptions& opt) const {
    if (!cosem_) throw HttpError(503, "model_not_loaded", "no co-semantic model loaded");
    return memo(estimates_, json(node).dump(), [&] {
      auto est = estimate_unseen_road<float>(*cosem_, dataset_.network, data_, node, std::nullopt, opt);
      const std::size_t end = dataset_.panel.length();
      const std::size_t q = static_cast<std::size_t>(dataset_.panel.q);
      const std::size_t begin = end > q ? end - q : 0;
      auto series = est.series(begin, end);
      std::vector<std::string> similar;
      for (auto i : est.selected) similar.push_back(dataset_.network.node_ids()[i]);
      json out{{"id", node.id},
               {"similar_roads", similar},
               {"series", series},
               {"series_start_step", end - series.size()},
               {"pseudo_target", est.pseudo_target},
               {"summary", agents::summarize_estimate(node.id, similar, series)}};
      return std::make_shared<const json>(std::move(out));
    });
  }

 private:
  template <class V>
  using Memo = std::map<std::string, std::shared_future<std::shared_ptr<const V>>>;

  template <class V, class F>
  std::shared_ptr<const V> memo(Memo<V>& table, const std::string& key, F&& make) const {
    std::promise<std::shared_ptr<const V>> p;
    std::shared_future<std::shared_ptr<const V>> f;
    bool owner = false;
    {
      std::lock_guard lk(mu_);
      auto it = table.find(key);
      if (it == table.end()) {
        f = p.get_future().share();
        table.emplace(key, f);
        owner = true;
      } else {
        f = it->second;
      }
    }
    if (owner) {
      try {
        p.set_value(make());
      } catch (...) {
        {
          std::lock_guard lk(mu_);
          table.erase(key);
        }
        p.set_exception(std::current_exception());
      }
    }
    return f.get();
  }

  Dataset dataset_;
  PreparedData data_;
  DfmtModel<float> short_;
  std::optional<DfmtModel<float>> long_;
  std::optional<CoSemanticModel> cosem_;
  std::size_t now_ = 0;
  bool speed_ = false;
  std::vector<double> thresholds_, capacity_, lengths_;
  double default_km_ = 1.0;

  mutable std::mutex mu_;
  mutable Memo<Matrix> rollouts_;
  mutable Memo<json> estimates_;
};

using Params = std::map<std::string, std::string>;

class TrafficService {
 public:
  explicit TrafficService(ServiceOptions opt = {}, std::shared_ptr<agents::LlmClient> llm = nullptr)
      : opt_(std::move(opt)), llm_(std::move(llm)) {}

  /// Builds the new state first, then swaps it in; in-flight requests keep the old one.
  void load(ServiceAssets assets) {
    auto next = std::make_shared<const ModelState>(std::move(assets), opt_);
    std::lock_guard lk(mu_);
    state_ = std::move(next);
  }

  std::shared_ptr<const ModelState> state() const {
    std::lock_guard lk(mu_);
    return state_;
  }

  const ServiceOptions& options() const { return opt_; }

  Response handle(const std::string& method, const std::string& path, const Params& params,
                  const std::string& body) const {
    const auto t0 = std::chrono::steady_clock::now();
    Timings timings;
    Response r;
    try {
      if (method == "GET" && path == "/health")
        r.body = health();
      else if (method == "GET" && path == "/network")
        r.body = network(require_state());
      else if (method == "GET" && path == "/predict/short")
        r.body = predict_short(require_state(), params);
      else if (method == "GET" && path == "/predict/long")
        r.body = predict_long(require_state(), params);
      else if (method == "GET" && path == "/route")
        r.body = route(require_state(), params);
      else if (method == "POST" && path == "/estimate/unseen")
        r.body = estimate(require_state(), parse_body(body));
      else if (method == "POST" && path == "/query")
        r.body = query(parse_body(body), timings);
      else
        throw HttpError(404, "not_found", "no endpoint " + method + " " + path);
    } catch (const HttpError& e) {
      r.status = e.status;
      r.body = e.extra;
      r.body["error"] = e.code;
      r.body["message"] = e.what();
    } catch (const DataError& e) {
      r.status = 404;
      r.body = {{"error", "unknown_road"}, {"message", e.what()}};
    } catch (const std::invalid_argument& e) {
      r.status = 400;
      r.body = {{"error", "bad_request"}, {"message", e.what()}};
    } catch (const std::exception& e) {
      r.status = 500;
      r.body = {{"error", "internal"}, {"message", e.what()}};
    }
    const double total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream t;
    t.setf(std::ios::fixed);
    t.precision(2);
    for (const auto& [k, v] : timings) t << k << "=" << v << "ms ";
    t << "total=" << total << "ms";
    r.headers["X-Timing"] = t.str();
    if (opt_.log) opt_.log(method + " " + path + " " + std::to_string(r.status) + " " + t.str());
    return r;
  }

 private:
  using Timings = std::vector<std::pair<std::string, double>>;

  template <class F>
  static auto timed(Timings& t, const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = f();
    t.emplace_back(name, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    return out;
  }

  std::shared_ptr<const ModelState> require_state() const {
    auto s = state();
    if (!s) throw HttpError(503, "model_not_loaded", "no model loaded");
    return s;
  }

  static json parse_body(const std::string& body) {
    auto j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw HttpError(400, "bad_request", "body must be a JSON object");
    return j;
  }

  static std::size_t uint_param(const Params& p, const std::string& key, std::size_t fallback) {
    auto it = p.find(key);
    if (it == p.end()) return fallback;
    std::size_t v = 0;
    const auto& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw HttpError(400, "bad_request", "parameter '" + key + "' must be a non-negative integer");
    return v;
  }

  static std::size_t road_index(const ModelState& s, const std::string& id) {
    auto i = s.network().index_of(id);
    if (!i) throw HttpError(404, "unknown_road", "unknown road '" + id + "'", {{"road", id}});
    return *i;
  }

  static json series_json(const ModelState& s, const Matrix& m, const std::vector<std::size_t>& rows) {
    json out = json::object();
    for (auto i : rows) {
      const auto row = m.row(static_cast<Eigen::Index>(i));
      out[s.network().node_ids()[i]] = std::vector<double>(row.begin(), row.end());
    }
    return out;
  }

  static json frame(const ModelState& s, std::size_t steps) {
    const auto& p = s.dataset().panel;
    return {{"start_step", s.now()},
            {"start_minutes", p.start_minutes + static_cast<std::int64_t>(s.now()) * p.slice_minutes},
            {"slice_minutes", p.slice_minutes},
            {"steps", steps},
            {"units", p.units}};
  }

  static std::vector<std::size_t> all_rows(const ModelState& s) {
    std::vector<std::size_t> r(s.network().size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = i;
    return r;
  }

  json health() const {
    auto s = state();
    json j{{"status", s ? "ok" : "no_model"}, {"model_loaded", static_cast<bool>(s)}, {"llm", static_cast<bool>(llm_)}};
    if (s) {
      j["nodes"] = s->network().size();
      j["now_step"] = s->now();
      j["long_term_model"] = s->has_long_model();
      j["cosemantic_model"] = s->has_cosemantic();
    }
    return j;
  }

  static json network(const std::shared_ptr<const ModelState>& s) {
    const auto& net = s->network();
    json edges = json::array();
    for (const auto& e : net.edges())
      edges.push_back({{"from", net.node_ids()[e.src]}, {"to", net.node_ids()[e.dst]}, {"distance", e.distance}});
    json nodes = json::array();
    for (std::size_t i = 0; i < net.size(); ++i)
      nodes.push_back({{"id", net.node_ids()[i]}, {"threshold", s->thresholds()[i]}});
    return {{"nodes", nodes}, {"edges", edges}, {"directed", net.directed()},
            {"units", s->dataset().panel.units}};
  }

  static std::vector<std::size_t> roads_param(const ModelState& s, const Params& p) {
    auto it = p.find("road");
    if (it == p.end() || it->second.empty()) return all_rows(s);
    return {road_index(s, it->second)};
  }

  json predict_short(const std::shared_ptr<const ModelState>& s, const Params& p) const {
    const std::size_t h = s->data().cfg.horizon;
    const std::size_t steps = uint_param(p, "steps", h);
    if (steps == 0 || steps > h)
      throw HttpError(400, "bad_request", "steps must lie in [1, " + std::to_string(h) + "]");
    auto rows = roads_param(*s, p);
    auto m = s->forecast(steps, false);
    json j = frame(*s, steps);
    j["series"] = series_json(*s, *m, rows);
    return j;
  }

  json predict_long(const std::shared_ptr<const ModelState>& s, const Params& p) const {
    const std::size_t days = uint_param(p, "days", 1);
    if (days == 0 || days > opt_.max_long_days)
      throw HttpError(400, "bad_request", "days must lie in [1, " + std::to_string(opt_.max_long_days) + "]");
    auto rows = roads_param(*s, p);
    const std::size_t steps = days * static_cast<std::size_t>(s->dataset().panel.q);
    auto m = s->forecast(steps, true);
    json j = frame(*s, steps);
    j["model"] = s->has_long_model() ? "long_term" : "short_term";
    j["series"] = series_json(*s, *m, rows);
    return j;
  }

  agents::RouteSuggestion plan(const ModelState& s, const std::string& from, const std::string& to,
                               std::size_t step) const {
    road_index(s, from);
    road_index(s, to);
    const std::size_t h = s.data().cfg.horizon;
    if (step >= h) throw HttpError(400, "bad_request", "departure step must lie in [0, " + std::to_string(h) + ")");
    auto m = s.forecast(h, false);
    try {
      return agents::plan_route(s.network(), s.travel_minutes(*m, opt_.travel), from, to, step);
    } catch (const agents::RouteError& e) {
      throw HttpError(422, "unreachable", e.what(), {{"from", from}, {"to", to}});
    }
  }

  json route(const std::shared_ptr<const ModelState>& s, const Params& p) const {
    auto from = p.find("from"), to = p.find("to");
    if (from == p.end() || to == p.end()) throw HttpError(400, "bad_request", "route needs from and to");
    auto r = plan(*s, from->second, to->second, uint_param(p, "step", 0));
    json j = r;
    j["units"] = "minutes";
    return j;
  }

  ProposedNode proposal_from(const ModelState& s, const json& body) const {
    ProposedNode node;
    try {
      node = body.get<ProposedNode>();
    } catch (const json::exception& e) {
      throw HttpError(400, "bad_request", std::string("bad proposed road: ") + e.what());
    }
    if (node.connections.empty()) throw HttpError(400, "bad_request", "proposed road needs connections");
    for (const auto& c : node.connections) road_index(s, c.node);
    if (s.network().index_of(node.id))
      throw HttpError(400, "bad_request", "road '" + node.id + "' already exists");
    return node;
  }

  json estimate(const std::shared_ptr<const ModelState>& s, const json& body) const {
    auto node = proposal_from(*s, body);
    json j = *s->estimate(node, opt_.estimate);
    j["slice_minutes"] = s->dataset().panel.slice_minutes;
    j["units"] = s->dataset().panel.units;
    return j;
  }

  json query(const json& body, Timings& timings) const {
    // demand first: an unparseable request is a 400 even without a model
    agents::ParseResult parsed = timed(timings, "parse", [&] {
      if (body.contains("demand")) {
        auto d = body.at("demand");
        if (d.is_object() && !d.contains("schema")) d["schema"] = agents::kDemandSchema;
        return agents::demand_from_json(d);
      }
      if (!body.contains("text") || !body.at("text").is_string())
        throw HttpError(400, "bad_request", "query needs 'text' or 'demand'");
      return agents::parse_demand(body.at("text").get<std::string>(), llm_.get());
    });
    if (!parsed.ok()) {
      json e = *parsed.error;
      e["demand_error"] = e["error"];
      throw HttpError(400, "unparseable_demand", parsed.error->message, e);
    }
    auto s = require_state();
    auto d = *parsed.demand;
    std::optional<std::string> here;
    if (body.contains("origin") && body.at("origin").is_string()) here = agents::normalize_road_id(body.at("origin"));
    const std::size_t departure = body.value("departure_step", std::size_t{0});
    for (const auto& id : d.target_roads) road_index(*s, id);
    for (const auto& id : d.connections) road_index(*s, id);
    for (const auto& id : {d.origin, d.destination, here})
      if (id) road_index(*s, *id);

    const auto& panel = s->dataset().panel;
    const std::size_t steps = std::max<std::size_t>(
        1, static_cast<std::size_t>((d.horizon_minutes + panel.slice_minutes - 1) / panel.slice_minutes));
    json out{{"demand", d}, {"suggestions", json::array()}};
    json viz{{"heatmap", json::object()}, {"route_polyline", json::array()}};
    std::vector<std::size_t> rows;
    std::shared_ptr<const Matrix> pred;

    if (d.task == agents::Task::unseen_estimate) {
      ProposedNode node;
      node.id = body.value("proposed_id", std::string("proposed"));
      for (const auto& c : d.connections) node.connections.push_back({c, s->default_connection_km(), ProposedConnection::Direction::both});
      auto est = timed(timings, "estimate", [&] { return s->estimate(node, opt_.estimate); });
      out["predictions"] = {{node.id, est->at("series")}};
      out["suggestions"].push_back({{"kind", "estimate_summary"}, {"payload", est->at("summary")}});
      out["frame"] = {{"start_step", est->at("series_start_step")},
                      {"slice_minutes", panel.slice_minutes},
                      {"steps", est->at("series").size()},
                      {"units", panel.units}};
      viz["heatmap"] = {{"roads", json::array({node.id})}, {"values", json::array({est->at("series")})}};
      out["visualization"] = viz;
      return out;
    }

    if (d.task == agents::Task::long_term && steps > opt_.max_long_days * static_cast<std::size_t>(panel.q))
      throw HttpError(400, "bad_request", "horizon beyond " + std::to_string(opt_.max_long_days) + " days");
    pred = timed(timings, "predict", [&] { return s->forecast(steps, d.task == agents::Task::long_term); });

    const auto from = d.task == agents::Task::route ? d.origin : here;
    const auto to = d.destination;
    if (from && to && *from != *to) {
      auto r = timed(timings, "route", [&] { return plan(*s, *from, *to, departure); });
      for (const auto& id : r.path) rows.push_back(s->network().require_index(id));
      out["suggestions"].push_back(agents::Suggestion{agents::SuggestionKind::route, r});
      viz["route_polyline"] = r.path;
    }
    for (const auto& id : d.target_roads) {
      const auto i = s->network().require_index(id);
      if (std::find(rows.begin(), rows.end(), i) == rows.end()) rows.push_back(i);
    }
    if (d.task == agents::Task::alert || d.task == agents::Task::long_term) {
      Matrix sub(static_cast<Eigen::Index>(rows.size()), pred->cols());
      std::vector<double> thr;
      std::vector<std::string> ids;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        sub.row(static_cast<Eigen::Index>(k)) = pred->row(static_cast<Eigen::Index>(rows[k]));
        thr.push_back(s->thresholds()[rows[k]]);
        ids.push_back(s->network().node_ids()[rows[k]]);
      }
      auto a = agents::congestion_alert(sub, thr, ids, s->alert_direction());
      out["suggestions"].push_back(agents::Suggestion{agents::SuggestionKind::alert, a});
    }
    out["predictions"] = series_json(*s, *pred, rows);
    out["frame"] = frame(*s, steps);
    json hm_roads = json::array(), hm_values = json::array();
    for (auto i : rows) {
      hm_roads.push_back(s->network().node_ids()[i]);
      const auto row = pred->row(static_cast<Eigen::Index>(i));
      hm_values.push_back(std::vector<double>(row.begin(), row.end()));
    }
    viz["heatmap"] = {{"roads", hm_roads}, {"values", hm_values}};
    out["visualization"] = viz;
    return out;
  }

  ServiceOptions opt_;
  std::shared_ptr<agents::LlmClient> llm_;
  mutable std::mutex mu_;
  std::shared_ptr<const ModelState> state_;
};

/// Registers every endpoint plus CORS on an httplib server.
inline void bind_routes(httplib::Server& srv, const TrafficService& svc) {
  const auto& opt = svc.options();
  srv.set_default_headers({{"Access-Control-Allow-Origin", opt.cors_origin},
                           {"Access-Control-Allow-Headers", "Content-Type"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  const std::size_t threads = std::max<std::size_t>(1, opt.threads);
  srv.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  auto dispatch = [&svc](const httplib::Request& req, httplib::Response& res) {
    Params params;
    for (const auto& [k, v] : req.params) params[k] = v;
    auto r = svc.handle(req.method, req.path, params, req.body);
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    res.set_content(r.body.dump(), "application/json");
  };
  for (const char* p : {"/health", "/network", "/predict/short", "/predict/long", "/route"}) srv.Get(p, dispatch);
  for (const char* p : {"/query", "/estimate/unseen"}) srv.Post(p, dispatch);
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    res.set_content(json{{"error", "not_found"}, {"message", "no endpoint " + req.method + " " + req.path}}.dump(),
                    "application/json");
  });
}

}  // namespace tgpt::service
