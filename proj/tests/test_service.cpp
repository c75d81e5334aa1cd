#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "tgpt/service.hpp"
#include "tgpt/synthetic.hpp"

using namespace tgpt;
using namespace tgpt::service;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.t_w = 1;
  c.embed = 8;
  c.n_blocks = 1;
  c.heads_fusion_rd = c.heads_fusion_rw = c.heads_spatial = c.heads_temporal = 2;
  return c;
}

struct Fixture {
  Dataset ds = synthetic::service_fixture();
  PreparedData data = prepare_data(ds, small_config());
  Checkpoint ckpt = make_checkpoint(DfmtModel<float>(data.cfg, 3), data, ds.network.node_ids());
  Checkpoint other = make_checkpoint(DfmtModel<float>(data.cfg, 4), data, ds.network.node_ids());
  CoSemanticModel cosem{2};

  ServiceAssets assets(bool with_cosem = true) const {
    return {ds, ckpt, std::nullopt, with_cosem ? std::optional<CoSemanticModel>(cosem) : std::nullopt};
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

std::shared_ptr<agents::ReplayLlmClient> replay_llm() {
  std::ifstream in(std::string(TGPT_TEST_DATA_DIR) + "/llm_replay.json");
  return std::make_shared<agents::ReplayLlmClient>(agents::ReplayLlmClient::from_json(json::parse(in)));
}

ServiceOptions quiet() {
  ServiceOptions o;
  o.log = nullptr;
  o.estimate.k = 3;
  o.estimate.train.max_steps = 10;
  o.estimate.train.epochs = 1;
  return o;
}

std::unique_ptr<TrafficService> loaded_service() {
  auto svc = std::make_unique<TrafficService>(quiet(), replay_llm());
  svc->load(fx().assets());
  return svc;
}

Response query(const TrafficService& svc, const json& body) { return svc.handle("POST", "/query", {}, body.dump()); }

/// Independent forecast: the checkpoint's model rolled out from the end of the panel.
Matrix oracle_forecast(std::size_t stages) {
  auto model = fx().ckpt.model<float>();
  return autoregressive_rollout(model, fx().data, fx().ds.panel.length(), stages).values;
}

}  // namespace

TEST(Service, WithoutModelAnswers503) {
  TrafficService svc(quiet());
  auto h = svc.handle("GET", "/health", {}, "");
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body.at("model_loaded"), false);
  EXPECT_EQ(query(svc, {{"text", "How is Road 3 in 10 minutes?"}}).status, 503);
  EXPECT_EQ(svc.handle("GET", "/predict/short", {{"road", "3"}}, "").status, 503);
  EXPECT_EQ(svc.handle("GET", "/network", {}, "").status, 503);
  // demand errors are reported before the model is needed
  EXPECT_EQ(query(svc, {{"text", ""}}).status, 400);
}

TEST(Service, RouteQueryWithRecordedLlm) {
  auto svc = loaded_service();
  auto r = query(*svc, {{"text", "Please find me the quickest way from road two to road five."}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body.at("demand").at("source"), "llm");
  EXPECT_EQ(r.body.at("demand").at("task"), "route");
  const auto& sug = r.body.at("suggestions");
  ASSERT_EQ(sug.size(), 1u);
  EXPECT_EQ(sug[0].at("kind"), "route");
  const auto& p = sug[0].at("payload");

  // same route from the planner over an independently computed forecast
  auto st = svc->state();
  Matrix tt = st->travel_minutes(oracle_forecast(1), agents::TravelTimeModel{});
  auto expect = agents::plan_route(fx().ds.network, tt, "2", "5", 0);
  EXPECT_EQ(p.at("path").get<std::vector<std::string>>(), expect.path);
  EXPECT_DOUBLE_EQ(p.at("total_minutes").get<double>(), expect.total_minutes);
  EXPECT_EQ(p.at("step_minutes").size(), expect.path.size() - 1);
  EXPECT_EQ(r.body.at("visualization").at("route_polyline"), json(expect.path));
  // 30 minutes at 5-minute slices, one series per road on the path
  for (const auto& id : expect.path) EXPECT_EQ(r.body.at("predictions").at(id).size(), 6u);
  EXPECT_EQ(r.body.at("frame").at("steps"), 6);
}

TEST(Service, CanonicalUtteranceNamesAnUnknownRoad) {
  auto svc = loaded_service();
  auto r = query(*svc, {{"text", "I want to go to Road 53. It takes about ten minutes to drive there."}});
  EXPECT_EQ(r.status, 404);
  EXPECT_EQ(r.body.at("error"), "unknown_road");
  EXPECT_EQ(r.body.at("road"), "53");
}

TEST(Service, ShortTermQueryWithCurrentRoadAddsRoute) {
  auto svc = loaded_service();
  auto r = query(*svc, {{"text", "I want to go to Road 6. It takes about ten minutes to drive there."}, {"origin", "1"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body.at("demand").at("task"), "short_term");
  EXPECT_EQ(r.body.at("demand").at("horizon_minutes"), 10);
  ASSERT_EQ(r.body.at("suggestions").size(), 1u);
  auto path = r.body.at("suggestions")[0].at("payload").at("path");
  EXPECT_EQ(path.front(), "1");
  EXPECT_EQ(path.back(), "6");
  auto oracle = oracle_forecast(1);
  auto six = r.body.at("predictions").at("6").get<std::vector<double>>();
  ASSERT_EQ(six.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(six[k], oracle(6, static_cast<Eigen::Index>(k)));
}

TEST(Service, BadRequests) {
  auto svc = loaded_service();
  EXPECT_EQ(svc->handle("POST", "/query", {}, "{not json").status, 400);
  EXPECT_EQ(svc->handle("POST", "/query", {}, "[1,2]").status, 400);
  EXPECT_EQ(query(*svc, {{"txt", "Road 1"}}).status, 400);
  auto unclear = query(*svc, {{"text", "how is the traffic"}});
  EXPECT_EQ(unclear.status, 400);
  EXPECT_EQ(unclear.body.at("demand_error"), "no_road");
  EXPECT_FALSE(unclear.body.at("clarification").get<std::string>().empty());
  EXPECT_EQ(query(*svc, {{"demand", {{"task", "route"}, {"horizon_minutes", 10}, {"origin", "1"}, {"destination", "1"}}}}).status, 400);
  EXPECT_EQ(svc->handle("GET", "/predict/short", {{"road", "99"}}, "").status, 404);
  EXPECT_EQ(svc->handle("GET", "/predict/short", {{"road", "1"}, {"steps", "13"}}, "").status, 400);
  EXPECT_EQ(svc->handle("GET", "/predict/short", {{"road", "1"}, {"steps", "x"}}, "").status, 400);
  EXPECT_EQ(svc->handle("GET", "/predict/long", {{"days", "0"}}, "").status, 400);
  EXPECT_EQ(svc->handle("GET", "/route", {{"from", "1"}}, "").status, 400);
  EXPECT_EQ(svc->handle("GET", "/route", {{"from", "1"}, {"to", "nope"}}, "").status, 404);
  EXPECT_EQ(svc->handle("GET", "/nowhere", {}, "").status, 404);
}

TEST(Service, ExplicitDemandBody) {
  auto svc = loaded_service();
  auto r = query(*svc, {{"demand", {{"task", "alert"}, {"target_roads", {"3"}}, {"horizon_minutes", 120}}}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  ASSERT_EQ(r.body.at("suggestions").size(), 1u);
  EXPECT_EQ(r.body.at("suggestions")[0].at("kind"), "alert");
  // windows agree with the alert rule applied to the returned series
  auto series = r.body.at("predictions").at("3").get<std::vector<double>>();
  ASSERT_EQ(series.size(), 24u);
  Matrix m(1, 24);
  for (std::size_t k = 0; k < 24; ++k) m(0, static_cast<Eigen::Index>(k)) = series[k];
  auto st = svc->state();
  auto expect = agents::congestion_alert(m, {st->thresholds()[3]}, {"3"});
  EXPECT_EQ(r.body.at("suggestions")[0].at("payload"), json(expect));
}

TEST(Service, PredictionEndpoints) {
  auto svc = loaded_service();
  auto s = svc->handle("GET", "/predict/short", {{"road", "4"}, {"steps", "12"}}, "");
  ASSERT_EQ(s.status, 200);
  auto oracle = oracle_forecast(24);
  auto v = s.body.at("series").at("4").get<std::vector<double>>();
  ASSERT_EQ(v.size(), 12u);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(v[k], oracle(4, static_cast<Eigen::Index>(k)));
  EXPECT_EQ(s.body.at("start_step"), fx().ds.panel.length());
  EXPECT_EQ(s.body.at("slice_minutes"), 5);

  auto all = svc->handle("GET", "/predict/short", {}, "");
  EXPECT_EQ(all.body.at("series").size(), 8u);

  auto l = svc->handle("GET", "/predict/long", {{"road", "4"}, {"days", "1"}}, "");
  ASSERT_EQ(l.status, 200);
  auto lv = l.body.at("series").at("4").get<std::vector<double>>();
  ASSERT_EQ(lv.size(), 288u);
  for (std::size_t k = 0; k < 288; ++k) ASSERT_EQ(lv[k], oracle(4, static_cast<Eigen::Index>(k)));
  EXPECT_EQ(l.body.at("model"), "short_term");
}

TEST(Service, NetworkAndRouteEndpoints) {
  auto svc = loaded_service();
  auto n = svc->handle("GET", "/network", {}, "");
  ASSERT_EQ(n.status, 200);
  EXPECT_EQ(n.body.at("nodes").size(), 8u);
  EXPECT_EQ(n.body.at("edges").size(), fx().ds.network.edges().size());
  auto r = svc->handle("GET", "/route", {{"from", "0"}, {"to", "7"}, {"step", "3"}}, "");
  ASSERT_EQ(r.status, 200);
  auto st = svc->state();
  auto expect = agents::plan_route(fx().ds.network, st->travel_minutes(oracle_forecast(1), agents::TravelTimeModel{}), "0", "7", 3);
  EXPECT_EQ(r.body.at("path").get<std::vector<std::string>>(), expect.path);
  EXPECT_EQ(svc->handle("GET", "/route", {{"from", "0"}, {"to", "7"}, {"step", "12"}}, "").status, 400);
}

TEST(Service, UnseenEstimate) {
  TrafficService no_cosem(quiet());
  no_cosem.load(fx().assets(false));
  json body{{"id", "new"}, {"connections", {{{"node", "3"}, {"distance", 1.2}}, {{"node", "7"}, {"distance", 0.8}}}}};
  EXPECT_EQ(no_cosem.handle("POST", "/estimate/unseen", {}, body.dump()).status, 503);

  auto svc = loaded_service();
  auto r = svc->handle("POST", "/estimate/unseen", {}, body.dump());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body.at("similar_roads").size(), 3u);
  EXPECT_EQ(r.body.at("series").size(), 288u);
  EXPECT_TRUE(r.body.at("pseudo_target").get<bool>());
  for (double v : r.body.at("series")) EXPECT_TRUE(std::isfinite(v));

  json unknown = body;
  unknown["connections"][0]["node"] = "99";
  EXPECT_EQ(svc->handle("POST", "/estimate/unseen", {}, unknown.dump()).status, 404);
  json existing = body;
  existing["id"] = "3";
  EXPECT_EQ(svc->handle("POST", "/estimate/unseen", {}, existing.dump()).status, 400);
  EXPECT_EQ(svc->handle("POST", "/estimate/unseen", {}, R"({"id": "x"})").status, 400);

  auto q = query(*svc, {{"text", "estimate traffic if we add a road between Road 3 and Road 7"}});
  ASSERT_EQ(q.status, 200) << q.body.dump();
  EXPECT_EQ(q.body.at("suggestions")[0].at("kind"), "estimate_summary");
  EXPECT_EQ(q.body.at("predictions").at("proposed").size(), 288u);
}

TEST(Service, IdenticalRequestsGiveIdenticalBodies) {
  auto svc = loaded_service();
  const json body{{"text", "Please find me the quickest way from road two to road five."}};
  auto a = query(*svc, body), b = query(*svc, body);
  EXPECT_EQ(a.body.dump(), b.body.dump());
  // a fresh service over the same checkpoint agrees too
  auto fresh = loaded_service();
  EXPECT_EQ(query(*fresh, body).body.dump(), a.body.dump());
  auto p1 = svc->handle("GET", "/predict/long", {{"days", "1"}}, "");
  auto p2 = fresh->handle("GET", "/predict/long", {{"days", "1"}}, "");
  EXPECT_EQ(p1.body.dump(), p2.body.dump());
}

TEST(Service, HotSwapReplacesTheModel) {
  auto svc = loaded_service();
  auto old_state = svc->state();
  auto before = svc->handle("GET", "/predict/short", {{"road", "2"}}, "").body.dump();
  auto assets = fx().assets();
  assets.short_term = fx().other;
  svc->load(assets);
  auto after = svc->handle("GET", "/predict/short", {{"road", "2"}}, "").body.dump();
  EXPECT_NE(before, after);
  // a request holding the old state still sees the old model
  EXPECT_EQ(old_state->forecast(1, false)->coeff(2, 0), json::parse(before).at("series").at("2").at(0).get<double>());
}

TEST(Service, RejectsMismatchedCheckpoint) {
  auto assets = fx().assets();
  assets.short_term.node_ids[0] = "zz";
  TrafficService svc(quiet());
  EXPECT_THROW(svc.load(assets), std::invalid_argument);
  EXPECT_EQ(svc.handle("GET", "/health", {}, "").body.at("model_loaded"), false);
}

TEST(ServiceHttp, SixteenConcurrentRequests) {
  auto svc = loaded_service();
  httplib::Server srv;
  bind_routes(srv, *svc);
  const int port = srv.bind_to_any_port("127.0.0.1");
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  // expected bodies computed sequentially on an independent service
  auto ref = loaded_service();
  struct Req {
    std::string method, path;
    Params params;
    std::string body;
  };
  std::vector<Req> reqs;
  for (int i = 0; i < 8; ++i) reqs.push_back({"GET", "/predict/short", {{"road", std::to_string(i)}, {"steps", std::to_string(1 + i)}}, ""});
  for (int i = 0; i < 4; ++i) reqs.push_back({"GET", "/route", {{"from", std::to_string(i)}, {"to", std::to_string(7 - i)}}, ""});
  reqs.push_back({"GET", "/predict/long", {{"road", "5"}, {"days", "1"}}, ""});
  reqs.push_back({"POST", "/query", {}, json{{"text", "Please find me the quickest way from road two to road five."}}.dump()});
  reqs.push_back({"POST", "/query", {}, json{{"text", "Will Road 1 be congested in the next hour?"}}.dump()});
  reqs.push_back({"POST", "/query", {}, "{broken"});
  ASSERT_EQ(reqs.size(), 16u);
  std::vector<Response> expected;
  for (const auto& r : reqs) expected.push_back(ref->handle(r.method, r.path, r.params, r.body));

  std::vector<int> status(reqs.size());
  std::vector<std::string> bodies(reqs.size());
  std::vector<std::string> cors(reqs.size());
  std::vector<std::thread> clients;
  for (std::size_t i = 0; i < reqs.size(); ++i)
    clients.emplace_back([&, i] {
      httplib::Client cli("127.0.0.1", port);
      cli.set_read_timeout(120);
      const auto& r = reqs[i];
      httplib::Result res = r.method == "GET"
                                ? cli.Get(r.path, httplib::Params(r.params.begin(), r.params.end()), httplib::Headers{})
                                : cli.Post(r.path, r.body, "application/json");
      if (!res) return;
      status[i] = res->status;
      bodies[i] = res->body;
      cors[i] = res->get_header_value("Access-Control-Allow-Origin");
    });
  for (auto& c : clients) c.join();
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    EXPECT_EQ(status[i], expected[i].status) << reqs[i].path;
    EXPECT_EQ(bodies[i], expected[i].body.dump()) << reqs[i].path;
    EXPECT_EQ(cors[i], "*");
  }

  httplib::Client cli("127.0.0.1", port);
  auto pre = cli.Options("/query");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Methods"), "GET, POST, OPTIONS");
  auto missing = cli.Get("/nope");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body).at("error"), "not_found");
  srv.stop();
  th.join();
}
