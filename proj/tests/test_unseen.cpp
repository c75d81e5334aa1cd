#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "tgpt/synthetic.hpp"
#include "tgpt/unseen.hpp"

using namespace tgpt;
using namespace tgpt::testing;

namespace {

RoadNetwork star() {
  // 0 -- 1 (2 km), 0 -- 2 (3 km), 3 isolated
  return RoadNetwork({"a0", "a1", "a2", "a3"}, {{0, 1, 2.0}, {2, 0, 3.0}});
}

std::vector<SpatialSemanticGraph> all_graphs(const RoadNetwork& net) {
  std::vector<SpatialSemanticGraph> gs;
  for (std::size_t i = 0; i < net.size(); ++i) gs.push_back(spatial_semantic_graph(net, i));
  return gs;
}

ProposedNode proposal(const std::vector<std::pair<std::string, double>>& links) {
  ProposedNode p{"new", {}};
  for (const auto& [id, km] : links) p.connections.push_back({id, km});
  return p;
}

Matrix similarity(const CoSemanticModel& m, const std::vector<SpatialSemanticGraph>& gs) {
  ag::NoGradGuard ng;
  return to_matrix(m.similarity_matrix(encode_semantic_graphs(gs))->value);
}

struct PretrainedClusters {
  synthetic::ClusterFixture fixture = synthetic::two_cluster_fixture();
  Dataset existing = fixture.existing();
  PreparedData data;
  std::vector<SpatialSemanticGraph> refs;
  CoSemanticModel model{1};
  PretrainReport report;

  PretrainedClusters() {
    ModelConfig cfg;
    cfg.t_w = 1;
    data = prepare_data(existing, cfg);
    refs = all_graphs(existing.network);
    report = pretrain_cosemantic(model, refs, data.corr.a_c);
  }
};

const PretrainedClusters& clusters() {
  static const PretrainedClusters c;
  return c;
}

}  // namespace

TEST(SemanticGraph, UndirectedNeighboursAppearBothWays) {
  auto g = spatial_semantic_graph(star(), 0);
  EXPECT_EQ(g.c_up, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(g.c_down, g.c_up);
  EXPECT_EQ(g.d_up, (std::vector<double>{2.0, 3.0}));
  EXPECT_EQ(g.d_down, g.d_up);
  EXPECT_TRUE(spatial_semantic_graph(star(), 3).empty());
}

TEST(SemanticGraph, DirectedEdgesSplitByDirection) {
  RoadNetwork net({"x", "y", "z"}, {{0, 1, 1.5}, {1, 2, 2.5}}, true);
  auto g = spatial_semantic_graph(net, 1);
  EXPECT_EQ(g.c_up, (std::vector<std::size_t>{0}));
  EXPECT_EQ(g.d_up, (std::vector<double>{1.5}));
  EXPECT_EQ(g.c_down, (std::vector<std::size_t>{2}));
  EXPECT_EQ(g.d_down, (std::vector<double>{2.5}));
}

TEST(SemanticGraph, ProposedNodeBetweenTwoExisting) {
  auto g = spatial_semantic_graph(star(), proposal({{"a1", 1.0}, {"a3", 4.0}}));
  EXPECT_EQ(g.c_up.size(), 2u);
  EXPECT_EQ(g.c_down.size(), 2u);
  EXPECT_EQ(g.c_up, (std::vector<std::size_t>{1, 3}));
  ProposedNode one_way{"n", {{"a1", 1.0, ProposedConnection::Direction::upstream}}};
  auto h = spatial_semantic_graph(star(), one_way);
  EXPECT_EQ(h.c_up.size(), 1u);
  EXPECT_TRUE(h.c_down.empty());
  EXPECT_THROW(spatial_semantic_graph(star(), proposal({{"nope", 1.0}})), DataError);
  EXPECT_THROW(spatial_semantic_graph(star(), proposal({{"a1", 0.0}})), std::invalid_argument);
}

TEST(SemanticGraph, ProposedNodeJsonRoundTrip) {
  auto j = nlohmann::json::parse(
      R"({"id":"R9","connections":[{"node":"a1","distance":1.2},{"node":"a2","distance":0.4,"direction":"downstream"}]})");
  auto p = j.get<ProposedNode>();
  EXPECT_EQ(p.id, "R9");
  ASSERT_EQ(p.connections.size(), 2u);
  EXPECT_EQ(p.connections[1].direction, ProposedConnection::Direction::downstream);
  EXPECT_EQ(nlohmann::json(p).get<ProposedNode>().connections[0].distance, 1.2);
  EXPECT_THROW(nlohmann::json::parse(R"({"node":"a","distance":1,"direction":"sideways"})")
                   .get<ProposedConnection>(),
               std::invalid_argument);
}

TEST(Encoding, BinsAreLogSpaced) {
  EXPECT_EQ(distance_bin(0.1), 0u);
  EXPECT_EQ(distance_bin(0.01), 0u);
  EXPECT_EQ(distance_bin(1.0), 2u);  // log10 position 1/3 of the range -> bin floor(8/3)
  EXPECT_EQ(distance_bin(10.0), 5u);
  EXPECT_EQ(distance_bin(99.0), 7u);
  EXPECT_EQ(distance_bin(5000.0), 7u);
}

TEST(Encoding, HandExample) {
  SpatialSemanticGraph g;
  g.c_up = {1, 2};
  g.d_up = {1.0, 10.0};
  auto f = encode_semantic_graph(g);
  EXPECT_DOUBLE_EQ(f[0], std::log(3.0));
  EXPECT_DOUBLE_EQ(f[1], 0.0);
  EXPECT_DOUBLE_EQ(f[2 + 2], 0.5);
  EXPECT_DOUBLE_EQ(f[2 + 5], 0.5);
  for (std::size_t k = 10; k < 18; ++k) EXPECT_EQ(f[k], 0.0);
  EXPECT_DOUBLE_EQ(f[18], 0.5 * std::log(10.0));
  EXPECT_DOUBLE_EQ(f[19], 0.0);
  EXPECT_DOUBLE_EQ(f[20], std::log(10.0));
  EXPECT_EQ(f[21], 0.0);
  EXPECT_EQ(encode_semantic_graph(g), encode_semantic_graph(g));
  EXPECT_EQ(encode_semantic_graph({}), (std::array<double, kSemanticFeatures>{}));
}

TEST(Similarity, SelfIsOneAndOrderIsPermutationInvariant) {
  CoSemanticModel m(3);
  auto net = synthetic::random_connected_network(9, 14, 4);
  auto gs = all_graphs(net);
  for (std::size_t i = 0; i < gs.size(); ++i)
    EXPECT_NEAR(cosemantic_similarity(m, gs[i], {gs[i]})[0], 1.0, 1e-12);
  auto s = cosemantic_similarity(m, gs[0], gs);
  std::vector<std::size_t> perm{4, 2, 8, 0, 1, 7, 3, 6, 5};
  std::vector<SpatialSemanticGraph> shuffled;
  for (auto p : perm) shuffled.push_back(gs[p]);
  auto t = cosemantic_similarity(m, gs[0], shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_DOUBLE_EQ(t[i], s[perm[i]]);
  for (double v : s) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(m.params().find("w")->shape(), (Shape{kSemanticFeatures, 1024}));
}

TEST(Similarity, NegatedEmbeddingIsMinusOne) {
  CoSemanticModel m(5);
  m.params().find("b")->value.fill(0.0);
  SpatialSemanticGraph a, b;
  a.c_up = {0};
  a.d_up = {0.5};
  b.c_down = {1, 2};
  b.d_down = {7.0, 20.0};
  auto fa = encode_semantic_graph(a), fb = encode_semantic_graph(b);
  std::vector<double> mid(kSemanticFeatures);
  for (std::size_t k = 0; k < kSemanticFeatures; ++k) mid[k] = 0.5 * (fa[k] + fb[k]);
  m.set_standardization(mid, std::vector<double>(kSemanticFeatures, 1.0));
  EXPECT_NEAR(cosemantic_similarity(m, a, {b})[0], -1.0, 1e-12);
}

TEST(Similarity, ModelSurvivesSaveAndLoad) {
  CoSemanticModel m(7, 6);
  m.set_standardization(std::vector<double>(kSemanticFeatures, 0.25), std::vector<double>(kSemanticFeatures, 2.0));
  const auto path = std::filesystem::temp_directory_path() / "tgpt_cosem_roundtrip.json";
  save_cosemantic(path, m);
  auto back = load_cosemantic(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.n_top(), 6u);
  EXPECT_EQ(back.feature_mean(), m.feature_mean());
  auto net = synthetic::random_connected_network(9, 14, 4);
  auto gs = all_graphs(net);
  EXPECT_EQ(cosemantic_similarity(back, gs[0], gs), cosemantic_similarity(m, gs[0], gs));
}

TEST(Similarity, ZeroNormEmbeddingScoresZero) {
  CoSemanticModel m(5);
  m.params().find("w")->value.fill(0.0);
  m.params().find("b")->value.fill(0.0);
  auto gs = all_graphs(star());
  for (double v : cosemantic_similarity(m, gs[0], gs)) EXPECT_EQ(v, 0.0);
}

TEST(PretrainLoss, VanishesWhenSimilarityEqualsCorrelation) {
  std::mt19937_64 rng(2);
  Matrix c = Matrix::Random(6, 6);
  c = (0.5 * (c + c.transpose())).eval();
  auto s = ag::constant(to_tensor<double>(c));
  EXPECT_EQ(cosemantic_pretrain_loss(s, c, 10)->value[0], 0.0);
}

TEST(PretrainLoss, HandExample) {
  // rows without the diagonal: node0 v=(0.5,0.1) c=(0.2,0.1); node1 v=(0.5,0.3) c=(0.2,0.4);
  // node2 v=(0.1,0.3) c=(0.1,0.4); n_top = 1
  Matrix s(3, 3), c(3, 3);
  s << 1, 0.5, 0.1, 0.5, 1, 0.3, 0.1, 0.3, 1;
  c << 1, 0.2, 0.1, 0.2, 1, 0.4, 0.1, 0.4, 1;
  const double n0 = (0.3 + 0.0) / 2 + std::abs(0.25 - 0.04);
  const double n1 = (0.3 + 0.1) / 2 + std::abs(0.25 - 0.16);
  const double n2 = (0.0 + 0.1) / 2 + std::abs(0.09 - 0.16);
  auto l = cosemantic_pretrain_loss(ag::constant(to_tensor<double>(s)), c, 1);
  EXPECT_NEAR(l->value[0], (n0 + n1 + n2) / 3, 1e-12);
}

TEST(PretrainLoss, LeavesSelfOut) {
  std::mt19937_64 rng(8);
  Matrix s = Matrix::Random(5, 5), c = Matrix::Random(5, 5);
  const double a = cosemantic_pretrain_loss(ag::constant(to_tensor<double>(s)), c, 3)->value[0];
  s.diagonal().setConstant(-0.9);
  c.diagonal().setConstant(7.0);
  EXPECT_EQ(cosemantic_pretrain_loss(ag::constant(to_tensor<double>(s)), c, 3)->value[0], a);
}

TEST(PretrainLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (std::size_t n_top : {2u, 10u}) {
    auto s = ag::parameter(random_tensor({6, 6}, rng), "s");
    Matrix c = to_matrix(random_tensor({6, 6}, rng));
    auto rep = check_gradients({{"s", s}}, [&] { return cosemantic_pretrain_loss(s, c, n_top); });
    EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
  }
  EXPECT_THROW(cosemantic_pretrain_loss(ag::constant(Tensor<double>({1, 1})), Matrix::Ones(1, 1), 1),
               std::invalid_argument);
}

TEST(Pretrain, LossDecreasesOnRandomFixture) {
  auto net = synthetic::random_connected_network(12, 20, 6);
  std::mt19937_64 rng(6);
  Matrix series = to_matrix(random_tensor({12, 80}, rng));
  auto corr = pearson_correlation_graph(series).a_c;
  CoSemanticModel m(2);
  auto rep = pretrain_cosemantic(m, all_graphs(net), corr, {.epochs = 60});
  EXPECT_LT(rep.final_loss, rep.loss.front());
  EXPECT_FALSE(rep.degenerate);
  EXPECT_THROW(pretrain_cosemantic(m, {all_graphs(net)[0]}, Matrix::Ones(1, 1)), std::invalid_argument);
}

TEST(Pretrain, FlagsDegenerateCorrelations) {
  auto gs = all_graphs(star());
  Matrix c = Matrix::Constant(4, 4, 0.3);
  c.diagonal().setOnes();
  CoSemanticModel m(2);
  auto rep = pretrain_cosemantic(m, gs, c, {.epochs = 5});
  EXPECT_TRUE(rep.degenerate);
  EXPECT_EQ(rep.loss.size(), 5u);
}

TEST(Pretrain, ClustersSeparateAfterTraining) {
  const auto& c = clusters();
  EXPECT_LT(c.report.final_loss, c.report.loss.front());
  auto label = c.fixture.existing_clusters();
  Matrix s = similarity(c.model, c.refs);
  std::size_t good = 0, total = 0;
  for (std::size_t i = 0; i < c.refs.size(); ++i)
    for (std::size_t j = 0; j < c.refs.size(); ++j)
      for (std::size_t k = 0; k < c.refs.size(); ++k) {
        if (j == i || k == i || label[j] != label[i] || label[k] == label[i]) continue;
        ++total;
        good += s(i, j) > s(i, k);
      }
  EXPECT_GE(static_cast<double>(good) / static_cast<double>(total), 0.9);
}

TEST(Pretrain, HeldOutTopTenMatchesCorrelationOracle) {
  const auto& c = clusters();
  auto p = proposal(c.fixture.held_out_links());
  auto chosen = select_top_k(
      cosemantic_similarity(c.model, spatial_semantic_graph(c.existing.network, p), c.refs), 10);
  // oracle: the ten existing nodes best correlated with the held-out series on the training split
  const auto series = c.fixture.held_out_series();
  std::vector<double> corr;
  Matrix two(2, static_cast<Eigen::Index>(c.data.split.train_end));
  for (std::size_t t = 0; t < c.data.split.train_end; ++t) two(0, static_cast<Eigen::Index>(t)) = series[t];
  for (Eigen::Index i = 0; i < c.data.panel.values.rows(); ++i) {
    two.row(1) = c.data.panel.values.row(i).leftCols(two.cols());
    corr.push_back(pearson_correlation_graph(two).a_c(0, 1));
  }
  auto oracle = select_top_k(corr, 10);
  std::size_t overlap = 0;
  for (auto a : chosen) overlap += std::count(oracle.begin(), oracle.end(), a);
  EXPECT_GE(overlap, 8u);
}

TEST(Pretrain, StructuralTwinRanksFirst) {
  const auto& c = clusters();
  for (const std::string twin : {"3", "15", "20"}) {
    const std::size_t t = c.existing.network.require_index(twin);
    const auto g = spatial_semantic_graph(c.existing.network, t);
    ProposedNode p{"twin", {}};
    for (std::size_t i = 0; i < g.c_up.size(); ++i)
      p.connections.push_back({c.existing.network.node_ids()[g.c_up[i]], g.d_up[i]});
    auto scores = cosemantic_similarity(c.model, spatial_semantic_graph(c.existing.network, p), c.refs);
    EXPECT_EQ(select_top_k(scores, 1).front(), t) << twin;
    EXPECT_NEAR(scores[t], 1.0, 1e-9);
  }
}

TEST(TopK, TiesGoToTheEarlierNode) {
  EXPECT_EQ(select_top_k({0.2, 0.9, 0.5, 0.9, 0.5}, 3), (std::vector<std::size_t>{1, 3, 2}));
  EXPECT_EQ(select_top_k({1, 1, 1, 1}, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(select_top_k({1, 2}, 3), std::invalid_argument);
  EXPECT_THROW(select_top_k({1, 2}, 0), std::invalid_argument);
}

TEST(PositiveMlp, OutputsStayStrictlyPositiveThroughTraining) {
  nn::ParamSet<double> ps(4);
  auto mlp = PositiveMlp<double>::make(ps, "m", 7, 3, 5);
  std::mt19937_64 rng(4);
  nn::Adam<double> adam(ps, {.lr = 0.5, .clip_norm = 0});
  for (int step = 0; step < 30; ++step) {
    auto g = ag::constant(random_tensor({3, 7}, rng, 0.0, 1.0));
    if (step % 5 == 0) g->value.fill(0.0);
    auto out = mlp(g);
    ASSERT_EQ(out->shape(), (Shape{3, 3}));
    for (double v : out->value.data) ASSERT_GT(v, 0.0) << "step " << step;
    // push every entry down as hard as possible
    adam.zero_grad();
    ag::backward(ag::sum(out));
    adam.step();
  }
  const auto zero_in = mlp(ag::constant(Tensor<double>({3, 7})));
  for (double v : zero_in->value.data) EXPECT_GT(v, 0.0);
}

TEST(Estimate, RejectsBadRequests) {
  const auto& c = clusters();
  ProposedNode none{"x", {}};
  EXPECT_THROW(estimate_unseen_road(c.model, c.existing.network, c.data, none, std::nullopt),
               std::invalid_argument);
  EstimateOptions opt;
  opt.k = 30;
  EXPECT_THROW(estimate_unseen_road(c.model, c.existing.network, c.data,
                                    proposal(c.fixture.held_out_links()), std::nullopt, opt),
               std::invalid_argument);
  EXPECT_THROW(estimate_unseen_road(c.model, c.existing.network, c.data,
                                    proposal(c.fixture.held_out_links()),
                                    std::vector<double>(10, 1.0)),
               std::invalid_argument);
}

TEST(Estimate, GraphRowsAndSquareMapsHaveExpectedShapes) {
  const auto& c = clusters();
  EstimateOptions opt;
  opt.train.epochs = 1;
  opt.train.max_steps = 2;
  auto r = estimate_unseen_road<double>(c.model, c.existing.network, c.data,
                                        proposal(c.fixture.held_out_links()), std::nullopt, opt);
  EXPECT_TRUE(r.pseudo_target);
  ASSERT_EQ(r.selected.size(), 10u);
  EXPECT_EQ(r.scores.size(), 21u);
  EXPECT_EQ(r.data.g_r.rows(), 10);
  EXPECT_EQ(r.data.g_r.cols(), 21);
  EXPECT_GE(r.data.g_c.minCoeff(), 0.0);
  for (std::size_t i = 0; i < 10; ++i)
    EXPECT_EQ(r.data.g_r.row(static_cast<Eigen::Index>(i)),
              c.data.conn.a_r.row(static_cast<Eigen::Index>(r.selected[i])));
  ag::NoGradGuard ng;
  for (const auto& sq : {r.estimator.square_r(r.data.g_r), r.estimator.square_c(r.data.g_c)}) {
    EXPECT_EQ(sq->shape(), (Shape{10, 10}));
    for (double v : sq->value.data) EXPECT_GT(v, 0.0);
  }
  auto s = r.series(r.data.split.val_end, r.data.split.total);
  EXPECT_EQ(s.size() % 12, 0u);
  EXPECT_FALSE(s.empty());
}

TEST(Estimate, ComparableToDirectFitOnHeldOutNode) {
  const auto& c = clusters();
  ModelConfig cfg;
  cfg.t_w = 1;
  cfg.embed = 16;
  cfg.n_blocks = 1;
  cfg.heads_fusion_rd = cfg.heads_fusion_rw = 2;
  cfg.heads_spatial = cfg.heads_temporal = 4;
  TrainOptions to;
  to.epochs = 1000;
  to.max_steps = 300;
  to.patience = 0;
  to.seed = 3;
  to.lr = 3e-3;
  to.cosine_decay = true;
  auto data = prepare_data(c.existing, cfg);
  const auto series = c.fixture.held_out_series();
  EstimateOptions eo;
  eo.train = to;
  auto est = estimate_unseen_road<float>(c.model, c.existing.network, data,
                                         proposal(c.fixture.held_out_links()), series, eo);
  EXPECT_FALSE(est.pseudo_target);
  const double est_mae = evaluate_estimator(est.estimator, est.data, est.data.test.starts).mae_all;

  Dataset own;
  own.network = RoadNetwork({"held_out"}, {});
  own.panel = c.existing.panel;
  own.panel.values = Eigen::Map<const Eigen::RowVectorXd>(series.data(), static_cast<Eigen::Index>(series.size()));
  own.panel.refresh_zero_variance();
  auto direct = train_short_term<float>(own, cfg, to);
  ASSERT_EQ(direct.data.test.starts, est.data.test.starts);
  const double direct_mae = evaluate(direct.model, direct.data, direct.data.test.starts).mae_all;
  EXPECT_LE(est_mae, 1.5 * direct_mae) << "estimated " << est_mae << " direct " << direct_mae;
}
