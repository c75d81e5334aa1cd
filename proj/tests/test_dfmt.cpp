#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "test_util.hpp"
#include "tgpt/dfmt.hpp"

using namespace tgpt;
using namespace tgpt::testing;

namespace {

// Straightforward per-head attention: loops over heads, queries and keys.
std::vector<double> dense_attention_oracle(const Tensor<double>& x, std::size_t g_count,
                                           std::size_t len, std::size_t c, std::size_t heads,
                                           const Tensor<double>& wq, const Tensor<double>& wk,
                                           const Tensor<double>& wv, const Tensor<double>& wo) {
  const std::size_t d = c / heads;
  auto proj = [&](const Tensor<double>& w, std::size_t g, std::size_t t, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += x[(g * len + t) * c + k] * w[k * c + j];
    return s;
  };
  std::vector<double> out(g_count * len * c, 0.0);
  for (std::size_t g = 0; g < g_count; ++g) {
    std::vector<double> concat(len * c, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> logits(len);
        for (std::size_t j = 0; j < len; ++j) {
          double s = 0;
          for (std::size_t e = 0; e < d; ++e)
            s += proj(wq, g, i, h * d + e) * proj(wk, g, j, h * d + e);
          logits[j] = s / std::sqrt(static_cast<double>(d));
        }
        double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < len; ++j) acc += logits[j] / z * proj(wv, g, j, h * d + e);
          concat[i * c + h * d + e] = acc;
        }
      }
    }
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < c; ++k) s += concat[i * c + k] * wo[k * c + j];
        out[(g * len + i) * c + j] = s;
      }
  }
  return out;
}

Matrix eq6_oracle(const Matrix& a) {
  const Eigen::Index n = a.rows();
  Matrix b = a + Matrix::Identity(n, n);
  Matrix dinv = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) dinv(i, i) = 1.0 / std::sqrt(b.row(i).sum());
  return dinv * b * dinv;
}

ag::Var<double> var(const Matrix& m) { return ag::constant(to_tensor<double>(m)); }

}  // namespace

// ---------------------------------------------------------------------------
// Attention

TEST(MultiHeadAttention, SingleKeyIsLinearMap) {
  nn::ParamSet<double> ps(3);
  auto mha = nn::MultiHeadAttention<double>::make(ps, "a", 8, 2);
  std::mt19937_64 rng(1);
  auto x = ag::constant(random_tensor({5, 1, 8}, rng));
  auto out = mha(x, x);
  auto lin = ag::linear(ag::linear(x, mha.wv), mha.wo);
  for (std::size_t i = 0; i < out->numel(); ++i) EXPECT_NEAR(out->value[i], lin->value[i], 1e-12);
}

TEST(MultiHeadAttention, RowsSumToOne) {
  nn::ParamSet<double> ps(4);
  auto mha = nn::MultiHeadAttention<double>::make(ps, "a", 16, 4);
  std::mt19937_64 rng(2);
  auto x = ag::constant(random_tensor({3, 7, 16}, rng, -3, 3));
  Tensor<double> probs;
  mha(x, x, nullptr, &probs);
  ASSERT_EQ(probs.shape, (Shape{12, 7, 7}));
  for (std::size_t r = 0; r < 12 * 7; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += probs[r * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(MultiHeadAttention, MatchesDenseOracle) {
  nn::ParamSet<double> ps(5);
  auto mha = nn::MultiHeadAttention<double>::make(ps, "a", 4, 2);
  std::mt19937_64 rng(3);
  auto x = ag::constant(random_tensor({2, 3, 4}, rng));
  auto out = mha(x, x);
  auto ref = dense_attention_oracle(x->value, 2, 3, 4, 2, mha.wq->value, mha.wk->value,
                                    mha.wv->value, mha.wo->value);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out->value[i], ref[i], 1e-6);
}

TEST(MultiHeadAttention, RejectsIndivisibleHeads) {
  nn::ParamSet<double> ps(1);
  EXPECT_THROW(nn::MultiHeadAttention<double>::make(ps, "a", 10, 4), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Temporal fusion

TEST(TemporalFusion, ShapeContract) {
  ModelConfig cfg;
  cfg.n_nodes = 3;
  cfg.embed = 16;
  cfg.heads_spatial = cfg.heads_temporal = 4;
  DfmtModel<double> m(cfg, 1);
  std::mt19937_64 rng(1);
  auto xr = m.embed_input(ag::constant(random_tensor({2, 3, 12}, rng)));
  auto xd = m.embed_input(ag::constant(random_tensor({2, 3, 3}, rng)));
  auto xw = m.embed_input(ag::constant(random_tensor({2, 3, 3}, rng)));
  auto out = m.temporal_fusion(xr, xd, xw);
  EXPECT_EQ(out->shape(), (Shape{2, 3, 12, 16}));
}

TEST(TemporalFusion, ZeroFusionWeightsLeaveResidualPath) {
  auto cfg = tiny_config();
  DfmtModel<double> m(cfg, 2);
  m.params().find("fusion_w_rd")->value.fill(0);
  m.params().find("fusion_w_rw")->value.fill(0);
  std::mt19937_64 rng(2);
  auto xr = m.embed_input(ag::constant(random_tensor({2, 4, cfg.t_r}, rng)));
  auto xd = m.embed_input(ag::constant(random_tensor({2, 4, cfg.t_d}, rng)));
  auto xw = m.embed_input(ag::constant(random_tensor({2, 4, cfg.t_w}, rng)));
  auto out = m.temporal_fusion(xr, xd, xw);
  auto conv = ag::linear(xr, m.params().find("fusion_conv.w"), m.params().find("fusion_conv.b"));
  for (std::size_t i = 0; i < out->numel(); ++i) EXPECT_NEAR(out->value[i], conv->value[i], 1e-12);
}

TEST(TemporalFusion, WeeklyInputReceivesGradient) {
  auto cfg = tiny_config();
  DfmtModel<double> m(cfg, 3);
  std::mt19937_64 rng(3);
  auto xr = ag::constant(random_tensor({1, 4, cfg.t_r}, rng));
  auto xd = ag::constant(random_tensor({1, 4, cfg.t_d}, rng));
  auto xw = ag::parameter(random_tensor({1, 4, cfg.t_w}, rng));
  auto loss = [&] {
    return probe(m.temporal_fusion(m.embed_input(xr), m.embed_input(xd), m.embed_input(xw)));
  };
  auto rep = check_gradients({{"xw", xw}}, loss);
  EXPECT_LT(rep.max_rel_err, 1e-5) << rep.worst;
  double norm = 0;
  for (double g : xw->grad.data) norm += std::abs(g);
  EXPECT_GT(norm, 1e-8);
}

// ---------------------------------------------------------------------------
// Graphs

TEST(NormalizeAdjacency, Examples) {
  Matrix k2(2, 2);
  k2 << 0, 1, 1, 0;
  Matrix n2 = normalize_adjacency(k2);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(n2.data()[i], 0.5, 1e-15);
  Matrix n3 = normalize_adjacency(Matrix::Zero(3, 3));
  EXPECT_TRUE(n3.isApprox(Matrix::Identity(3, 3)));
}

TEST(NormalizeAdjacency, MatchesOracleAndSpectralBound) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> nd(1, 10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(nd(rng));
    Matrix a = random_graph(n, rng, 0.4, trial % 2 == 1);
    Matrix got = normalize_adjacency(a);
    EXPECT_LT((got - eq6_oracle(a)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((got - got.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(got)};
    EXPECT_LE(es.eigenvalues().cwiseAbs().maxCoeff(), 1.0 + 1e-6);
  }
}

TEST(FuseGraphs, EqualLogitsAverage) {
  std::mt19937_64 rng(12);
  Matrix ar = normalize_adjacency(random_graph(5, rng));
  Matrix ac = normalize_adjacency(random_graph(5, rng, 0.8, true));
  auto w = ag::constant(Tensor<double>({2}, 0.7));
  auto a = ag::fuse_graphs(var(ar), var(ac), w);
  Matrix expect = (ar + ac) / 2;
  for (Eigen::Index i = 0; i < 25; ++i) EXPECT_NEAR(a->value[i], expect.data()[i], 1e-15);
}

TEST(FuseGraphs, SaturatesTowardConnectivity) {
  std::mt19937_64 rng(13);
  Matrix ar = normalize_adjacency(random_graph(4, rng));
  Matrix ac = normalize_adjacency(random_graph(4, rng, 0.8, true));
  auto a = ag::fuse_graphs(var(ar), var(ac), ag::constant(Tensor<double>({2}, {60.0, 0.0})));
  for (Eigen::Index i = 0; i < 16; ++i) EXPECT_NEAR(a->value[i], ar.data()[i], 1e-12);
}

TEST(FuseGraphs, WeightsSumToOneAndConvex) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> nd(0, 3);
  auto cfg = tiny_config();
  DfmtModel<double> m(cfg, 1);
  for (int trial = 0; trial < 100; ++trial) {
    m.graph_logits()->value[0] = nd(rng);
    m.graph_logits()->value[1] = nd(rng);
    NormalizedGraphs g{normalize_adjacency(random_graph(4, rng)),
                       normalize_adjacency(random_graph(4, rng, 0.7, true))};
    auto f = m.fused_graph_snapshot(g);
    EXPECT_EQ(f.weight_r + f.weight_c, 1.0);
    for (Eigen::Index i = 0; i < 16; ++i) {
      const double lo = std::min(g.a_hat_r.data()[i], g.a_hat_c.data()[i]);
      const double hi = std::max(g.a_hat_r.data()[i], g.a_hat_c.data()[i]);
      EXPECT_GE(f.a.data()[i], lo - 1e-15);
      EXPECT_LE(f.a.data()[i], hi + 1e-15);
    }
  }
}

// ---------------------------------------------------------------------------
// Graph convolution

TEST(GraphConvolution, IdentityPropagationDoubles) {
  std::mt19937_64 rng(20);
  auto x = ag::constant(random_tensor({2, 3, 4, 5}, rng));
  auto eye = [](std::size_t n) { return ag::constant(to_tensor<double>(Matrix::Identity(n, n))); };
  auto out = graph_convolution<double>(x, eye(3), eye(5), eye(5));
  for (std::size_t i = 0; i < out->numel(); ++i) EXPECT_NEAR(out->value[i], 2 * x->value[i], 1e-15);
  auto zero = ag::constant(Tensor<double>({3, 3}, 0.0));
  out = graph_convolution<double>(x, zero, eye(5), eye(5));
  for (std::size_t i = 0; i < out->numel(); ++i) EXPECT_EQ(out->value[i], x->value[i]);
}

TEST(GraphConvolution, MatchesDenseOracle) {
  std::mt19937_64 rng(21);
  const std::size_t b = 2, n = 3, l = 2, c = 4;
  auto x = ag::constant(random_tensor({b, n, l, c}, rng));
  auto a = ag::constant(random_tensor({n, n}, rng, 0, 1));
  auto w1 = ag::constant(random_tensor({c, c}, rng));
  auto w2 = ag::constant(random_tensor({c, c}, rng));
  auto out = graph_convolution<double>(x, a, w1, w2);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < l; ++ti) {
      // X as [n, c] for this (b, t): out = A (A X W1) W2 + X
      Matrix xm(n, c), am(n, n), w1m(c, c), w2m(c, c);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) xm(i, k) = x->value[((bi * n + i) * l + ti) * c + k];
      for (std::size_t i = 0; i < n * n; ++i) am.data()[i] = a->value[i];
      for (std::size_t i = 0; i < c * c; ++i) {
        w1m.data()[i] = w1->value[i];
        w2m.data()[i] = w2->value[i];
      }
      Matrix ref = am * ((am * (xm * w1m)) * w2m) + xm;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          EXPECT_NEAR(out->value[((bi * n + i) * l + ti) * c + k], ref(i, k), 1e-6);
    }
}

TEST(GraphConvolution, NodePermutationEquivariant) {
  std::mt19937_64 rng(22);
  const std::size_t n = 5, c = 3;
  auto x = random_tensor({1, n, 2, c}, rng);
  Matrix a = normalize_adjacency(random_graph(n, rng));
  auto w1 = ag::constant(random_tensor({c, c}, rng));
  auto w2 = ag::constant(random_tensor({c, c}, rng));
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Matrix pa(n, n);
  auto px = x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      pa(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          a(static_cast<Eigen::Index>(perm[i]), static_cast<Eigen::Index>(perm[j]));
    std::copy_n(x.data.begin() + perm[i] * 2 * c, 2 * c, px.data.begin() + i * 2 * c);
  }
  auto out = graph_convolution<double>(ag::constant(x), var(a), w1, w2);
  auto pout = graph_convolution<double>(ag::constant(px), var(pa), w1, w2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 2 * c; ++k)
      EXPECT_NEAR(pout->value[i * 2 * c + k], out->value[perm[i] * 2 * c + k], 1e-12);
}

// ---------------------------------------------------------------------------
// Temporal embedding and blocks

TEST(TemporalEmbedding, OneHotAndDeterminism) {
  auto oh = one_hot_codes<double>({{0, 0}, {287, 6}}, 1, 2, 288);
  ASSERT_EQ(oh.shape, (Shape{1, 2, 295}));
  EXPECT_EQ(oh[0], 1.0);
  EXPECT_EQ(oh[288], 1.0);
  EXPECT_EQ(oh[295 + 287], 1.0);
  EXPECT_EQ(oh[295 + 288 + 6], 1.0);
  double total = 0;
  for (double v : oh.data) total += v;
  EXPECT_EQ(total, 4.0);

  auto cfg = tiny_config();
  DfmtModel<double> m(cfg, 4);
  auto e = m.temporal_embedding({{1, 2}, {3, 4}, {1, 2}}, 1, 3);
  ASSERT_EQ(e->shape(), (Shape{1, 3, cfg.embed}));
  for (std::size_t k = 0; k < cfg.embed; ++k) EXPECT_EQ(e->value[k], e->value[2 * cfg.embed + k]);
  EXPECT_THROW(m.temporal_embedding({{6, 0}}, 1, 1), std::out_of_range);
  EXPECT_THROW(m.temporal_embedding({{0, 7}}, 1, 1), std::out_of_range);
}

TEST(StBlock, PreservesShape) {
  auto cfg = tiny_config();
  cfg.n_blocks = 2;
  DfmtModel<double> m(cfg, 5);
  std::mt19937_64 rng(5);
  auto x = ag::constant(random_tensor({2, 4, cfg.t_r, cfg.embed}, rng));
  auto a = var(normalize_adjacency(random_graph(4, rng)));
  auto codes = m.temporal_embedding(std::vector<TimeCode>(2 * cfg.t_r, {1, 1}), 2, cfg.t_r);
  auto y = m.st_block(0, x, a, codes);
  EXPECT_EQ(y->shape(), x->shape());
  auto codes_p = m.temporal_embedding(std::vector<TimeCode>(2 * cfg.horizon, {1, 1}), 2, cfg.horizon);
  EXPECT_EQ(m.st_block(1, y, a, codes_p)->shape(), x->shape());
}

TEST(StBlock, SingleNodeSpatialAttentionIsLinear) {
  auto cfg = tiny_config();
  DfmtModel<double> m(cfg, 6);
  const auto& attn = m.blocks()[0].spatial_attn;
  std::mt19937_64 rng(6);
  // with one node, each (batch, time) group attends over a single key
  auto xs = ag::constant(random_tensor({6, 1, cfg.embed}, rng));
  auto bias = ag::constant(Tensor<double>({1, 1}, -3.0));
  auto out = attn(xs, xs, bias);
  auto lin = ag::linear(ag::linear(xs, attn.wv), attn.wo);
  for (std::size_t i = 0; i < out->numel(); ++i) EXPECT_NEAR(out->value[i], lin->value[i], 1e-12);
}

TEST(StBlock, SpatialAttentionNodeEquivariant) {
  nn::ParamSet<double> ps(7);
  auto attn = nn::MultiHeadAttention<double>::make(ps, "s", 8, 2);
  std::mt19937_64 rng(7);
  const std::size_t n = 4;
  auto x = random_tensor({3, n, 8}, rng);
  Matrix a = normalize_adjacency(random_graph(n, rng));
  std::vector<std::size_t> perm{2, 0, 3, 1};
  Matrix pa(n, n);
  auto px = x;
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.data.begin() + (g * n + perm[i]) * 8, 8, px.data.begin() + (g * n + i) * 8);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      pa(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          a(static_cast<Eigen::Index>(perm[i]), static_cast<Eigen::Index>(perm[j]));
  auto bias = [](const Matrix& m) { return ag::log_eps(var(m), 1e-6); };
  auto xv = ag::constant(x), pxv = ag::constant(px);
  auto out = attn(xv, xv, bias(a));
  auto pout = attn(pxv, pxv, bias(pa));
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < 8; ++k)
        EXPECT_NEAR(pout->value[(g * n + i) * 8 + k], out->value[(g * n + perm[i]) * 8 + k], 1e-12);
}

// ---------------------------------------------------------------------------
// End-to-end forward

TEST(DfmtForward, OutputShape) {
  ModelConfig cfg;
  cfg.n_nodes = 16;
  cfg.embed = 16;
  cfg.heads_spatial = cfg.heads_temporal = 4;
  cfg.q = 24;
  DfmtModel<float> m(cfg, 1);
  std::mt19937_64 rng(1);
  auto batch = random_batch(cfg, 2, rng);
  NormalizedGraphs g{normalize_adjacency(random_graph(16, rng)),
                     normalize_adjacency(random_graph(16, rng, 0.9, true))};
  auto y = m.forward(batch, g);
  EXPECT_EQ(y->shape(), (Shape{2, 16, 12}));
  EXPECT_TRUE(y->value.all_finite());
}

TEST(DfmtForward, DeterministicUnderSeed) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(2);
  auto batch = random_batch(cfg, 3, rng);
  NormalizedGraphs g{normalize_adjacency(random_graph(4, rng)),
                     normalize_adjacency(random_graph(4, rng, 0.9, true))};
  DfmtModel<double> m1(cfg, 42), m2(cfg, 42);
  auto a = m1.forward(batch, g);
  auto b = m2.forward(batch, g);
  EXPECT_EQ(a->value.data, b->value.data);
  EXPECT_EQ(m1.forward(batch, g)->value.data, a->value.data);
}

TEST(DfmtForward, NonFiniteInputNamesLayer) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(3);
  auto batch = random_batch(cfg, 1, rng);
  batch.x_d[0] = std::nan("");
  NormalizedGraphs g{Matrix::Identity(4, 4), Matrix::Identity(4, 4)};
  DfmtModel<double> m(cfg, 1);
  try {
    m.forward(batch, g);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.layer(), "input");
  }
  batch.x_d[0] = 0;
  m.params().find("gcn_w1")->value[0] = std::numeric_limits<double>::infinity();
  try {
    m.forward(batch, g);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.layer(), "graph_convolution");
  }
}

TEST(DfmtForward, FiniteDifferenceGradientsTinyConfig) {
  auto cfg = tiny_config();
  DfmtModel<double> m(cfg, 7);
  std::mt19937_64 rng(7);
  auto batch = random_batch(cfg, 2, rng);
  auto ar = var(normalize_adjacency(random_graph(4, rng)));
  auto ac = var(normalize_adjacency(random_graph(4, rng, 0.9, true)));
  m.graph_logits()->value[0] = 0.3;
  Tensor<double> target({2, 4, cfg.horizon}, batch.y);
  auto loss = [&] { return ag::l1_loss(m.forward(batch, ar, ac), target); };
  auto rep = check_gradients(m.params().items(), loss);
  EXPECT_EQ(rep.checked, m.params().total_elements());
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

TEST(DfmtForward, RandomInputsStayFinite) {
  auto cfg = tiny_config();
  cfg.n_blocks = 2;
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    DfmtModel<double> m(cfg, static_cast<std::uint64_t>(trial));
    auto batch = random_batch(cfg, 2, rng);
    NormalizedGraphs g{normalize_adjacency(random_graph(4, rng)),
                       normalize_adjacency(random_graph(4, rng, 0.5, true))};
    auto y = m.forward(batch, g);
    auto l = ag::l1_loss(y, Tensor<double>(y->shape(), batch.y));
    ag::backward(l);
    for (const auto& [name, p] : m.params().items())
      EXPECT_TRUE(p->grad.all_finite()) << name;
  }
}
