#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "opt/checks/oracles.hpp"
#include "opt/opt_module.hpp"

using namespace opt;

namespace {

Matrix random_matrix(int r, int c, double scale, Rng& rng) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

Mask all_true(int n) { return Mask::Constant(n, true); }

OptConfig small_config() {
  OptConfig c;
  c.d_in = 4;
  c.d_x = 6;
  c.n_prototypes = 3;
  c.n_layers = 2;
  c.d_ff = 5;
  return c;
}

std::vector<PrototypeWeights> random_prototypes(int n, int d, Rng& rng) {
  std::vector<PrototypeWeights> out;
  for (int i = 0; i < n; ++i) out.push_back({random_matrix(d, d, 0.5, rng), random_matrix(d, d, 0.5, rng), random_matrix(d, d, 0.5, rng)});
  return out;
}

}  // namespace

TEST(EmbedEntities, ZeroInputAndBiasGiveZero) {
  Rng rng(1);
  const EntityEmbedding e = embed_entities(Matrix::Zero(3, 4), all_true(3), random_matrix(4, 32, 1.0, rng), Vector::Zero(32));
  EXPECT_EQ(e.x.rows(), 3);
  EXPECT_EQ(e.x.cols(), 32);
  EXPECT_EQ(e.x.cwiseAbs().maxCoeff(), 0.0);
}

TEST(EmbedEntities, RowPermutationPermutesOutput) {
  Rng rng(2);
  const Matrix raw = random_matrix(4, 4, 1.0, rng);
  const Matrix w = random_matrix(4, 6, 1.0, rng);
  const Vector b = random_matrix(6, 1, 1.0, rng);
  const std::vector<int> perm{2, 0, 3, 1};
  Matrix permuted(4, 4);
  for (int i = 0; i < 4; ++i) permuted.row(i) = raw.row(perm[static_cast<std::size_t>(i)]);
  const Matrix a = embed_entities(raw, all_true(4), w, b).x;
  const Matrix p = embed_entities(permuted, all_true(4), w, b).x;
  for (int i = 0; i < 4; ++i) EXPECT_EQ(p.row(i), a.row(perm[static_cast<std::size_t>(i)]));
}

TEST(EmbedEntities, PaddedRowsZeroAndErrors) {
  Rng rng(3);
  Mask mask(3);
  mask << true, false, true;
  const EntityEmbedding e = embed_entities(Matrix::Ones(3, 4), mask, random_matrix(4, 6, 1.0, rng), Vector::Ones(6));
  EXPECT_EQ(e.x.row(1).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(e.x.row(0).maxCoeff(), 0.0);
  EXPECT_THROW(embed_entities(Matrix::Ones(3, 5), all_true(3), Matrix::Ones(4, 6), Vector::Ones(6)), invalid_input);
  EXPECT_THROW(embed_entities(Matrix::Ones(3, 4), all_true(2), Matrix::Ones(4, 6), Vector::Ones(6)), invalid_input);
}

TEST(ProjectQkv, ZeroAndIdentityCases) {
  Rng rng(4);
  const Matrix w = random_matrix(5, 5, 1.0, rng);
  const Qkv zero = project_qkv({Matrix::Zero(3, 5), all_true(3)}, {w, w, w});
  EXPECT_EQ(zero.q.cwiseAbs().maxCoeff() + zero.k.cwiseAbs().maxCoeff() + zero.v.cwiseAbs().maxCoeff(), 0.0);
  const Matrix x = random_matrix(3, 5, 1.0, rng);
  const Matrix id = Matrix::Identity(5, 5);
  const Qkv same = project_qkv({x, all_true(3)}, {id, id, id});
  EXPECT_EQ(same.q, x);
  EXPECT_EQ(same.k, x);
  EXPECT_EQ(same.v, x);
}

TEST(ProjectQkv, MatchesTripleLoopOracle) {
  Rng rng(5);
  const Matrix x = random_matrix(7, 8, 1.0, rng);
  const PrototypeWeights w{random_matrix(8, 8, 1.0, rng), random_matrix(8, 8, 1.0, rng), random_matrix(8, 8, 1.0, rng)};
  const Qkv r = project_qkv({x, all_true(7)}, w);
  EXPECT_LE((r.q - oracle::naive_matmul(x, w.wq)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((r.k - oracle::naive_matmul(x, w.wk)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((r.v - oracle::naive_matmul(x, w.wv)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(project_qkv({x, all_true(7)}, {Matrix::Identity(5, 5), w.wk, w.wv}), invalid_input);
}

TEST(Disentangle, SingleEntityGivesUnitAttention) {
  Rng rng(6);
  const auto ws = random_prototypes(3, 4, rng);
  const PrototypeSet s = disentangle({random_matrix(1, 4, 1.0, rng), all_true(1)}, ws, Activation::sparsemax);
  ASSERT_EQ(s.attention.size(), 3u);
  for (const auto& p : s.attention) EXPECT_NEAR(p(0, 0), 1.0, 1e-12);
}

TEST(Disentangle, ScaledLogitMarginTwoGivesOneHotRow) {
  // q = k rows chosen so the scaled logits of entity 0 are (2, 0).
  Matrix x(2, 1);
  x << std::sqrt(2.0), 0.0;
  const Matrix id = Matrix::Identity(1, 1);
  const std::vector<PrototypeWeights> ws{{id, id, id}};
  const PrototypeSet s = disentangle({x, all_true(2)}, ws, Activation::sparsemax);
  EXPECT_EQ(s.attention[0](0, 0), 1.0);
  EXPECT_EQ(s.attention[0](0, 1), 0.0);
}

TEST(Disentangle, IdenticalRowsGiveUniformAttention) {
  Rng rng(7);
  const Matrix row = random_matrix(1, 5, 1.0, rng);
  const Matrix x = row.replicate(4, 1);
  const auto ws = random_prototypes(2, 5, rng);
  for (Activation act : {Activation::sparsemax, Activation::softmax}) {
    const PrototypeSet s = disentangle({x, all_true(4)}, ws, act);
    for (const auto& p : s.attention) EXPECT_LE((p.array() - 0.25).abs().maxCoeff(), 1e-12);
  }
}

TEST(Disentangle, RowsOnSimplexAndPaddingExcluded) {
  Rng rng(8);
  Mask mask(5);
  mask << true, true, false, true, false;
  Matrix x = random_matrix(5, 6, 2.0, rng);
  x.row(2).setZero();
  x.row(4).setZero();
  const auto ws = random_prototypes(3, 6, rng);
  for (Activation act : {Activation::sparsemax, Activation::softmax}) {
    const PrototypeSet s = disentangle({x, mask}, ws, act);
    for (const auto& p : s.attention) {
      EXPECT_GE(p.minCoeff(), 0.0);
      for (int i = 0; i < 5; ++i) {
        if (mask[i]) {
          EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-9);
          EXPECT_EQ(p(i, 2), 0.0);
          EXPECT_EQ(p(i, 4), 0.0);
        } else {
          EXPECT_EQ(p.row(i).cwiseAbs().maxCoeff(), 0.0);
        }
      }
    }
  }
  EXPECT_THROW(disentangle({x, Mask::Constant(5, false)}, ws, Activation::sparsemax), invalid_input);
}

TEST(Disentangle, DominantColumnsSparsemaxOneHotSoftmaxDense) {
  const int d = 4;
  const Matrix x = Matrix::Identity(d, d) * 3.0;
  const Matrix id = Matrix::Identity(d, d);
  const std::vector<PrototypeWeights> ws{{id, id, id}};
  const Matrix sp = disentangle({x, all_true(d)}, ws, Activation::sparsemax).attention[0];
  const Matrix so = disentangle({x, all_true(d)}, ws, Activation::softmax).attention[0];
  for (int i = 0; i < d; ++i) {
    EXPECT_EQ((sp.row(i).array() != 0.0).count(), 1);
    EXPECT_EQ((so.row(i).array() == 0.0).count(), 0);
  }
}

TEST(CdLoss, ClosedFormCases) {
  EXPECT_EQ(cd_loss(std::vector<Matrix>{Matrix{{0.3, -1.2, 2.0}}}, all_true(1)), 0.0);
  const std::vector<Matrix> same(2, Matrix{{0.4, 0.7}, {-0.1, 0.2}});
  EXPECT_NEAR(cd_loss(same, all_true(2)), std::log(2.0), 1e-12);
  const std::vector<Matrix> hand{Matrix{{1.0, 0.0}}, Matrix{{0.0, 1.0}}};
  EXPECT_NEAR(cd_loss(hand, all_true(1)), std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(cd_loss(hand, all_true(1)), 0.313262, 1e-6);
}

TEST(CdLoss, InvariantToPrototypeRelabeling) {
  Rng rng(9);
  std::vector<Matrix> pv;
  for (int n = 0; n < 4; ++n) pv.push_back(random_matrix(3, 5, 1.0, rng));
  const double base = cd_loss(pv, all_true(3));
  std::vector<Matrix> shuffled{pv[2], pv[0], pv[3], pv[1]};
  EXPECT_NEAR(cd_loss(shuffled, all_true(3)), base, 1e-12);
}

TEST(CdLoss, MaskedEntitiesIgnored) {
  Rng rng(10);
  std::vector<Matrix> pv{random_matrix(3, 4, 1.0, rng), random_matrix(3, 4, 1.0, rng)};
  Mask mask(3);
  mask << true, false, true;
  const double masked = cd_loss(pv, mask);
  std::vector<Matrix> changed = pv;
  changed[0].row(1).setConstant(100.0);
  EXPECT_NEAR(cd_loss(changed, mask), masked, 1e-12);
}

TEST(CdLoss, GradientDescentReducesOffDiagonalSimilarity) {
  Rng rng(11);
  const int N = 4, M = 2, d = 8;
  ad::SiteLayout sites{1, M, std::vector<std::uint8_t>(M, 1)};
  Matrix pv = random_matrix(M, N * d, 0.5, rng);
  auto off_diagonal = [&](const Matrix& x) {
    double s = 0.0;
    int c = 0;
    for (int e = 0; e < M; ++e) {
      for (int n = 0; n < N; ++n) {
        for (int i = 0; i < N; ++i) {
          if (i == n) continue;
          s += x.block(e, n * d, 1, d).cwiseProduct(x.block(e, i * d, 1, d)).sum();
          ++c;
        }
      }
    }
    return s / c;
  };
  const double before = off_diagonal(pv);
  for (int step = 0; step < 500; ++step) {
    ad::Graph<double> g(true);
    auto leaf = g.leaf(pv, 0);
    auto loss = ad::cd_loss(leaf, sites, N, d);
    g.backward(loss);
    pv -= 0.05 * g.grad(leaf);
  }
  EXPECT_LT(off_diagonal(pv), before);
}

TEST(AggregateWeights, ZeroMapIsUniform) {
  Rng rng(12);
  const Aggregation a = aggregate_weights({random_matrix(3, 5, 1.0, rng), all_true(3)}, Matrix::Zero(5, 4), Vector::Zero(4));
  for (int n = 0; n < 4; ++n) EXPECT_NEAR(a.blend[n], 0.25, 1e-15);
}

TEST(AggregateWeights, PermutationInvariantAndMaskedMean) {
  Rng rng(13);
  const Matrix x = random_matrix(3, 4, 1.0, rng);
  const Matrix w = random_matrix(4, 3, 1.0, rng);
  const Vector b = random_matrix(3, 1, 1.0, rng);
  Matrix swapped = x;
  swapped.row(0) = x.row(2);
  swapped.row(2) = x.row(0);
  const Aggregation a = aggregate_weights({x, all_true(3)}, w, b);
  const Aggregation s = aggregate_weights({swapped, all_true(3)}, w, b);
  EXPECT_LE((a.pooled - s.pooled).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((a.blend.values() - s.blend.values()).cwiseAbs().maxCoeff(), 1e-12);

  Matrix hand(3, 2);
  hand << 1.0, 2.0, 100.0, 100.0, 3.0, 6.0;
  Mask mask(3);
  mask << true, false, true;
  const Aggregation m = aggregate_weights({hand, mask}, Matrix::Zero(2, 2), Vector::Zero(2));
  EXPECT_NEAR(m.pooled[0], 2.0, 1e-15);
  EXPECT_NEAR(m.pooled[1], 4.0, 1e-15);
  EXPECT_THROW(aggregate_weights({hand, Mask::Constant(3, false)}, Matrix::Zero(2, 2), Vector::Zero(2)), invalid_input);
}

TEST(Restructure, ClosedFormCases) {
  PrototypeSet s;
  s.values = {Matrix{{1.0, 0.0}}, Matrix{{0.0, 1.0}}};
  s.attention = {Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
  const Matrix y = restructure(s, ProbabilityVector::from(Vector{{0.25, 0.75}}));
  EXPECT_NEAR(y(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(y(0, 1), 0.75, 1e-15);
  EXPECT_EQ(restructure(s, ProbabilityVector::from(Vector{{0.0, 1.0}})), s.values[1]);

  Rng rng(14);
  const Matrix common = random_matrix(3, 4, 1.0, rng);
  PrototypeSet same;
  same.values = {common, common, common};
  same.attention.assign(3, Matrix::Identity(3, 3));
  EXPECT_LE((restructure(same, ProbabilityVector::from(Vector{{0.2, 0.5, 0.3}})) - common).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(restructure(same, ProbabilityVector::from(Vector{{0.5, 0.5}})), invalid_input);
}

TEST(OptLayer, ZeroPathsGiveResidualIdentity) {
  Rng rng(15);
  const int d = 5, N = 2;
  OptLayerWeights w;
  for (int n = 0; n < N; ++n) w.prototypes.push_back({random_matrix(d, d, 1.0, rng), random_matrix(d, d, 1.0, rng), Matrix::Zero(d, d)});
  w.agg_w = random_matrix(d, N, 1.0, rng);
  w.agg_b = Vector::Zero(N);
  w.ff_in_w = random_matrix(d, 3, 1.0, rng);
  w.ff_in_b = Vector::Zero(3);
  w.ff_out_w = Matrix::Zero(3, d);
  w.ff_out_b = Vector::Zero(d);
  const Matrix x = random_matrix(4, d, 1.0, rng);
  const OptLayerResult r = opt_layer_forward({x, all_true(4)}, w, Activation::sparsemax);
  EXPECT_EQ(r.y.x, x);
}

TEST(OptLayer, PaddedRowsStayZero) {
  Rng rng(16);
  const OptConfig cfg = small_config();
  ParamSet ps;
  const OptStackLayout l = add_opt_stack(ps, "s", cfg, rng);
  Mask mask(4);
  mask << true, false, true, false;
  Matrix raw = random_matrix(4, cfg.d_in, 1.0, rng);
  EntityEmbedding x = embed_entities(raw, mask, ps.value(l.embed.w), ps.value(l.embed.b).row(0).transpose());
  for (const auto& layer : l.layers) x = opt_layer_forward(x, layer_weights(ps, layer, cfg), cfg.activation).y;
  EXPECT_EQ(x.x.row(1).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(x.x.row(3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(OptStack, BatchedRouteMatchesLayerByLayerComposition) {
  Rng rng(17);
  for (Activation act : {Activation::sparsemax, Activation::softmax}) {
    OptConfig cfg = small_config();
    cfg.activation = act;
    ParamSet ps;
    const OptStackLayout l = add_opt_stack(ps, "s", cfg, rng);
    const int S = 3, M = 4;
    const std::vector<std::uint8_t> flags{1, 1, 1, 1, 1, 0, 1, 0, 1, 0, 0, 0};
    ad::SiteLayout sites{S, M, flags};
    const Matrix raw = random_matrix(S * M, cfg.d_in, 2.0, rng);

    ad::Graph<double> g(false);
    Binder<double> bind(g, ps, false);
    const auto trace = opt_stack_forward(bind, l, cfg, g.constant(raw), sites);

    for (int s = 0; s < S; ++s) {
      Mask mask(M);
      for (int e = 0; e < M; ++e) mask[e] = flags[static_cast<std::size_t>(s * M + e)] != 0;
      EntityEmbedding x = embed_entities(raw.middleRows(s * M, M), mask, ps.value(l.embed.w),
                                         ps.value(l.embed.b).row(0).transpose());
      for (std::size_t k = 0; k < l.layers.size(); ++k) {
        const OptLayerResult r = opt_layer_forward(x, layer_weights(ps, l.layers[k], cfg), act);
        const Matrix& p_all = *g.aux(trace.prototype_values[k]);
        for (int n = 0; n < cfg.n_prototypes; ++n) {
          const Matrix p = p_all.block(s * M, n * M, M, M);
          EXPECT_LE((p - r.prototypes.attention[static_cast<std::size_t>(n)]).cwiseAbs().maxCoeff(), 1e-12);
        }
        EXPECT_LE((trace.blend[k].value().row(s).transpose() - r.blend.values()).cwiseAbs().maxCoeff(), 1e-12);
        x = r.y;
      }
      EXPECT_LE((trace.output.value().middleRows(s * M, M) - x.x).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(OptStack, BatchedCdMatchesReferenceAverage) {
  Rng rng(18);
  const OptConfig cfg = small_config();
  ParamSet ps;
  const OptStackLayout l = add_opt_stack(ps, "s", cfg, rng);
  const int S = 2, M = 3;
  ad::SiteLayout sites{S, M, std::vector<std::uint8_t>(S * M, 1)};
  const Matrix raw = random_matrix(S * M, cfg.d_in, 1.0, rng);
  ad::Graph<double> g(false);
  Binder<double> bind(g, ps, false);
  const auto trace = opt_stack_forward(bind, l, cfg, g.constant(raw), sites);
  std::vector<double> first_layer;
  for (int s = 0; s < S; ++s) {
    const EntityEmbedding x = embed_entities(raw.middleRows(s * M, M), all_true(M), ps.value(l.embed.w),
                                             ps.value(l.embed.b).row(0).transpose());
    first_layer.push_back(opt_layer_forward(x, layer_weights(ps, l.layers[0], cfg), cfg.activation).cd);
  }
  EXPECT_NEAR(trace.cd[0].scalar(), (first_layer[0] + first_layer[1]) / 2.0, 1e-12);
}

TEST(OptLayer, MacCountScalesBetweenLinearAndQuadratic) {
  Rng rng(19);
  const int d = 32;
  OptConfig cfg;
  cfg.d_in = 8;
  cfg.d_x = d;
  ParamSet ps;
  const OptStackLayout l = add_opt_stack(ps, "s", cfg, rng);
  const OptLayerWeights w = layer_weights(ps, l.layers[0], cfg);
  for (int M : {4, 8, 16, 32}) {
    MacCounter small, large;
    opt_layer_forward({random_matrix(M, d, 1.0, rng), all_true(M)}, w, cfg.activation, false, &small);
    opt_layer_forward({random_matrix(2 * M, d, 1.0, rng), all_true(2 * M)}, w, cfg.activation, false, &large);
    const double ratio = static_cast<double>(large.macs) / static_cast<double>(small.macs);
    EXPECT_GE(ratio, 2.0) << "M=" << M;
    EXPECT_LE(ratio, 4.0) << "M=" << M;
  }
}

TEST(CmiLoss, ClosedFormCases) {
  const Vector h = Vector::Zero(3);
  const Vector pooled = Vector::Zero(2);
  const Matrix w = Matrix::Zero(5, 4);
  const Vector b = Vector::Zero(4);
  const auto one_hot = ProbabilityVector::from(Vector{{0.0, 1.0, 0.0, 0.0}});
  EXPECT_NEAR(cmi_loss(one_hot, h, pooled, w, b), std::log(4.0), 1e-12);
  const auto uniform = ProbabilityVector::from(Vector::Constant(4, 0.25));
  EXPECT_NEAR(cmi_loss(uniform, h, pooled, w, b), 0.0, 1e-15);
  EXPECT_THROW(cmi_loss(uniform, h, pooled, Matrix::Zero(4, 4), b), invalid_input);
}

TEST(CmiLoss, PsiGradientNonzeroWhenDistributionsDiffer) {
  const Vector h{{0.5, -0.3}};
  const Vector pooled{{1.0}};
  const auto blend = ProbabilityVector::from(Vector{{0.7, 0.2, 0.1}});
  Matrix w = Matrix::Zero(3, 3);
  Vector b = Vector::Zero(3);
  const double step = 1e-5;
  double max_abs = 0.0;
  for (int i = 0; i < 3; ++i) {
    Vector bp = b, bm = b;
    bp[i] += step;
    bm[i] -= step;
    max_abs = std::max(max_abs, std::abs(cmi_loss(blend, h, pooled, w, bp) - cmi_loss(blend, h, pooled, w, bm)) / (2 * step));
  }
  EXPECT_GT(max_abs, 1e-3);
}
