#include "csnet/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "csnet/knn.hpp"
#include "csnet/rng.hpp"

using csnet::AttnVariant;
using csnet::CsNetModel;
using csnet::Graph;
using csnet::LossConfig;
using csnet::LossVariant;
using csnet::PointCloud;
using csnet::Rng;
using csnet::Tensor;
using csnet::TopkConfig;

namespace {

using G = Graph<double>;
using T = Tensor<double>;
using Model = CsNetModel<double>;

PointCloud random_cloud(Rng& rng, std::size_t n) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({static_cast<float>(rng.uniform(-1, 1)),
                        static_cast<float>(rng.uniform(-1, 1)),
                        static_cast<float>(rng.uniform(-1, 1))});
  return c;
}

Model small_model(std::uint64_t seed, AttnVariant variant = AttnVariant::oa) {
  TopkConfig cfg;
  cfg.max_iters = 2000;
  return Model(4, 8, variant, cfg, seed);  // g=4, c=8
}

void zero_entry(Model& m, std::size_t idx) {
  std::fill(m.params.entries[idx].value.begin(), m.params.entries[idx].value.end(),
            0.0);
}

PointCloud permuted(const PointCloud& cloud, const std::vector<std::size_t>& perm) {
  PointCloud out;
  out.points.resize(cloud.points.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    out.points[perm[i]] = cloud.points[i];
  return out;
}

}  // namespace

TEST(Grouping, SelfIsNeighborZeroWithZeroOffset) {
  Rng rng(3);
  PointCloud c = random_cloud(rng, 20);
  auto [f_group, idx] = csnet::grouping_layer<double>(c, 5);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(idx[i * 5], i);
    for (int d = 0; d < 3; ++d) EXPECT_EQ(f_group.values()[(i * 5) * 3 + d], 0.0);
  }
}

TEST(Grouping, TwoPointCloud) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}};
  auto [f_group, idx] = csnet::grouping_layer<double>(c, 2);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 1, 0}));
  // Offsets for point 0: self then (1,0,0).
  EXPECT_EQ(f_group.values()[3], 1.0);
  EXPECT_EQ(f_group.values()[4], 0.0);
}

TEST(Grouping, MatchesBruteForceOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    PointCloud c = random_cloud(rng, 64);
    if (trial % 4 == 0)
      for (std::size_t i = 0; i + 1 < c.size(); i += 5) c.points[i + 1] = c.points[i];
    const auto got = csnet::knn::neighbors(c, 8);
    // Brute-force all-pairs (distance, index) sort.
    for (std::size_t i = 0; i < c.size(); ++i) {
      std::vector<std::pair<double, std::size_t>> cands;
      for (std::size_t j = 0; j < c.size(); ++j) {
        if (j == i) continue;
        const double dx = double(c.points[i][0]) - c.points[j][0];
        const double dy = double(c.points[i][1]) - c.points[j][1];
        const double dz = double(c.points[i][2]) - c.points[j][2];
        cands.emplace_back(dx * dx + dy * dy + dz * dz, j);
      }
      std::sort(cands.begin(), cands.end());
      EXPECT_EQ(got[i * 8], i);
      for (std::size_t t = 0; t < 7; ++t)
        EXPECT_EQ(got[i * 8 + 1 + t], cands[t].second) << "i=" << i;
    }
  }
}

TEST(Grouping, GridPathMatchesBruteForce) {
  Rng rng(7);
  for (std::size_t n : {600u, 1500u}) {
    PointCloud c = random_cloud(rng, n);
    for (std::size_t i = 0; i + 1 < n; i += 9) c.points[i + 1] = c.points[i];
    const auto grid = csnet::knn::neighbors(c, 16, /*force_brute=*/false);
    const auto brute = csnet::knn::neighbors(c, 16, /*force_brute=*/true);
    ASSERT_EQ(grid, brute) << "n=" << n;
  }
}

TEST(Grouping, GExceedingNRejected) {
  Rng rng(9);
  PointCloud c = random_cloud(rng, 4);
  EXPECT_THROW(csnet::knn::neighbors(c, 5), std::invalid_argument);
}

TEST(FeatureEmbed, OutputShape) {
  Rng rng(11);
  PointCloud c = random_cloud(rng, 30);
  Model m = small_model(1);
  G g;
  auto p = m.params.bind(g, false);
  T f = csnet::feature_embed(g, c, m, p);
  EXPECT_EQ(f.shape(), (csnet::Shape{30, 8}));
}

TEST(FeatureEmbed, PermutationEquivariant) {
  Rng rng(13);
  PointCloud c = random_cloud(rng, 24);
  Model m = small_model(2);
  G g1, g2;
  auto p1 = m.params.bind(g1, false);
  auto p2 = m.params.bind(g2, false);
  T base = csnet::feature_embed(g1, c, m, p1);
  std::vector<std::size_t> perm(c.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  T moved = csnet::feature_embed(g2, permuted(c, perm), m, p2);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t d = 0; d < 8; ++d)
      EXPECT_NEAR(moved.values()[perm[i] * 8 + d], base.values()[i * 8 + d], 1e-5);
}

TEST(FeatureEmbed, DuplicatedPointsShareFeatures) {
  Rng rng(17);
  PointCloud c = random_cloud(rng, 12);
  PointCloud doubled = c;
  for (const auto& pt : c.points) doubled.points.push_back(pt);
  Model m = small_model(3);
  G g;
  auto p = m.params.bind(g, false);
  T f = csnet::feature_embed(g, doubled, m, p);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t d = 0; d < 8; ++d)
      EXPECT_NEAR(f.values()[i * 8 + d], f.values()[(i + 12) * 8 + d], 1e-9);
}

TEST(SelfAttention, SinglePointReturnsValueRow) {
  Rng rng(19);
  Model m = small_model(4);
  G g;
  auto p = m.params.bind(g, false);
  std::vector<double> row(8);
  for (auto& v : row) v = rng.uniform(-1, 1);
  T f_in = G::constant({1, 8}, row);
  T f_sa = csnet::self_attention(g, f_in, p[m.blocks[0].wq], p[m.blocks[0].wk],
                                 p[m.blocks[0].wv]);
  T v = g.matmul(f_in, p[m.blocks[0].wv]);
  for (std::size_t i = 0; i < 8; ++i)
    EXPECT_NEAR(f_sa.values()[i], v.values()[i], 1e-12);
}

TEST(SelfAttention, MatchesReferenceComposition) {
  Rng rng(23);
  const std::size_t n = 6, c = 8;
  Model m = small_model(5);
  G g;
  auto p = m.params.bind(g, false);
  PointCloud cloud = random_cloud(rng, n);
  T f_in = csnet::feature_embed(g, cloud, m, p);
  T f_sa = csnet::self_attention(g, f_in, p[m.blocks[1].wq], p[m.blocks[1].wk],
                                 p[m.blocks[1].wv]);

  // Independent reference pipeline on raw values.
  const auto matmul_ref = [](const std::vector<double>& a, std::size_t ra,
                             std::size_t ca, const std::vector<double>& b,
                             std::size_t cb) {
    std::vector<double> out(ra * cb, 0.0);
    for (std::size_t i = 0; i < ra; ++i)
      for (std::size_t kk = 0; kk < ca; ++kk)
        for (std::size_t j = 0; j < cb; ++j)
          out[i * cb + j] += a[i * ca + kk] * b[kk * cb + j];
    return out;
  };
  const auto& fin = f_in.values();
  const auto q = matmul_ref(fin, n, c, m.params.entries[m.blocks[1].wq].value, c);
  const auto kk = matmul_ref(fin, n, c, m.params.entries[m.blocks[1].wk].value, c);
  const auto vv = matmul_ref(fin, n, c, m.params.entries[m.blocks[1].wv].value, c);
  std::vector<double> attn(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < c; ++d) dot += q[i * c + d] * kk[j * c + d];
      attn[i * n + j] = dot / std::sqrt(double(c));
      mx = std::max(mx, attn[i * n + j]);
    }
    double sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      attn[i * n + j] = std::exp(attn[i * n + j] - mx);
      sum += attn[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) attn[i * n + j] /= sum;
  }
  const auto expected = matmul_ref(attn, n, n, vv, c);
  for (std::size_t i = 0; i < n * c; ++i)
    EXPECT_NEAR(f_sa.values()[i], expected[i], 1e-5);
}

TEST(OffsetAttention, ZeroGammaIsIdentity) {
  Rng rng(29);
  Model m = small_model(6);
  zero_entry(m, m.blocks[0].g1_w);
  zero_entry(m, m.blocks[0].g2_w);
  G g;
  auto p = m.params.bind(g, false);
  PointCloud cloud = random_cloud(rng, 10);
  T f_in = csnet::feature_embed(g, cloud, m, p);
  T out = csnet::offset_attention(g, f_in, m, 0, p);
  for (std::size_t i = 0; i < f_in.size(); ++i)
    EXPECT_EQ(out.values()[i], f_in.values()[i]);
}

TEST(OffsetAttention, VariantsDifferOnlyInGammaArgument) {
  Rng rng(31);
  // With W_value zeroed, f_sa = 0: oa reduces to gamma(f_in) + f_in and sa
  // to gamma(0) + f_in.
  Model oa = small_model(7, AttnVariant::oa);
  zero_entry(oa, oa.blocks[0].wv);
  Model sa = small_model(7, AttnVariant::sa);
  zero_entry(sa, sa.blocks[0].wv);
  Model mlp = small_model(7, AttnVariant::mlp);

  PointCloud cloud = random_cloud(rng, 9);
  G g1, g2, g3;
  auto p1 = oa.params.bind(g1, false);
  auto p2 = sa.params.bind(g2, false);
  auto p3 = mlp.params.bind(g3, false);
  T f1 = csnet::feature_embed(g1, cloud, oa, p1);
  T out_oa = csnet::offset_attention(g1, f1, oa, 0, p1);
  T f2 = csnet::feature_embed(g2, cloud, sa, p2);
  T out_sa = csnet::offset_attention(g2, f2, sa, 0, p2);
  T f3 = csnet::feature_embed(g3, cloud, mlp, p3);
  T out_mlp = csnet::offset_attention(g3, f3, mlp, 0, p3);

  // oa with f_sa = 0 equals the mlp bypass exactly.
  for (std::size_t i = 0; i < out_oa.size(); ++i)
    EXPECT_NEAR(out_oa.values()[i], out_mlp.values()[i], 1e-12);
  // sa with f_sa = 0 applies gamma to zeros: bias-only shift plus f_in.
  G gb;
  auto pb = sa.params.bind(gb, false);
  T zeros = G::constant({9, 8}, std::vector<double>(72, 0.0));
  T bias_path = csnet::nn::dense(
      gb, csnet::nn::dense(gb, zeros, pb[sa.blocks[0].g1_w], pb[sa.blocks[0].g1_b], true),
      pb[sa.blocks[0].g2_w], pb[sa.blocks[0].g2_b], false);
  for (std::size_t i = 0; i < out_sa.size(); ++i)
    EXPECT_NEAR(out_sa.values()[i], f2.values()[i] + bias_path.values()[i], 1e-12);
}

TEST(OffsetAttention, ResidualGradientIncludesIdentityPath) {
  Rng rng(37);
  Model m = small_model(8);
  const auto f = [&](G& g, const T& x) {
    auto p = m.params.bind(g, false);
    T out = csnet::offset_attention(g, x, m, 0, p);
    T w = G::constant(out.shape(), [&] {
      std::vector<double> v(out.size());
      Rng wr(99);
      for (auto& e : v) e = wr.uniform(-1, 1);
      return v;
    }());
    return g.scalar_mul(
        g.reduce_mean(g.reduce_mean(g.mul(out, w), 1), 0), double(out.size()));
  };
  std::vector<double> x0(6 * 8);
  for (auto& v : x0) v = rng.uniform(-1, 1);
  auto report = csnet::finite_diff_check<double>(f, G::constant({6, 8}, x0), 1e-5, 1e-4);
  EXPECT_TRUE(report.pass) << report.max_rel_err;
}

TEST(Cascade, WidthIsThreeC) {
  Rng rng(41);
  Model m = small_model(9);
  PointCloud cloud = random_cloud(rng, 14);
  G g;
  auto p = m.params.bind(g, false);
  T f = csnet::feature_embed(g, cloud, m, p);
  T cat = csnet::cascade_attention(g, f, m, p);
  EXPECT_EQ(cat.shape(), (csnet::Shape{14, 24}));
}

TEST(Cascade, AllZeroBlocksYieldThreeCopies) {
  Rng rng(43);
  Model m = small_model(10);
  for (auto& blk : m.blocks) {
    zero_entry(m, blk.wq);
    zero_entry(m, blk.wk);
    zero_entry(m, blk.wv);
    zero_entry(m, blk.g1_w);
    zero_entry(m, blk.g2_w);
  }
  PointCloud cloud = random_cloud(rng, 11);
  G g;
  auto p = m.params.bind(g, false);
  T f = csnet::feature_embed(g, cloud, m, p);
  T cat = csnet::cascade_attention(g, f, m, p);
  for (std::size_t i = 0; i < 11; ++i)
    for (std::size_t d = 0; d < 8; ++d) {
      const double base = f.values()[i * 8 + d];
      EXPECT_EQ(cat.values()[i * 24 + d], base);
      EXPECT_EQ(cat.values()[i * 24 + 8 + d], base);
      EXPECT_EQ(cat.values()[i * 24 + 16 + d], base);
    }
}

TEST(Cascade, PermutationEquivariant) {
  Rng rng(47);
  Model m = small_model(11);
  PointCloud cloud = random_cloud(rng, 16);
  std::vector<std::size_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  G g1, g2;
  auto p1 = m.params.bind(g1, false);
  auto p2 = m.params.bind(g2, false);
  T base = csnet::cascade_attention(g1, csnet::feature_embed(g1, cloud, m, p1), m, p1);
  T moved = csnet::cascade_attention(
      g2, csnet::feature_embed(g2, permuted(cloud, perm), m, p2), m, p2);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t d = 0; d < 24; ++d)
      EXPECT_NEAR(moved.values()[perm[i] * 24 + d], base.values()[i * 24 + d], 1e-5);
}

TEST(Score, PointwiseSharedWeights) {
  Rng rng(53);
  Model m = small_model(12);
  PointCloud cloud = random_cloud(rng, 10);
  G g;
  auto p = m.params.bind(g, false);
  T f = csnet::cascade_attention(g, csnet::feature_embed(g, cloud, m, p), m, p);
  T s = csnet::score(g, f, m, p);
  EXPECT_EQ(s.shape(), (csnet::Shape{10}));

  // Identical feature rows receive identical scores.
  std::vector<double> dup(f.values());
  for (std::size_t d = 0; d < 24; ++d) dup[3 * 24 + d] = dup[7 * 24 + d];
  G g2;
  auto p2 = m.params.bind(g2, false);
  T s2 = csnet::score(g2, G::constant({10, 24}, dup), m, p2);
  EXPECT_EQ(s2.values()[3], s2.values()[7]);
}

TEST(ForwardSample, DistinctIndicesAtSeveralRatios) {
  Rng rng(59);
  PointCloud cloud = random_cloud(rng, 64);
  Model m = small_model(13);
  for (std::size_t k : {32u, 16u, 8u}) {
    G g;
    auto p = m.params.bind(g, false);
    auto out = csnet::forward_sample(g, cloud, m, p, k);
    std::set<std::size_t> unique(out.sample.indices.begin(), out.sample.indices.end());
    EXPECT_EQ(unique.size(), k);
    EXPECT_EQ(out.sample.method_tag, "csnet");
    for (std::size_t j = 0; j < k; ++j)
      EXPECT_EQ(out.sample.sampled.points[j], cloud.points[out.sample.indices[j]]);
    for (double gate : out.gates.values()) EXPECT_EQ(gate, 1.0);
  }
}

TEST(ForwardSample, PermutationInvariantSelectionSet) {
  Rng rng(61);
  PointCloud cloud = random_cloud(rng, 40);
  Model m = small_model(14);
  std::vector<std::size_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  G g1, g2;
  auto p1 = m.params.bind(g1, false);
  auto p2 = m.params.bind(g2, false);
  auto base = csnet::forward_sample(g1, cloud, m, p1, 10);
  auto moved = csnet::forward_sample(g2, permuted(cloud, perm), m, p2, 10);
  std::set<std::array<float, 3>> a, b;
  for (const auto& pt : base.sample.sampled.points) a.insert(pt);
  for (const auto& pt : moved.sample.sampled.points) b.insert(pt);
  EXPECT_EQ(a, b);
}

TEST(JointLoss, SubsetEmdIsZero) {
  Rng rng(67);
  PointCloud cloud = random_cloud(rng, 20);
  Model m = small_model(15);
  G g;
  auto p = m.params.bind(g, false);
  auto out = csnet::forward_sample(g, cloud, m, p, 5);
  LossConfig cfg;
  cfg.alpha = 1;
  cfg.beta = 0;
  cfg.variant = LossVariant::emd;
  T total = csnet::joint_loss(g, out.sample, out.gates, cloud,
                              G::constant({1}, {123.0}), cfg);
  EXPECT_EQ(total.scalar(), 0.0);
}

TEST(JointLoss, BetaOnlyEqualsTaskExactly) {
  Rng rng(71);
  PointCloud cloud = random_cloud(rng, 20);
  Model m = small_model(16);
  G g;
  auto p = m.params.bind(g, false);
  auto out = csnet::forward_sample(g, cloud, m, p, 5);
  LossConfig cfg;
  cfg.alpha = 0;
  cfg.beta = 1;
  T total = csnet::joint_loss(g, out.sample, out.gates, cloud,
                              G::constant({1}, {0.625}), cfg);
  EXPECT_EQ(total.scalar(), 0.625);
}

TEST(JointLoss, ChamferVariantDrivesScoreGradients) {
  Rng rng(73);
  PointCloud cloud = random_cloud(rng, 24);
  Model m = small_model(17);
  G g;
  auto p = m.params.bind(g, true);
  auto out = csnet::forward_sample(g, cloud, m, p, 6);
  LossConfig cfg;
  cfg.alpha = 1;
  cfg.beta = 0;
  cfg.variant = LossVariant::cd;
  T total = csnet::joint_loss(g, out.sample, out.gates, cloud,
                              G::constant({1}, {0.0}), cfg);
  EXPECT_GT(total.scalar(), 0.0);  // coverage term is positive for subsets
  g.backward(total);
  const auto* grad = g.gradient(out.scores);
  ASSERT_NE(grad, nullptr);
  double norm = 0;
  for (double v : *grad) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(JointLoss, InvalidConfigRejected) {
  LossConfig cfg;
  cfg.alpha = 0;
  cfg.beta = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Model, ConstructionIsSeedDeterministic) {
  Model a = small_model(20), b = small_model(20), c = small_model(21);
  ASSERT_EQ(a.params.entries.size(), b.params.entries.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.entries.size(); ++i) {
    EXPECT_EQ(a.params.entries[i].value, b.params.entries[i].value);
    any_diff |= a.params.entries[i].value != c.params.entries[i].value;
  }
  EXPECT_TRUE(any_diff);
}
