#include "csnet/ot_topk.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "csnet/rng.hpp"

using csnet::Graph;
using csnet::PointCloud;
using csnet::Rng;
using csnet::Tensor;
using csnet::TopkConfig;
using csnet::TransportPlan;

namespace {

using G = Graph<double>;
using T = Tensor<double>;

std::vector<double> random_scores(Rng& rng, std::size_t n, double lo = -1,
                                  double hi = 1) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<double> omega_for(const std::vector<double>& scores, std::size_t k,
                              const TopkConfig& cfg) {
  G g;
  T s = G::constant({scores.size()}, scores);
  T cost = csnet::build_cost(g, s);
  TransportPlan<double> plan = csnet::sinkhorn(g, cost, k, cfg);
  return csnet::soft_indicator(g, plan).omega.values();
}

PointCloud random_cloud(Rng& rng, std::size_t n, bool duplicates) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({static_cast<float>(rng.uniform(-1, 1)),
                        static_cast<float>(rng.uniform(-1, 1)),
                        static_cast<float>(rng.uniform(-1, 1))});
  if (duplicates)
    for (std::size_t i = 0; i + 1 < n; i += 3) c.points[i + 1] = c.points[i];
  return c;
}

}  // namespace

TEST(BuildCost, ConstantScoresMapToHalf) {
  G g;
  T cost = csnet::build_cost(g, G::constant({5}, std::vector<double>(5, 3.7)));
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(cost.values()[2 * i], 0.25);
    EXPECT_DOUBLE_EQ(cost.values()[2 * i + 1], 0.25);
  }
}

TEST(BuildCost, AnchorEndpoints) {
  G g;
  T cost = csnet::build_cost(g, G::constant({2}, {1.0, 0.0}));
  // Normalized max: row [0, 1]; normalized min: row [1, 0].
  EXPECT_DOUBLE_EQ(cost.values()[0], 0.0);
  EXPECT_DOUBLE_EQ(cost.values()[1], 1.0);
  EXPECT_DOUBLE_EQ(cost.values()[2], 1.0);
  EXPECT_DOUBLE_EQ(cost.values()[3], 0.0);
}

TEST(BuildCost, SelectedColumnCostDecreasesInRawScore) {
  Rng rng(3);
  auto scores = random_scores(rng, 16);
  std::sort(scores.begin(), scores.end());
  G g;
  T cost = csnet::build_cost(g, G::constant({16}, scores));
  for (std::size_t i = 0; i + 1 < 16; ++i)
    EXPECT_GT(cost.values()[2 * i], cost.values()[2 * (i + 1)]);
}

TEST(BuildCost, TooFewScoresRejected) {
  G g;
  EXPECT_THROW(csnet::build_cost(g, G::constant({1}, {1.0})),
               std::invalid_argument);
}

TEST(Sinkhorn, ConvergedPlansSatisfyMarginals) {
  Rng rng(5);
  TopkConfig cfg;
  cfg.max_iters = 20000;  // the default 200 reports converged=false instead
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 4 + rng.uniform_index(60);
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    G g;
    T cost = csnet::build_cost(g, G::constant({n}, random_scores(rng, n)));
    TransportPlan<double> plan = csnet::sinkhorn(g, cost, k, cfg);
    ASSERT_TRUE(plan.converged) << "n=" << n << " k=" << k;
    const auto& gamma = plan.gamma.values();
    for (double entry : gamma) EXPECT_GE(entry, 0.0);
    double col0 = 0, col1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(gamma[2 * i] + gamma[2 * i + 1], 1.0 / double(n), 1e-6);
      col0 += gamma[2 * i];
      col1 += gamma[2 * i + 1];
    }
    EXPECT_NEAR(col0, double(k) / double(n), 1e-6);
    EXPECT_NEAR(col1, double(n - k) / double(n), 1e-6);
  }
}

TEST(Sinkhorn, LargeEpsilonGivesProductMeasure) {
  Rng rng(7);
  const std::size_t n = 24, k = 6;
  TopkConfig cfg;
  cfg.epsilon = 1e6;
  G g;
  T cost = csnet::build_cost(g, G::constant({n}, random_scores(rng, n)));
  TransportPlan<double> plan = csnet::sinkhorn(g, cost, k, cfg);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_NEAR(plan.gamma.values()[2 * i], (1.0 / n) * (double(k) / n), 1e-4);
    EXPECT_NEAR(plan.gamma.values()[2 * i + 1], (1.0 / n) * (double(n - k) / n),
                1e-4);
  }
}

TEST(Sinkhorn, PlanDifferentiableWrtCost) {
  Rng rng(9);
  const std::size_t n = 12, k = 4;
  TopkConfig cfg;
  cfg.epsilon = 0.1;
  cfg.tol = 1e-12;  // keep iteration-count flips far below the FD probe
  cfg.max_iters = 5000;
  const auto weights = random_scores(rng, 2 * n);
  // Probe with a fixed linear functional of the plan.
  const auto f = [&](G& g, const T& cost) {
    TransportPlan<double> plan = csnet::sinkhorn(g, cost, k, cfg);
    T w = G::constant({n, 2}, weights);
    T weighted = g.mul(plan.gamma, w);
    return g.scalar_mul(g.reduce_mean(g.reduce_mean(weighted, 1), 0),
                        double(2 * n));
  };
  std::vector<double> base = random_scores(rng, 2 * n, 0.05, 1.0);
  csnet::FdReport report =
      csnet::finite_diff_check<double>(f, G::constant({n, 2}, base), 1e-5, 1e-4);
  EXPECT_TRUE(report.pass) << report.max_rel_err;
}

TEST(Sinkhorn, NonFiniteCostRejected) {
  G g;
  std::vector<double> bad = {0.1, 0.2, std::nan(""), 0.4};
  EXPECT_THROW(csnet::sinkhorn(g, G::constant({2, 2}, bad), 1, TopkConfig{}),
               std::invalid_argument);
}

TEST(Sinkhorn, HittingIterationCapReportsNotConverged) {
  // Three scores cluster at the selection boundary (within a few eps of
  // each other), so the fractional mass needs many equilibration rounds.
  TopkConfig cfg;
  cfg.max_iters = 1;
  cfg.tol = 1e-9;
  G g;
  T cost = csnet::build_cost(
      g, G::constant({8}, {1.0, 0.8, 0.79, 0.785, 0.3, 0.2, 0.1, 0.0}));
  TransportPlan<double> plan = csnet::sinkhorn(g, cost, 2, cfg);
  EXPECT_FALSE(plan.converged);
  EXPECT_EQ(plan.iterations_used, 1);
}

TEST(SoftIndicator, SumsToK) {
  Rng rng(13);
  TopkConfig cfg;
  cfg.max_iters = 20000;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 8 + rng.uniform_index(120);
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    const auto omega = omega_for(random_scores(rng, n), k, cfg);
    double sum = 0;
    for (double w : omega) {
      sum += w;
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0 + 1e-6);
    }
    EXPECT_NEAR(sum, double(k), double(n) * cfg.tol);
  }
}

TEST(SoftIndicator, SmallEpsilonAgreesWithSortOracle) {
  Rng rng(17);
  TopkConfig cfg;
  cfg.epsilon = 1e-4;
  const std::size_t n = 64, k = 16;
  auto scores = random_scores(rng, n);
  const auto omega = omega_for(scores, k, cfg);
  const auto by_omega = csnet::hard_topk(omega, k);
  const auto by_score = csnet::hard_topk(scores, k);
  EXPECT_EQ(std::set<std::size_t>(by_omega.begin(), by_omega.end()),
            std::set<std::size_t>(by_score.begin(), by_score.end()));
}

TEST(SoftIndicator, EqualScoresGetEqualMass) {
  Rng rng(19);
  std::vector<double> scores = random_scores(rng, 10);
  scores[3] = scores[7] = 0.42;
  const auto omega = omega_for(scores, 4, TopkConfig{});
  EXPECT_NEAR(omega[3], omega[7], 1e-8);
}

TEST(HardTopk, DirectOrdering) {
  EXPECT_EQ(csnet::hard_topk(std::vector<double>{0.9, 0.1, 0.8, 0.2}, 2),
            (std::vector<std::size_t>{0, 2}));
}

TEST(HardTopk, TiesBreakToLowerIndex) {
  EXPECT_EQ(csnet::hard_topk(std::vector<double>(6, 1.0), 3),
            (std::vector<std::size_t>{0, 1, 2}));
}

TEST(HardTopk, AgreesWithFullSortOracle) {
  Rng rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(64);
    const std::size_t k = 1 + rng.uniform_index(n);
    auto scores = random_scores(rng, n);
    if (trial % 5 == 0 && n > 2) scores[1] = scores[0];  // exercise ties
    const auto got = csnet::hard_topk(scores, k);
    std::vector<std::size_t> expect(n);
    std::iota(expect.begin(), expect.end(), std::size_t{0});
    std::stable_sort(expect.begin(), expect.end(), [&](std::size_t a, std::size_t b) {
      return scores[a] > scores[b];
    });
    expect.resize(k);
    EXPECT_EQ(got, expect) << "trial " << trial;
  }
}

TEST(HardTopk, OutOfRangeRejected) {
  EXPECT_THROW(csnet::hard_topk(std::vector<double>{1.0}, 2), std::invalid_argument);
}

TEST(StraightThrough, ForwardIsExactHardSubset) {
  Rng rng(29);
  PointCloud cloud = random_cloud(rng, 40, false);
  G g;
  T scores = g.leaf({40}, random_scores(rng, 40), true);
  auto sel = csnet::straight_through_select(g, cloud, scores, 10, TopkConfig{});
  const auto expect = csnet::hard_topk(scores.values(), 10);
  EXPECT_EQ(sel.sample.indices, expect);
  for (std::size_t j = 0; j < 10; ++j)
    EXPECT_EQ(sel.sample.sampled.points[j], cloud.points[expect[j]]);
  for (double gate : sel.gates.values()) EXPECT_EQ(gate, 1.0);
}

TEST(StraightThrough, GateGradientMatchesSoftSurrogate) {
  Rng rng(31);
  const std::size_t n = 24, k = 6;
  PointCloud cloud = random_cloud(rng, n, false);
  TopkConfig cfg;
  cfg.epsilon = 0.1;
  cfg.tol = 1e-12;
  cfg.max_iters = 5000;
  const auto base = random_scores(rng, n);
  std::vector<double> costs(k);
  for (auto& c : costs) c = rng.uniform(0.5, 2.0);  // fixed positive c_j

  // Analytic gradient through the gates.
  G g;
  T scores = g.leaf({n}, base, true);
  auto sel = csnet::straight_through_select(g, cloud, scores, k, cfg);
  T gate_loss = g.scalar_mul(
      g.reduce_mean(g.mul(sel.gates, G::constant({k}, costs)), 0), double(k));
  g.backward(gate_loss);
  ASSERT_NE(g.gradient(scores), nullptr);
  const std::vector<double> analytic = *g.gradient(scores);

  // Finite differences of the surrogate the gates claim to represent:
  // sum_j Omega[sel_j] * c_j with the selected indices frozen.
  const auto frozen = sel.sample.indices;
  const auto surrogate = [&](const std::vector<double>& s) {
    const auto omega = omega_for(s, k, cfg);
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) total += omega[frozen[j]] * costs[j];
    return total;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < n; ++i) {
    auto plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (surrogate(plus) - surrogate(minus)) / (2 * h);
    EXPECT_NEAR(analytic[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "i=" << i;
  }
  // Raising a selected point's raw score raises its indicator mass, so the
  // loss gradient w.r.t. that score is positive for positive c_j (and the
  // descent direction on -c_j losses is negative).
  for (std::size_t j = 0; j < k; ++j) {
    if (frozen[j] == csnet::hard_topk(base, 1)[0]) continue;  // max is pinned at 1
    EXPECT_GT(analytic[frozen[j]], 0.0) << "selected " << frozen[j];
  }
}

TEST(Invariants, PermutationEquivariance) {
  Rng rng(37);
  TopkConfig cfg;
  cfg.max_iters = 2000;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 8 + rng.uniform_index(40);
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    const auto scores = random_scores(rng, n);
    const auto omega = omega_for(scores, k, cfg);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    std::vector<double> permuted(n);
    for (std::size_t i = 0; i < n; ++i) permuted[perm[i]] = scores[i];
    const auto omega_p = omega_for(permuted, k, cfg);
    for (std::size_t i = 0; i < n; ++i)
      EXPECT_NEAR(omega_p[perm[i]], omega[i], 1e-12);
  }
}

TEST(Invariants, RaisingAScoreDoesNotLowerItsMass) {
  Rng rng(41);
  TopkConfig cfg;
  cfg.max_iters = 20000;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6 + rng.uniform_index(26);
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    auto scores = random_scores(rng, n);
    const std::size_t i = rng.uniform_index(n);
    const auto before = omega_for(scores, k, cfg);
    scores[i] += 0.07;
    const auto after = omega_for(scores, k, cfg);
    EXPECT_GE(after[i], before[i] - 1e-9);
  }
}

TEST(Invariants, NoDuplicateIndicesOverManyTrials) {
  Rng rng(43);
  TopkConfig cfg;
  cfg.max_iters = 40;  // speed; convergence is not needed for selection
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 4 + rng.uniform_index(40);
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    PointCloud cloud = random_cloud(rng, n, trial % 2 == 0);
    G g;
    T scores = G::constant({n}, random_scores(rng, n));
    auto sel = csnet::straight_through_select(g, cloud, scores, k, cfg);
    std::set<std::size_t> unique(sel.sample.indices.begin(),
                                 sel.sample.indices.end());
    ASSERT_EQ(unique.size(), k) << "trial " << trial;
    for (std::size_t j = 0; j < k; ++j)
      ASSERT_EQ(sel.sample.sampled.points[j], cloud.points[sel.sample.indices[j]]);
  }
}
