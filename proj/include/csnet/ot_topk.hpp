#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "csnet/pointcloud.hpp"
#include "csnet/samplers.hpp"
#include "csnet/tensor.hpp"

namespace csnet {

struct TopkConfig {
  double epsilon = 0.01;  // entropic regularization
  int max_iters = 200;
  double tol = 1e-6;  // marginal-violation stopping threshold
  static constexpr int support_size = 2;

  void validate() const {
    if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be > 0");
    if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
    if (!(tol > 0)) throw std::invalid_argument("tol must be > 0");
  }
};

// Entropic transport plan between the n points (uniform mass 1/n) and the
// two-point selection support with masses [k/n, (n-k)/n].
template <class Real>
struct TransportPlan {
  Tensor<Real> gamma;  // n x 2, differentiable w.r.t. the cost
  std::vector<Real> mu;
  std::vector<Real> nu;
  int iterations_used = 0;
  bool converged = false;
};

template <class Real>
struct SoftIndicator {
  Tensor<Real> omega;  // length n, entries in [0, 1], sums to k
};

// Cost of transporting a score to the selected/discarded anchors {1, 0}:
// scores are min-max normalized to [0, 1] and the cost is the squared
// distance to each anchor. A constant score vector maps to 0.5 everywhere.
// The normalization stays on the graph so gradients reach the raw scores.
template <class Real>
Tensor<Real> build_cost(Graph<Real>& g, const Tensor<Real>& scores) {
  if (scores.rank() != 1 || scores.size() < 2)
    throw std::invalid_argument("build_cost expects at least 2 scores, got " +
                                shape_str(scores.shape()));
  for (Real v : scores.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("build_cost: non-finite score");
  const std::size_t n = scores.size();
  Tensor<Real> shat;
  const Real lo = *std::min_element(scores.values().begin(), scores.values().end());
  const Real hi = *std::max_element(scores.values().begin(), scores.values().end());
  if (static_cast<double>(hi - lo) < 1e-12) {
    shat = Graph<Real>::constant({n}, std::vector<Real>(n, Real(0.5)));
  } else {
    Tensor<Real> smax = g.reduce_max(scores, 0);
    Tensor<Real> smin = g.scalar_mul(g.reduce_max(g.scalar_mul(scores, Real(-1)), 0), Real(-1));
    Tensor<Real> inv_range = g.recip(g.sub(smax, smin));
    shat = g.mul(g.sub(scores, g.replicate(smin, 0, n)),
                 g.replicate(inv_range, 0, n));
  }
  Tensor<Real> to_selected = g.sub(shat, Real(1));
  Tensor<Real> c0 = g.mul(to_selected, to_selected);
  Tensor<Real> c1 = g.mul(shat, shat);
  return g.concat({g.reshape(c0, {n, 1}), g.reshape(c1, {n, 1})}, 1);
}

// Log-domain Sinkhorn scaling of exp(-C/eps) to the marginals, with every
// iteration recorded on the graph (unrolled) so the plan is differentiable
// w.r.t. the cost. Stops once both marginal violations are within tol;
// hitting max_iters reports converged=false instead of erroring.
template <class Real>
TransportPlan<Real> sinkhorn(Graph<Real>& g, const Tensor<Real>& cost,
                             std::size_t k, const TopkConfig& cfg) {
  cfg.validate();
  if (cost.rank() != 2 || cost.dim(1) != 2)
    throw std::invalid_argument("sinkhorn expects an n x 2 cost, got " +
                                shape_str(cost.shape()));
  const std::size_t n = cost.dim(0);
  if (k < 1 || k >= n)
    throw std::invalid_argument("sinkhorn requires 1 <= k < n, got k=" +
                                std::to_string(k) + " n=" + std::to_string(n));
  for (Real v : cost.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("sinkhorn: non-finite cost entry");

  const Real eps = static_cast<Real>(cfg.epsilon);
  const Real log_mu = std::log(Real(1) / static_cast<Real>(n));
  const Real nu0 = static_cast<Real>(k) / static_cast<Real>(n);
  const Real nu1 = static_cast<Real>(n - k) / static_cast<Real>(n);

  Tensor<Real> log_kernel = g.scalar_mul(cost, Real(-1) / eps);
  Tensor<Real> log_mu_col = Graph<Real>::constant({n, 1}, std::vector<Real>(n, log_mu));
  Tensor<Real> log_nu_row =
      Graph<Real>::constant({1, 2}, {std::log(nu0), std::log(nu1)});
  Tensor<Real> u = Graph<Real>::constant({n, 1}, std::vector<Real>(n, Real(0)));
  // Warm-start the column potentials at the dual gap between the k-th and
  // (k+1)-th cheapest "selected" entries. With saturated sigmoids (small
  // eps) cold-started alternating scaling needs tens of thousands of
  // rounds; starting at the crossover leaves only the fractional boundary
  // mass to settle. The start is a constant: gradients flow through the
  // recorded iterations themselves.
  Real delta0;
  {
    std::vector<Real> z(n);
    for (std::size_t i = 0; i < n; ++i)
      z[i] = (cost[2 * i + 1] - cost[2 * i]) / eps;
    std::nth_element(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(k - 1),
                     z.end(), std::greater<Real>());
    const Real zk = z[k - 1];
    const Real zk1 = *std::max_element(z.begin() + static_cast<std::ptrdiff_t>(k),
                                       z.end());
    delta0 = -(zk + zk1) / Real(2);
  }
  Tensor<Real> v =
      Graph<Real>::constant({1, 2}, {delta0 / Real(2), -delta0 / Real(2)});

  TransportPlan<Real> plan;
  plan.mu.assign(n, Real(1) / static_cast<Real>(n));
  plan.nu = {nu0, nu1};

  const auto row_violation = [&](const Tensor<Real>& uu, const Tensor<Real>& vv) {
    // max_i n * | sum_j Gamma_ij - 1/n |, evaluated on values only. The
    // factor n keeps the bound in indicator units, so Omega = n * Gamma
    // stays within tol of [0, 1] at convergence.
    const auto& lk = log_kernel.values();
    const Real v0 = vv[0], v1 = vv[1];
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double row = std::exp(double(lk[2 * i] + uu[i] + v0)) +
                         std::exp(double(lk[2 * i + 1] + uu[i] + v1));
      worst = std::max(worst, std::abs(row - 1.0 / static_cast<double>(n)));
    }
    return worst * static_cast<double>(n);
  };
  const auto col_violation = [&](const Tensor<Real>& uu, const Tensor<Real>& vv) {
    const auto& lk = log_kernel.values();
    double c0 = 0, c1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      c0 += std::exp(double(lk[2 * i] + uu[i] + vv[0]));
      c1 += std::exp(double(lk[2 * i + 1] + uu[i] + vv[1]));
    }
    return std::max(std::abs(c0 - double(nu0)), std::abs(c1 - double(nu1)));
  };

  for (int it = 0; it < cfg.max_iters; ++it) {
    // u <- log mu - LSE_j(logK + v); rows become exact.
    Tensor<Real> with_v = g.add(log_kernel, g.replicate(v, 0, n));
    u = g.sub(log_mu_col, g.reshape(g.logsumexp(with_v, 1), {n, 1}));
    // v <- log nu - LSE_i(logK + u); columns become exact.
    Tensor<Real> with_u = g.add(log_kernel, g.replicate(u, 1, 2));
    v = g.sub(log_nu_row, g.reshape(g.logsumexp(with_u, 0), {1, 2}));
    plan.iterations_used = it + 1;
    if (row_violation(u, v) <= cfg.tol && col_violation(u, v) <= cfg.tol) {
      plan.converged = true;
      break;
    }
  }
  Tensor<Real> log_gamma =
      g.add(g.add(log_kernel, g.replicate(u, 1, 2)), g.replicate(v, 0, n));
  plan.gamma = g.exp(log_gamma);
  return plan;
}

// Omega^eps = n * Gamma * [1, 0]^T, the smoothed Top-k indicator.
template <class Real>
SoftIndicator<Real> soft_indicator(Graph<Real>& g, const TransportPlan<Real>& plan) {
  const std::size_t n = plan.gamma.dim(0);
  Tensor<Real> first_col =
      g.matmul(plan.gamma, Graph<Real>::constant({2, 1}, {Real(1), Real(0)}));
  SoftIndicator<Real> ind;
  ind.omega = g.reshape(g.scalar_mul(first_col, static_cast<Real>(n)), {n});
  return ind;
}

// Indices of the k largest scores, ties to the lower index, returned in
// descending-score order. Purely discrete: nothing is recorded.
template <class Real>
std::vector<std::size_t> hard_topk(const std::vector<Real>& scores, std::size_t k) {
  if (k < 1 || k > scores.size())
    throw std::invalid_argument("hard_topk: k=" + std::to_string(k) +
                                " out of range for n=" +
                                std::to_string(scores.size()));
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k),
                    idx.end(), [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

template <class Real>
struct SelectResult {
  SampleResult sample;
  Tensor<Real> gates;  // length k, forward-valued 1
  TransportPlan<Real> plan;
  Tensor<Real> omega;  // length n
};

// Hard Top-k selection with straight-through gates: the sampled cloud is
// always an exact duplicate-free subset, while each gate's backward taps
// d/dOmega^eps at its selected index and flows through the unrolled
// Sinkhorn iterations back to the raw scores.
template <class Real>
SelectResult<Real> straight_through_select(Graph<Real>& g, const PointCloud& cloud,
                                           const Tensor<Real>& scores,
                                           std::size_t k, const TopkConfig& cfg) {
  if (scores.size() != cloud.size())
    throw std::invalid_argument("straight_through_select: score count " +
                                std::to_string(scores.size()) +
                                " does not match cloud size " +
                                std::to_string(cloud.size()));
  const std::size_t n = cloud.size();
  if (k < 1 || k >= n)
    throw std::invalid_argument("straight_through_select requires 1 <= k < n");
  SelectResult<Real> out;
  auto indices = hard_topk(scores.values(), k);
  Tensor<Real> cost = build_cost(g, scores);
  out.plan = sinkhorn(g, cost, k, cfg);
  out.omega = soft_indicator(g, out.plan).omega;
  Tensor<Real> omega_sel =
      g.reshape(g.gather_rows(g.reshape(out.omega, {n, 1}), indices), {k});
  out.gates = g.straight_through_ones(omega_sel);
  out.sample = detail::make_result(cloud, std::move(indices), "topk");
  return out;
}

}  // namespace csnet
