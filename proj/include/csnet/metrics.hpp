#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "csnet/pointcloud.hpp"

namespace csnet {

// Injective assignment of sampled points into the input cloud under
// squared Euclidean cost, with the per-point matched distances kept for
// gradient routing.
struct Matching {
  std::vector<std::size_t> assignment;  // sampled index j -> input index
  std::vector<double> squared_dists;    // ||p_j - input[assignment[j]]||^2
  double cost = 0.0;                    // mean matched squared distance
};

namespace detail {

inline double cloud_dist2(const std::array<float, 3>& a,
                          const std::array<float, 3>& b) {
  const double dx = double(a[0]) - b[0];
  const double dy = double(a[1]) - b[1];
  const double dz = double(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace detail

// Symmetric mean of nearest-neighbor squared distances, accumulated at
// 64-bit over the brute-force pairwise table.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty())
    throw std::invalid_argument("chamfer requires non-empty clouds");
  double sum_ab = 0;
  for (const auto& x : a.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& y : b.points) best = std::min(best, detail::cloud_dist2(x, y));
    sum_ab += best;
  }
  double sum_ba = 0;
  for (const auto& y : b.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& x : a.points) best = std::min(best, detail::cloud_dist2(y, x));
    sum_ba += best;
  }
  return sum_ab / static_cast<double>(a.points.size()) +
         sum_ba / static_cast<double>(b.points.size());
}

// Exact rectangular minimum-cost assignment (shortest augmenting path
// with dual potentials), k rows into n >= k columns.
inline Matching emd(const PointCloud& sampled, const PointCloud& input) {
  const std::size_t k = sampled.points.size();
  const std::size_t n = input.points.size();
  if (k == 0 || n == 0) throw std::invalid_argument("emd requires non-empty clouds");
  if (k > n)
    throw std::invalid_argument("emd: sampled cloud has " + std::to_string(k) +
                                " points, more than the input's " +
                                std::to_string(n));
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(k + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= k; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur =
            detail::cloud_dist2(sampled.points[i0 - 1], input.points[j - 1]) -
            u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Matching m;
  m.assignment.assign(k, 0);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) m.assignment[p[j] - 1] = j - 1;
  m.squared_dists.resize(k);
  double total = 0;
  for (std::size_t j = 0; j < k; ++j) {
    m.squared_dists[j] =
        detail::cloud_dist2(sampled.points[j], input.points[m.assignment[j]]);
    total += m.squared_dists[j];
  }
  m.cost = total / static_cast<double>(k);
  return m;
}

// Gradient of the gated EMD loss with the optimal matching held fixed:
// the loss term for sampled point j is gate_j * d_j / k.
inline std::vector<double> emd_grad_wrt_weights(const Matching& matching,
                                                const std::vector<double>& gates) {
  if (gates.size() != matching.squared_dists.size())
    throw std::invalid_argument(
        "gate count " + std::to_string(gates.size()) + " does not match " +
        std::to_string(matching.squared_dists.size()) + " matched points");
  const double k = static_cast<double>(matching.squared_dists.size());
  std::vector<double> grad(matching.squared_dists.size());
  for (std::size_t j = 0; j < grad.size(); ++j)
    grad[j] = matching.squared_dists[j] / k;
  return grad;
}

}  // namespace csnet
