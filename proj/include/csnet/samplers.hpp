#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "csnet/pointcloud.hpp"
#include "csnet/rng.hpp"

namespace csnet {

// Shared output type for every sampler: k distinct input indices in
// selection order plus exact row copies of the input at those indices.
struct SampleResult {
  std::vector<std::size_t> indices;
  PointCloud sampled;
  std::string method_tag;
};

namespace detail {

inline double dist2(const std::array<float, 3>& a, const std::array<float, 3>& b) {
  const double dx = double(a[0]) - b[0];
  const double dy = double(a[1]) - b[1];
  const double dz = double(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline SampleResult make_result(const PointCloud& cloud,
                                std::vector<std::size_t> indices,
                                std::string tag) {
  SampleResult r;
  r.sampled.label = cloud.label;
  r.sampled.points.reserve(indices.size());
  for (std::size_t i : indices) r.sampled.points.push_back(cloud.points[i]);
  r.indices = std::move(indices);
  r.method_tag = std::move(tag);
  return r;
}

inline void check_k(const PointCloud& cloud, std::size_t k) {
  if (k < 1 || k > cloud.size())
    throw std::invalid_argument("sample size k=" + std::to_string(k) +
                                " out of range for cloud of " +
                                std::to_string(cloud.size()) + " points");
}

// Greedy dart throwing over a fixed candidate order: accept a candidate
// iff it is at least r away from every previously accepted point.
inline std::vector<std::size_t> poisson_accepted(
    const PointCloud& cloud, const std::vector<std::size_t>& order, double r) {
  const double r2 = r * r;
  std::vector<std::size_t> accepted;
  for (std::size_t i : order) {
    bool ok = true;
    for (std::size_t j : accepted) {
      if (dist2(cloud.points[i], cloud.points[j]) < r2) {
        ok = false;
        break;
      }
    }
    if (ok) accepted.push_back(i);
  }
  return accepted;
}

}  // namespace detail

// Uniform k-subset without replacement: seeded shuffle, first k.
inline SampleResult random_sample(const PointCloud& cloud, std::size_t k, Rng& rng) {
  detail::check_k(cloud, k);
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  order.resize(k);
  return detail::make_result(cloud, std::move(order), "random");
}

// Farthest point sampling: maintain each point's min squared distance to
// the selected set, pick the argmax next (ties to the lowest index).
inline SampleResult fps(const PointCloud& cloud, std::size_t k,
                        std::size_t start_index = 0) {
  detail::check_k(cloud, k);
  if (start_index >= cloud.size())
    throw std::invalid_argument("fps start index out of range");
  const std::size_t n = cloud.size();
  std::vector<std::size_t> selected;
  selected.reserve(k);
  std::vector<char> taken(n, 0);
  std::vector<double> min_d2(n);
  selected.push_back(start_index);
  taken[start_index] = 1;
  for (std::size_t i = 0; i < n; ++i)
    min_d2[i] = detail::dist2(cloud.points[i], cloud.points[start_index]);
  while (selected.size() < k) {
    std::size_t best = n;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (min_d2[i] > best_d2) {  // strict: the lowest index wins ties
        best_d2 = min_d2[i];
        best = i;
      }
    }
    selected.push_back(best);
    taken[best] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d2[i] = std::min(min_d2[i], detail::dist2(cloud.points[i], cloud.points[best]));
    }
  }
  return detail::make_result(cloud, std::move(selected), "fps");
}

// Dart throwing over the input indices with an exclusion radius chosen by
// bisection so the accepted count lands in [k, 1.2k]; the result is the
// first k accepts. The radius floors at 0 (accept everything), and if
// even that cannot reach k the sampler falls back to fps and tags it.
inline SampleResult poisson_disk(const PointCloud& cloud, std::size_t k, Rng& rng) {
  detail::check_k(cloud, k);
  const std::size_t n = cloud.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  double diameter = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      diameter = std::max(diameter, detail::dist2(cloud.points[i], cloud.points[j]));
  diameter = std::sqrt(diameter);

  const std::size_t band_hi =
      std::max(k, static_cast<std::size_t>(std::floor(1.2 * static_cast<double>(k))));
  double lo = 0.0, hi = diameter;
  std::vector<std::size_t> best;  // feasible acceptance with the largest radius
  double best_r = -1.0;
  for (int round = 0; round < 20 && hi > 0; ++round) {
    const double mid = 0.5 * (lo + hi);
    auto acc = detail::poisson_accepted(cloud, order, mid);
    const std::size_t count = acc.size();
    if (count >= k && mid > best_r) {
      best_r = mid;
      best = std::move(acc);
    }
    if (count >= k && count <= band_hi) break;  // inside the target band
    if (count < k)
      hi = mid;  // too sparse, shrink the radius
    else
      lo = mid;  // too dense, grow it
  }
  if (best_r < 0) {
    // Radius floors at 0: every candidate is accepted.
    best = order;
    best_r = 0.0;
  }
  if (best.size() < k) {  // unreachable with r = 0; kept defensive
    SampleResult fb = fps(cloud, k, 0);
    fb.method_tag = "poisson(fps-fallback)";
    return fb;
  }
  best.resize(k);
  return detail::make_result(cloud, std::move(best), "poisson");
}

}  // namespace csnet
