#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "csnet/parallel.hpp"
#include "csnet/pointcloud.hpp"

namespace csnet {
namespace knn {

using Candidate = std::pair<double, std::size_t>;  // (squared dist, index)

namespace detail {

inline double d2(const std::array<float, 3>& a, const std::array<float, 3>& b) {
  const double dx = double(a[0]) - b[0];
  const double dy = double(a[1]) - b[1];
  const double dz = double(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline void brute_row(const PointCloud& cloud, std::size_t i, std::size_t count,
                      std::size_t* out) {
  std::vector<Candidate> cands;
  cands.reserve(cloud.size() - 1);
  for (std::size_t j = 0; j < cloud.size(); ++j) {
    if (j == i) continue;
    cands.emplace_back(d2(cloud.points[i], cloud.points[j]), j);
  }
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(count),
                    cands.end());
  for (std::size_t t = 0; t < count; ++t) out[t] = cands[t].second;
}

struct Grid {
  std::array<double, 3> origin;
  std::array<double, 3> cell;
  std::array<int, 3> dims;
  std::vector<std::vector<std::uint32_t>> buckets;
  double min_edge = 0;

  std::size_t flat(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }

  std::array<int, 3> cell_of(const std::array<float, 3>& p) const {
    std::array<int, 3> c;
    for (int a = 0; a < 3; ++a) {
      const double t = (p[a] - origin[a]) / cell[a];
      c[a] = std::clamp(static_cast<int>(t), 0, dims[a] - 1);
    }
    return c;
  }
};

inline Grid build_grid(const PointCloud& cloud) {
  Grid grid;
  std::array<double, 3> lo = {cloud.points[0][0], cloud.points[0][1],
                              cloud.points[0][2]};
  std::array<double, 3> hi = lo;
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], double(p[a]));
      hi[a] = std::max(hi[a], double(p[a]));
    }
  const int target = std::clamp(
      static_cast<int>(std::cbrt(double(cloud.size()) / 2.0)), 1, 64);
  grid.min_edge = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double extent = hi[a] - lo[a];
    grid.dims[a] = extent > 0 ? target : 1;
    grid.cell[a] = extent > 0 ? extent / grid.dims[a] * (1 + 1e-12) : 1.0;
    grid.origin[a] = lo[a];
    if (grid.dims[a] > 1) grid.min_edge = std::min(grid.min_edge, grid.cell[a]);
  }
  if (!std::isfinite(grid.min_edge)) grid.min_edge = 1.0;  // single-cell grid
  grid.buckets.assign(
      std::size_t(grid.dims[0]) * grid.dims[1] * grid.dims[2], {});
  for (std::size_t j = 0; j < cloud.size(); ++j) {
    const auto c = grid.cell_of(cloud.points[j]);
    grid.buckets[grid.flat(c[0], c[1], c[2])].push_back(
        static_cast<std::uint32_t>(j));
  }
  return grid;
}

// Expanding Chebyshev-ring search; exact, with the same (distance, index)
// ordering as the brute-force path.
inline void grid_row(const PointCloud& cloud, const Grid& grid, std::size_t i,
                     std::size_t count, std::size_t* out) {
  const auto& p = cloud.points[i];
  const auto home = grid.cell_of(p);
  std::vector<Candidate> heap;  // max-heap on (d2, index), size <= count
  heap.reserve(count + 1);
  const int max_ring = std::max({grid.dims[0], grid.dims[1], grid.dims[2]});
  for (int ring = 0; ring < max_ring; ++ring) {
    const int x0 = home[0] - ring, x1 = home[0] + ring;
    const int y0 = home[1] - ring, y1 = home[1] + ring;
    const int z0 = home[2] - ring, z1 = home[2] + ring;
    for (int z = z0; z <= z1; ++z) {
      if (z < 0 || z >= grid.dims[2]) continue;
      for (int y = y0; y <= y1; ++y) {
        if (y < 0 || y >= grid.dims[1]) continue;
        for (int x = x0; x <= x1; ++x) {
          if (x < 0 || x >= grid.dims[0]) continue;
          // Only the shell of the ring is new.
          if (ring > 0 && x != x0 && x != x1 && y != y0 && y != y1 && z != z0 &&
              z != z1)
            continue;
          for (std::uint32_t j : grid.buckets[grid.flat(x, y, z)]) {
            if (j == i) continue;
            const Candidate cand{d2(p, cloud.points[j]), j};
            if (heap.size() < count) {
              heap.push_back(cand);
              std::push_heap(heap.begin(), heap.end());
            } else if (cand < heap.front()) {
              std::pop_heap(heap.begin(), heap.end());
              heap.back() = cand;
              std::push_heap(heap.begin(), heap.end());
            }
          }
        }
      }
    }
    // Any point in an unvisited cell is at least ring * min_edge away.
    if (heap.size() == count) {
      const double certified = double(ring) * grid.min_edge;
      if (heap.front().first <= certified * certified) break;
    }
  }
  std::sort_heap(heap.begin(), heap.end());
  for (std::size_t t = 0; t < count; ++t) out[t] = heap[t].second;
}

}  // namespace detail

// For each point, its g nearest neighbors with itself first and the
// remaining g-1 ordered by (squared distance, index). Flattened n*g.
// Above the size threshold an exact grid search replaces the brute-force
// scan; both return identical index sequences.
inline std::vector<std::size_t> neighbors(const PointCloud& cloud, std::size_t g,
                                          bool force_brute = false) {
  const std::size_t n = cloud.size();
  if (g < 1 || g > n)
    throw std::invalid_argument("knn: g=" + std::to_string(g) +
                                " out of range for n=" + std::to_string(n));
  std::vector<std::size_t> out(n * g);
  const std::size_t rest = g - 1;
  if (rest == 0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  const bool use_grid = !force_brute && n >= 512;
  const detail::Grid grid =
      use_grid ? detail::build_grid(cloud) : detail::Grid{};
  parallel_for(
      n,
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          out[i * g] = i;  // self is neighbor 0
          if (use_grid)
            detail::grid_row(cloud, grid, i, rest, out.data() + i * g + 1);
          else
            detail::brute_row(cloud, i, rest, out.data() + i * g + 1);
        }
      },
      256);
  return out;
}

}  // namespace knn
}  // namespace csnet
