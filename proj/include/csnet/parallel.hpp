#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace csnet {

inline unsigned worker_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(begin, end) over disjoint index ranges. Ranges are assigned
// statically so output written to disjoint slots is bit-reproducible
// regardless of scheduling.
inline void parallel_for(std::size_t count,
                         const std::function<void(std::size_t, std::size_t)>& fn,
                         std::size_t min_per_worker = 1) {
  const unsigned workers = worker_count();
  if (count == 0) return;
  if (workers <= 1 || count <= min_per_worker) {
    fn(0, count);
    return;
  }
  const std::size_t chunks =
      std::min<std::size_t>(workers, (count + min_per_worker - 1) / min_per_worker);
  if (chunks <= 1) {
    fn(0, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(chunks - 1);
  const std::size_t step = (count + chunks - 1) / chunks;
  for (std::size_t c = 1; c < chunks; ++c) {
    const std::size_t lo = c * step;
    const std::size_t hi = std::min(count, lo + step);
    if (lo >= hi) break;
    pool.emplace_back(fn, lo, hi);
  }
  fn(0, std::min(count, step));
  for (auto& t : pool) t.join();
}

}  // namespace csnet
