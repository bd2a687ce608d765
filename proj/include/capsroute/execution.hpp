#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace capsroute {

/// Process-wide numeric execution settings. Strict mode pins every reduction
/// to a single thread so results are bit-reproducible.
struct ExecutionPolicy {
  bool strict = false;
  unsigned threads = 0;  // 0 = hardware concurrency

  unsigned effective_threads() const {
    if (strict) return 1;
    unsigned hw = threads ? threads : std::thread::hardware_concurrency();
    return std::max(1u, hw);
  }
};

inline ExecutionPolicy& execution() {
  static ExecutionPolicy policy;
  return policy;
}

/// Runs body(begin, end) over contiguous shards of [0, n). Shards are
/// independent; callers combine shard results in index order.
template <typename Body>
void parallel_shards(std::size_t n, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(execution().effective_threads(), n);
  if (workers <= 1) {
    body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, b, e] { body(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace capsroute
