// Deterministic work sharing. Units are independent by construction (each
// index writes a disjoint slice), so the result never depends on the thread
// count. Reductions are never split across threads.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace bss {

inline std::atomic<int>& thread_count_storage() {
  static std::atomic<int> count{0};  // 0 = use hardware concurrency
  return count;
}

inline void set_thread_count(int n) { thread_count_storage().store(n < 0 ? 0 : n); }

inline int thread_count() {
  int n = thread_count_storage().load();
  if (n <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    n = hw == 0 ? 1 : static_cast<int>(hw);
  }
  return n;
}

// Runs fn(i) for i in [0, n). fn must not touch state shared with another
// index except read-only inputs.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace bss
