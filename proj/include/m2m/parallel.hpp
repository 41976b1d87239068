#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace m2m {

// Thread cap: M2M_THREADS in the environment, else the hardware count.
inline unsigned max_threads() {
  if (const char* env = std::getenv("M2M_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Runs f(i) for i in [0, n). Work is chunked by index block so results keyed
// by i land in caller-owned slots; any reduction afterwards happens in index
// order, independent of the thread count.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  unsigned workers = max_threads();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned t = 0; t < workers; ++t) {
    std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &f] {
      for (std::size_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace m2m
