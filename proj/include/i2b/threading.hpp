#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace i2b {

// Worker budget: I2B_THREADS if set (clamped to >= 1), else the hardware
// concurrency. Every parallel region in the pipeline goes through here.
inline int thread_budget() {
  if (const char* env = std::getenv("I2B_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Run fn(i) for i in [0, n). Work items must be independent and write only
// to their own slots; results are then combined by the caller in index
// order, so the schedule never affects the outcome. Serial when the budget
// (or n) is 1.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(thread_budget(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace i2b
