#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace snf {

/// Runs f(i) for i in [0, n) on up to `workers` threads. Tasks are claimed
/// dynamically; callers must make f(i) independent of which thread runs it.
/// The first exception thrown by any task is rethrown here.
template <typename F>
void parallel_for(std::size_t n, int workers, F&& f) {
  const std::size_t nt = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (nt <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nt; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace snf
