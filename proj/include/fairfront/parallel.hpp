#pragma once

// Minimal fork-join helper. Work items write to disjoint slots, so results
// do not depend on the worker count.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fairfront {

//! Worker cap: FAIRFRONT_THREADS if set, else hardware concurrency.
inline unsigned worker_count()
{
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FAIRFRONT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1)
      return static_cast<unsigned>(v);
  }
  return hw;
}

template<typename F>
void parallel_for(std::size_t n, F&& body, unsigned workers = worker_count())
{
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i)
      body(i);
    return;
  }
  std::atomic<std::size_t> next{ 0 };
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n)
          return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard lk(err_mu);
          if (!err)
            err = std::current_exception();
        }
      }
    });
  for (auto& t : pool)
    t.join();
  if (err)
    std::rethrow_exception(err);
}

} // namespace fairfront
