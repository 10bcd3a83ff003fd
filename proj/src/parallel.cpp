// SPDX-License-Identifier: Apache-2.0
#include "thdbar/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "thdbar/error.hpp"

namespace thdbar {

namespace {
std::atomic<std::size_t> g_threads{1};
}

void set_threads(std::size_t n) { g_threads = n == 0 ? 1 : n; }
std::size_t threads() { return g_threads; }

std::size_t threads_from_env() {
  if (const char* v = std::getenv("THDBAR_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n < 1) throw ConfigError("THDBAR_THREADS must be >= 1");
      set_threads(static_cast<std::size_t>(n));
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("THDBAR_THREADS is not a number: ") + v);
    }
  }
  return threads();
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace thdbar
