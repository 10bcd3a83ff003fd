// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace thdbar {

// Worker count for read-only evaluation loops (default 1).
void set_threads(std::size_t n);
std::size_t threads();
// Reads THDBAR_THREADS when set; returns the resulting count.
std::size_t threads_from_env();

// Calls fn(i) for i in [0, n) on up to threads() workers. Each index runs
// exactly once; callers write results into per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace thdbar
