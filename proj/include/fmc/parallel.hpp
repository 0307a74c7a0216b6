#pragma once

#include <cstddef>
#include <functional>

namespace fmc {

/// Worker count from FMC_THREADS (default 1, clamped to >= 1).
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; each
/// index is handled by exactly one worker so per-index results do not depend
/// on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fmc
