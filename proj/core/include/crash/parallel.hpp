#pragma once

#include <cstddef>
#include <functional>

namespace crash {

// Thread cap for data-parallel loops, read once from CRASH_THREADS (default 1).
std::size_t thread_cap();

// Runs fn(i) for i in [0, n). Iterations must write to disjoint locations;
// results are identical for any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace crash
