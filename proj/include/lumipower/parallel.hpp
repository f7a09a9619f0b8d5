#pragma once

#include <cstddef>
#include <functional>

namespace lumipower {

// Worker count for kernel-level parallelism. Read once from LUMIPOWER_THREADS;
// defaults to the hardware concurrency. A value of 1 selects the sequential
// reference mode.
std::size_t thread_count();

// Overrides the environment setting for the current process (tests, CLI).
void set_thread_count(std::size_t n);

// Runs body(i) for i in [0, n). Iterations must write disjoint outputs so the
// result does not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace lumipower
