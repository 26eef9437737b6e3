#pragma once

#include <cstddef>
#include <functional>

namespace changeseg {

// Worker count: CHANGESEG_THREADS if set and positive, otherwise
// std::thread::hardware_concurrency() (at least 1).
std::size_t worker_count();

// Runs fn(i) for i in [begin, end) split into contiguous chunks over at most
// worker_count() threads. fn must only write state owned by index i; results
// are therefore independent of scheduling.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn);

}  // namespace changeseg
