#pragma once

#include <cstddef>
#include <functional>

namespace medlab {

// Worker cap: MEDLAB_THREADS when set to a positive integer, else the
// hardware concurrency (at least 1).
std::size_t worker_count();

// Runs fn(i) for i in [0, n) across worker threads. Callers write results into
// pre-sized slots so output order never depends on scheduling. If any call
// throws, the exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace medlab
