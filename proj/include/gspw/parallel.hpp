#pragma once

#include <cstddef>
#include <cstdint>

namespace gspw {

/// Worker count: GSPW_THREADS when set (>= 1), otherwise the OpenMP default.
int thread_count();

/// Overrides the worker count for the current process (0 restores the env/default).
void set_thread_count(int n);

/// Runs body(i) for i in [0, n). Bodies must only write disjoint state so the
/// result is independent of scheduling.
template <class Body>
void parallel_for(std::int64_t n, Body&& body) {
  const int threads = thread_count();
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads) if (threads > 1 && n > 1)
  for (std::int64_t i = 0; i < n; ++i) body(i);
}

}  // namespace gspw
