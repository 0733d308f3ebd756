#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace eqdp {

/// Global worker count knob (0 = library default of one thread per core).
/// Parallel loops only ever split work whose result slots are disjoint, so
/// numeric output is identical for any worker count.
inline int& worker_count() {
  static int n = 0;
  return n;
}

inline int effective_workers() {
#ifdef _OPENMP
  int n = worker_count();
  if (n <= 0) n = omp_get_max_threads();
  return n < 1 ? 1 : n;
#else
  return 1;
#endif
}

template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int workers = effective_workers();
  if (workers <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(workers)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#else
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace eqdp
