#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sadnet {

// Every parallel loop in the library hands each index to exactly one thread
// and performs all reductions over a fixed index order, so results do not
// depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
#ifdef _OPENMP
  const long long n = static_cast<long long>(count);
#pragma omp parallel for schedule(static) if (n > 1)
  for (long long i = 0; i < n; ++i) fn(static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < count; ++i) fn(i);
#endif
}

inline void set_thread_count(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

inline int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace sadnet
