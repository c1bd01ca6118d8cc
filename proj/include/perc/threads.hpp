#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace perc {

// Worker cap: PERCO_THREADS when set, else the hardware count.
// All parallel loops partition work statically over disjoint output
// ranges, so results are identical for any thread count.
int max_threads();

template <class F>
void parallel_for(int64_t n, F&& fn) {
  if (n <= 0) return;
  int nt = max_threads();
  if (nt <= 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t i = 0; i < n; ++i) fn(i);
#else
  for (int64_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace perc
