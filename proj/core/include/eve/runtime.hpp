#pragma once

#include <cstdint>
#include <functional>

namespace eve::runtime {

// Worker count for data-parallel kernels. Parallel execution splits work by
// output row only, so results match single-threaded runs bitwise; kernels
// still fall back to sequential execution in deterministic mode to honor the
// single-threaded contract.
int threads();
void set_threads(int n);

bool deterministic();
void set_deterministic(bool on);

// Runs fn over [0, n) in contiguous chunks. Executes inline when only one
// worker is active.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace eve::runtime
