#include "eve/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace eve::runtime {
namespace {
std::atomic<int> g_threads{1};
std::atomic<bool> g_deterministic{true};
}  // namespace

int threads() { return g_threads.load(); }
void set_threads(int n) { g_threads.store(std::max(1, n)); }

bool deterministic() { return g_deterministic.load(); }
void set_deterministic(bool on) { g_deterministic.store(on); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  int workers = deterministic() ? 1 : threads();
  if (workers <= 1 || n < 2 * workers) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace eve::runtime
