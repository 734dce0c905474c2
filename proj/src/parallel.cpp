#include "groupreg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace groupreg::parallel {

namespace {
std::atomic<int> g_thread_count{0};  // 0 = not configured yet
}

int thread_count() {
  int n = g_thread_count.load(std::memory_order_relaxed);
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

void set_thread_count(int n) {
  g_thread_count.store(std::max(0, n), std::memory_order_relaxed);
}

void for_blocks(std::size_t n,
                const std::function<void(int, std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  std::size_t workers = static_cast<std::size_t>(thread_count());
  workers = std::min(workers, n);
  if (workers <= 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t b = 1; b < workers; ++b) {
    std::size_t lo = n * b / workers;
    std::size_t hi = n * (b + 1) / workers;
    pool.emplace_back([&fn, b, lo, hi] { fn(static_cast<int>(b), lo, hi); });
  }
  fn(0, 0, n * 1 / workers);
  for (auto& t : pool) t.join();
}

void for_each_index(std::size_t n,
                    const std::function<void(std::size_t)>& fn) {
  for_blocks(n, [&fn](int, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace groupreg::parallel
