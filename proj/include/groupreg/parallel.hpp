#pragma once

#include <cstddef>
#include <functional>

namespace groupreg::parallel {

// Global worker count used by every parallel loop. Defaults to the hardware
// concurrency; the CLI sets it from --threads. Results are bit-reproducible
// for any fixed count because work is split into static contiguous blocks and
// reductions are merged in block order.
int thread_count();
void set_thread_count(int n);

// Runs fn(block_index, begin, end) for each of the static blocks covering
// [0, n). Blocks are contiguous and their boundaries depend only on n and the
// configured thread count.
void for_blocks(std::size_t n,
                const std::function<void(int, std::size_t, std::size_t)>& fn);

// Convenience wrapper: fn(i) for i in [0, n), statically partitioned.
void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace groupreg::parallel
