#pragma once

// Block-parallel loops whose block boundaries do not depend on the thread
// count, so per-block partial results reduced in block order are
// bit-identical for any number of threads.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace metricdepth {

namespace detail {
inline std::atomic<int>& thread_count_storage() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_count_storage() = std::max(1, n); }
inline int num_threads() { return detail::thread_count_storage().load(); }

inline std::size_t block_count(std::size_t n_items, std::size_t block_size) {
  return (n_items + block_size - 1) / block_size;
}

/// Calls fn(begin, end, block_index) for every block of `block_size` items.
template <typename Fn>
void parallel_for_blocks(std::size_t n_items, std::size_t block_size, Fn&& fn) {
  const std::size_t n_blocks = block_count(n_items, block_size);
  const auto run_block = [&](std::size_t b) {
    const std::size_t begin = b * block_size;
    fn(begin, std::min(n_items, begin + block_size), b);
  };
  const int threads = std::min<int>(num_threads(), static_cast<int>(n_blocks));
  if (threads <= 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) run_block(b);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t b = next++; b < n_blocks; b = next++) run_block(b);
    });
  }
}

}  // namespace metricdepth
