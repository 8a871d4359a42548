#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace mlscalib {

inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

/// Runs fn(block_index, begin, end) over fixed-size blocks of [0, n).
/// The block partition depends only on (n, block_size), so any per-block
/// result is identical for every thread count.
template <typename Fn>
void parallel_for_blocks(std::size_t n, std::size_t block_size, unsigned threads, Fn&& fn) {
  if (n == 0) return;
  const std::size_t nblocks = (n + block_size - 1) / block_size;
  const unsigned nthreads = std::min<std::size_t>(resolve_threads(threads), nblocks);
  if (nthreads <= 1) {
    for (std::size_t b = 0; b < nblocks; ++b)
      fn(b, b * block_size, std::min(n, (b + 1) * block_size));
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= nblocks) return;
      fn(b, b * block_size, std::min(n, (b + 1) * block_size));
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(nthreads - 1);
  for (unsigned i = 1; i < nthreads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

/// Pairwise (tree) sum over a vector of partials. Fixed association order, so
/// the result is bit-reproducible independent of how partials were produced.
inline double pairwise_sum(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::size_t n = v.size();
  while (n > 1) {
    const std::size_t half = n / 2;
    for (std::size_t i = 0; i < half; ++i) v[i] = v[2 * i] + v[2 * i + 1];
    if (n % 2 != 0) {
      v[half] = v[n - 1];
      n = half + 1;
    } else {
      n = half;
    }
  }
  return v[0];
}

}  // namespace mlscalib
