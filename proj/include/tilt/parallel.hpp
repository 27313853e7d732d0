#pragma once

// Deterministic data parallelism over sample indices.
//
// Work is split into fixed-size blocks whose boundaries depend only on the
// problem size. Each block is reduced sequentially and the block partials
// are combined with a fixed pairwise tree, so results are bit-identical for
// any thread count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

namespace tilt {

inline constexpr std::size_t kReduceBlock = 2048;

namespace detail {

inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> value{[] {
    if (const char* env = std::getenv("TILT_THREADS")) {
      const long parsed = std::strtol(env, nullptr, 10);
      if (parsed > 0) return static_cast<unsigned>(parsed);
    }
    return 1u;
  }()};
  return value;
}

inline bool& inside_worker() {
  thread_local bool flag = false;
  return flag;
}

}  // namespace detail

/// Worker count used by the parallel loops. Defaults to $TILT_THREADS or 1.
inline unsigned thread_count() { return detail::thread_setting().load(); }
inline void set_thread_count(unsigned n) { detail::thread_setting().store(std::max(1u, n)); }

/// Runs body(task) for task in [0, tasks). Nested calls run serially.
template <class Body>
void parallel_for(std::size_t tasks, Body&& body) {
  const unsigned workers =
      detail::inside_worker() ? 1u : static_cast<unsigned>(std::min<std::size_t>(thread_count(), tasks));
  if (workers <= 1) {
    for (std::size_t t = 0; t < tasks; ++t) body(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    detail::inside_worker() = true;
    for (std::size_t t = next.fetch_add(1); t < tasks; t = next.fetch_add(1)) {
      try {
        body(t);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
    detail::inside_worker() = false;
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// Sum-like reduction of block(begin, end) over [0, n).
/// `combine(a, b)` must return the merged accumulator.
template <class Block, class Combine>
auto blocked_reduce(std::size_t n, Block&& block, Combine&& combine, std::size_t block_size = kReduceBlock) {
  using Acc = decltype(block(std::size_t{0}, std::size_t{0}));
  const std::size_t blocks = std::max<std::size_t>(1, (n + block_size - 1) / block_size);
  std::vector<std::optional<Acc>> partial(blocks);
  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t begin = b * block_size;
    const std::size_t end = std::min(n, begin + block_size);
    partial[b].emplace(block(begin, end));
  });
  for (std::size_t width = 1; width < blocks; width *= 2) {
    for (std::size_t i = 0; i + width < blocks; i += 2 * width) {
      partial[i].emplace(combine(std::move(*partial[i]), std::move(*partial[i + width])));
    }
  }
  return std::move(*partial[0]);
}

/// Pairwise sum of term(i) over [0, n).
template <class Term>
double pairwise_sum(std::size_t n, Term&& term) {
  return blocked_reduce(
      n,
      [&](std::size_t begin, std::size_t end) {
        double s = 0.0;
        for (std::size_t i = begin; i < end; ++i) s += term(i);
        return s;
      },
      [](double a, double b) { return a + b; });
}

}  // namespace tilt
