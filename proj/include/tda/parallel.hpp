#pragma once

// Data-parallel kernels. Every reduction goes through a fixed chunk partition and a
// fixed pairwise tree, so the serial path and the OpenMP path produce bit-identical
// results for any thread count.

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <span>
#include <vector>

namespace tda {

enum class Exec { Serial, Parallel };

// Worker count used by Exec::Parallel (defaults to the OpenMP runtime default).
void set_num_threads(int n);
int num_threads();

namespace detail {
void parallel_for_impl(std::size_t n, void (*body)(void*, std::size_t), void* ctx);
}

// Calls fn(i) for every i in [0, n). Exceptions are rethrown on the calling thread.
template <class Fn>
void for_each_index(std::size_t n, Exec exec, Fn&& fn) {
  if (exec == Exec::Serial || n < 2 || num_threads() < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  struct Ctx {
    Fn* fn;
    std::exception_ptr error;
    std::mutex mu;
  } ctx{&fn, nullptr, {}};
  detail::parallel_for_impl(
      n,
      [](void* p, std::size_t i) {
        auto* c = static_cast<Ctx*>(p);
        try {
          (*c->fn)(i);
        } catch (...) {
          std::lock_guard lock(c->mu);
          if (!c->error) c->error = std::current_exception();
        }
      },
      &ctx);
  if (ctx.error) std::rethrow_exception(ctx.error);
}

// In-place pairwise tree sum: parts[0] receives the total. Pairing is (0,1),(2,3),...
// then recursively, independent of how the parts were produced.
void tree_sum(std::vector<std::vector<double>>& parts);
double tree_sum(std::span<const double> values);

// Sum over items [0, n) of a length-`width` contribution. Items are grouped into
// consecutive chunks of `chunk` items; each chunk is accumulated serially in index
// order by add(i, acc), and chunk totals are combined by tree_sum.
template <class AddFn>
std::vector<double> chunked_sum(std::size_t n, std::size_t chunk, std::size_t width, Exec exec, AddFn&& add) {
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t num_chunks = std::max<std::size_t>((n + chunk - 1) / chunk, 1);
  std::vector<std::vector<double>> parts(num_chunks, std::vector<double>(width, 0.0));
  for_each_index(num_chunks, exec, [&](std::size_t c) {
    const std::size_t end = std::min(n, (c + 1) * chunk);
    for (std::size_t i = c * chunk; i < end; ++i) add(i, std::span<double>(parts[c]));
  });
  tree_sum(parts);
  return std::move(parts[0]);
}

}  // namespace tda
