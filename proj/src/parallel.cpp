#include "tda/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <atomic>

namespace tda {

namespace {
std::atomic<int> g_threads{0};
}

void set_num_threads(int n) { g_threads = std::max(n, 1); }

int num_threads() {
  if (g_threads > 0) return g_threads;
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace detail {

void parallel_for_impl(std::size_t n, void (*body)(void*, std::size_t), void* ctx) {
#ifdef _OPENMP
  const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 1) num_threads(num_threads())
  for (long i = 0; i < count; ++i) body(ctx, static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < n; ++i) body(ctx, i);
#endif
}

}  // namespace detail

void tree_sum(std::vector<std::vector<double>>& parts) {
  for (std::size_t stride = 1; stride < parts.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < parts.size(); i += 2 * stride) {
      auto& dst = parts[i];
      const auto& src = parts[i + stride];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
}

double tree_sum(std::span<const double> values) {
  if (values.empty()) return 0.0;
  std::vector<double> acc(values.begin(), values.end());
  for (std::size_t stride = 1; stride < acc.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < acc.size(); i += 2 * stride) acc[i] += acc[i + stride];
  }
  return acc[0];
}

}  // namespace tda
