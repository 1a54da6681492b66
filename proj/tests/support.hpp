#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tda/data.hpp"
#include "tda/model.hpp"
#include "tda/rng.hpp"

namespace tda::testing {

// About 2k parameters: small enough for finite differences.
inline ModelConfig tiny_model(std::uint64_t seed = 3) {
  ModelConfig c;
  c.latent_dim = 4;
  c.max_frames = 6;
  c.cond_dim = 3;
  c.width = 8;
  c.num_heads = 2;
  c.num_blocks = 2;
  c.cond_tokens = 2;
  c.time_features = 8;
  c.seed = seed;
  return c;
}

inline DatasetSpec tiny_spec(std::size_t n = 8, std::uint64_t seed = 5) {
  DatasetSpec s;
  s.num_tracks = n;
  s.num_clusters = 2;
  s.max_frames = 6;
  s.latent_dim = 4;
  s.cond_dim = 3;
  s.seed = seed;
  return s;
}

// Initialised parameters with every entry jittered, so gains and biases are generic.
inline ModelParams jittered(const ModelConfig& cfg, std::uint64_t seed = 11, double scale = 0.1) {
  auto p = init_params(cfg);
  Rng rng(seed);
  for (auto& v : p.values) v += scale * rng.normal();
  return p;
}

// Full-vector indices of a group's entries, in group order.
inline std::vector<std::size_t> group_indices(const ParamLayout& layout, LayerGroup g) {
  std::vector<double> idx(layout.total());
  std::iota(idx.begin(), idx.end(), 0.0);
  const auto packed = layout.gather(g, idx);
  return {packed.begin(), packed.end()};
}

struct FdReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Compares `count` random coordinates of the analytic group gradient with central
// differences of step h.
inline FdReport finite_difference_check(const ModelParams& params, const LatentTrack& track,
                                        const std::vector<NoiseDraw>& draws, bool mask, LayerGroup g,
                                        std::size_t count, std::uint64_t seed, double h = 1e-5) {
  const auto grad = loss_gradient(params, track, draws, mask, g);
  const auto idx = group_indices(params.layout, g);
  Rng rng(seed);
  FdReport rep;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t j = rng.below(idx.size());
    auto q = params;
    q.values[idx[j]] += h;
    const double lp = diffusion_loss(q, track, draws, mask);
    q.values[idx[j]] = params.values[idx[j]] - h;
    const double lm = diffusion_loss(q, track, draws, mask);
    const double fd = (lp - lm) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[j]), 1e-6});
    rep.max_rel = std::max(rep.max_rel, std::abs(fd - grad[j]) / denom);
    ++rep.checked;
  }
  return rep;
}

}  // namespace tda::testing
