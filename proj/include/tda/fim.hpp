#pragma once

// Diagonal Fisher information estimated from squared per-timestep loss gradients.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tda/data.hpp"
#include "tda/model.hpp"
#include "tda/parallel.hpp"

namespace tda {

struct FimDiagonal {
  LayerGroup group = LayerGroup::All;
  std::vector<double> values;  // aligned with ParamLayout::gather(group, ...)
  std::size_t num_samples = 0;
  std::size_t num_timesteps = 0;
  std::uint64_t seed = 0;

  double mean() const;
  bool operator==(const FimDiagonal&) const = default;
};

inline constexpr std::size_t kDefaultFimTimesteps = 32;

// (F)_jj = 1/N sum_i 1/T sum_t (dL_t(z_i)/dtheta_j)^2. Draws for track i are
// seeded by (seed, track id) and stratified over t.
FimDiagonal estimate_fim_diag(const Checkpoint& ckpt, const Dataset& dataset, LayerGroup group,
                              std::size_t timesteps, std::uint64_t seed, bool apply_mask = false,
                              Exec exec = Exec::Parallel);

// Contribution of a single track: 1/T sum_t (dL_t/dtheta_j)^2.
std::vector<double> track_fisher(const ModelParams& params, const LatentTrack& track, LayerGroup group,
                                 std::size_t timesteps, std::uint64_t seed, bool apply_mask);

// Entries of a sub-group read out of an estimate over a containing group. Exact,
// since diagonal entries are estimated independently.
FimDiagonal restrict_fim(const FimDiagonal& fim, const ParamLayout& layout, LayerGroup group);

// Damping used when none is given: 1e-8 * mean(F) + 1e-12.
double default_damping(const FimDiagonal& fim);

// grad_j / (fim_j + damping)
std::vector<double> precondition(const FimDiagonal& fim, std::span<const double> grad, double damping);

std::vector<std::uint8_t> encode_fim(const FimDiagonal& fim);
FimDiagonal decode_fim(std::span<const std::uint8_t> bytes);
void write_fim(const FimDiagonal& fim, const std::string& path);
FimDiagonal read_fim(const std::string& path);

}  // namespace tda
