#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace tda {

// One latent item: a zero-padded max_frames x latent_dim frame matrix (row-major),
// the number of real frames, and its conditioning vector.
struct LatentTrack {
  std::uint64_t id = 0;
  std::size_t max_frames = 0;
  std::size_t latent_dim = 0;
  std::size_t actual_len = 0;
  std::vector<double> frames;
  std::vector<double> cond;
  std::uint32_t cluster = 0;
  std::optional<std::uint64_t> duplicate_of;

  std::span<const double> row(std::size_t i) const { return {frames.data() + i * latent_dim, latent_dim}; }
  std::span<double> row(std::size_t i) { return {frames.data() + i * latent_dim, latent_dim}; }

  // Throws ShapeError / ArgumentError when the shape or padding invariants are broken.
  void validate() const;
  bool operator==(const LatentTrack&) const = default;
};

}  // namespace tda
