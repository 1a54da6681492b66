#pragma once

// Synthetic clustered latent dataset, descriptor embeddings and k-means target
// selection.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tda/track.hpp"

namespace tda {

struct DatasetSpec {
  std::size_t num_tracks = 256;
  std::size_t num_clusters = 8;
  std::size_t max_frames = 64;
  std::size_t latent_dim = 8;
  std::size_t cond_dim = 8;
  // Allowed actual lengths, sampled uniformly. Empty means {L/4, L/2, 3L/4, L}.
  std::vector<std::size_t> lengths;
  std::size_t duplicate_pairs = 0;
  double perturbation = 0.3;  // per-entry Gaussian std around the cluster prototype
  double cond_noise = 0.05;
  std::uint64_t seed = 0;

  std::vector<std::size_t> resolved_lengths() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Dataset {
  std::vector<LatentTrack> tracks;
  std::size_t max_frames = 0;
  std::size_t latent_dim = 0;
  std::size_t cond_dim = 0;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return tracks.size(); }
  void validate() const;
  bool operator==(const Dataset&) const = default;
};

Dataset generate_dataset(const DatasetSpec& spec);

// Noise-free conditioning vector of a cluster (the "prompt" for that cluster).
std::vector<double> cluster_condition(const DatasetSpec& spec, std::uint32_t cluster);

inline constexpr std::size_t kEmbedDim = 16;

// Per-dimension mean, standard deviation and mean absolute first difference over
// `num_frames` rows, projected by a fixed random matrix and L2-normalised. A zero
// projection maps to the first basis vector.
std::vector<double> descriptor_embedding(std::span<const double> frames, std::size_t latent_dim,
                                         std::size_t num_frames, std::size_t embed_dim = kEmbedDim);

struct EmbeddingSet {
  std::uint64_t track_id = 0;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<double> windows;  // count x dim, unit rows
  std::vector<double> mean;     // unit

  std::span<const double> window(std::size_t i) const { return {windows.data() + i * dim, dim}; }
  bool operator==(const EmbeddingSet&) const = default;
};

// One embedding per window of real frames. Tracks shorter than `window` get a
// single window over all real frames.
EmbeddingSet windowed_embeddings(const LatentTrack& track, std::size_t window = 10, std::size_t hop = 1,
                                 std::size_t embed_dim = kEmbedDim);

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> wcss_history;  // within-cluster sum of squares after each assignment
  std::size_t iterations = 0;
};

inline constexpr std::size_t kKMeansMaxIter = 100;
inline constexpr double kKMeansTol = 1e-8;

// Lloyd's algorithm with k-means++ seeding.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed);

// Index of the point nearest each centroid, in centroid order; an already chosen
// index is skipped in favour of the next nearest. Ties go to the smaller index.
std::vector<std::uint64_t> kmeans_select(const std::vector<std::vector<double>>& points, std::size_t k,
                                         std::uint64_t seed);

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace tda
