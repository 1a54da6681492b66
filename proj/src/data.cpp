#include "tda/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "tda/binio.hpp"
#include "tda/errors.hpp"
#include "tda/rng.hpp"

namespace tda {

using nlohmann::json;

void LatentTrack::validate() const {
  if (frames.size() != max_frames * latent_dim) {
    throw ShapeError("track " + std::to_string(id) + ": frame matrix size does not match max_frames x latent_dim");
  }
  if (actual_len < 1 || actual_len > max_frames) {
    throw ArgumentError("track " + std::to_string(id) + ": actual_len must lie in [1, max_frames]");
  }
  for (std::size_t i = actual_len * latent_dim; i < frames.size(); ++i) {
    if (frames[i] != 0.0) throw ArgumentError("track " + std::to_string(id) + ": padding frames are not zero");
  }
}

std::vector<std::size_t> DatasetSpec::resolved_lengths() const {
  if (!lengths.empty()) return lengths;
  std::vector<std::size_t> out;
  for (std::size_t q = 1; q <= 4; ++q) out.push_back(std::max<std::size_t>(1, q * max_frames / 4));
  return out;
}

void DatasetSpec::validate() const {
  if (num_clusters < 1) throw ArgumentError("dataset spec: num_clusters must be >= 1");
  if (num_tracks < num_clusters + duplicate_pairs) {
    throw ArgumentError("dataset spec: need num_tracks >= num_clusters + duplicate_pairs");
  }
  if (duplicate_pairs > num_tracks - duplicate_pairs) {
    throw ArgumentError("dataset spec: too many duplicate pairs for the track count");
  }
  if (max_frames < 1 || latent_dim < 1 || cond_dim < 1) throw ArgumentError("dataset spec: dimensions must be >= 1");
  for (auto len : resolved_lengths()) {
    if (len < 1 || len > max_frames) throw ArgumentError("dataset spec: lengths must lie in [1, max_frames]");
  }
  if (!(perturbation >= 0.0) || !(cond_noise >= 0.0)) throw ArgumentError("dataset spec: noise levels must be >= 0");
}

void to_json(json& j, const DatasetSpec& s) {
  j = json{{"num_tracks", s.num_tracks},       {"num_clusters", s.num_clusters}, {"max_frames", s.max_frames},
           {"latent_dim", s.latent_dim},       {"cond_dim", s.cond_dim},         {"lengths", s.lengths},
           {"duplicate_pairs", s.duplicate_pairs}, {"perturbation", s.perturbation}, {"cond_noise", s.cond_noise},
           {"seed", s.seed}};
}

void from_json(const json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.num_tracks = j.value("num_tracks", d.num_tracks);
  s.num_clusters = j.value("num_clusters", d.num_clusters);
  s.max_frames = j.value("max_frames", d.max_frames);
  s.latent_dim = j.value("latent_dim", d.latent_dim);
  s.cond_dim = j.value("cond_dim", d.cond_dim);
  s.lengths = j.value("lengths", d.lengths);
  s.duplicate_pairs = j.value("duplicate_pairs", d.duplicate_pairs);
  s.perturbation = j.value("perturbation", d.perturbation);
  s.cond_noise = j.value("cond_noise", d.cond_noise);
  s.seed = j.value("seed", d.seed);
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const auto& t = tracks[i];
    if (t.id != i) throw ArgumentError("dataset: track ids must equal their position");
    if (t.max_frames != max_frames || t.latent_dim != latent_dim || t.cond.size() != cond_dim) {
      throw ShapeError("dataset: track " + std::to_string(i) + " does not share the dataset dimensions");
    }
    t.validate();
  }
}

namespace {

// Row `cluster` of the fixed one-hot -> cond projection.
std::vector<double> cond_projection_row(const DatasetSpec& spec, std::uint32_t cluster) {
  Rng rng(derive_seed(spec.seed, {0xc0dd, cluster}));
  std::vector<double> row(spec.cond_dim);
  for (double& v : row) v = rng.normal();
  return row;
}

std::vector<double> make_prototype(const DatasetSpec& spec, std::uint32_t cluster) {
  Rng rng(derive_seed(spec.seed, {0x9707, cluster}));
  const std::size_t L = spec.max_frames, d = spec.latent_dim;
  std::vector<double> proto(L * d, 0.0);
  for (int pattern = 0; pattern < 3; ++pattern) {
    const double amplitude = rng.uniform(0.5, 1.0);
    const double omega = rng.uniform(0.05, 0.6);
    std::vector<double> weight(d), phase(d);
    for (std::size_t j = 0; j < d; ++j) {
      weight[j] = rng.normal();
      phase[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (std::size_t f = 0; f < L; ++f) {
      for (std::size_t j = 0; j < d; ++j) {
        proto[f * d + j] += amplitude * weight[j] * std::sin(omega * static_cast<double>(f) + phase[j]);
      }
    }
  }
  return proto;
}

}  // namespace

std::vector<double> cluster_condition(const DatasetSpec& spec, std::uint32_t cluster) {
  if (cluster >= spec.num_clusters) throw ArgumentError("cluster index out of range");
  return cond_projection_row(spec, cluster);
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t L = spec.max_frames, d = spec.latent_dim;
  const auto lengths = spec.resolved_lengths();

  std::vector<std::vector<double>> prototypes, conds;
  for (std::uint32_t k = 0; k < spec.num_clusters; ++k) {
    prototypes.push_back(make_prototype(spec, k));
    conds.push_back(cond_projection_row(spec, k));
  }

  Dataset ds;
  ds.max_frames = L;
  ds.latent_dim = d;
  ds.cond_dim = spec.cond_dim;
  ds.seed = spec.seed;

  Rng rng(derive_seed(spec.seed, {0x7ac5}));
  const std::size_t originals = spec.num_tracks - spec.duplicate_pairs;
  for (std::size_t i = 0; i < originals; ++i) {
    LatentTrack t;
    t.id = i;
    t.max_frames = L;
    t.latent_dim = d;
    t.cluster = static_cast<std::uint32_t>(i % spec.num_clusters);
    t.actual_len = lengths[rng.below(lengths.size())];
    t.frames.assign(L * d, 0.0);
    const auto& proto = prototypes[t.cluster];
    for (std::size_t k = 0; k < t.actual_len * d; ++k) t.frames[k] = proto[k] + spec.perturbation * rng.normal();
    t.cond = conds[t.cluster];
    for (double& c : t.cond) c += spec.cond_noise * rng.normal();
    ds.tracks.push_back(std::move(t));
  }

  // Copies of distinct, randomly chosen originals.
  std::vector<std::size_t> pool(originals);
  for (std::size_t i = 0; i < originals; ++i) pool[i] = i;
  for (std::size_t p = 0; p < spec.duplicate_pairs; ++p) {
    std::swap(pool[p], pool[p + rng.below(originals - p)]);
    auto& src = ds.tracks[pool[p]];
    LatentTrack copy = src;
    copy.id = ds.tracks.size();
    copy.duplicate_of = src.id;
    src.duplicate_of = copy.id;
    ds.tracks.push_back(std::move(copy));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Embeddings

namespace {

const std::vector<double>& embedding_projection(std::size_t features, std::size_t embed_dim) {
  thread_local std::size_t cached_f = 0, cached_e = 0;
  thread_local std::vector<double> proj;
  if (cached_f != features || cached_e != embed_dim) {
    Rng rng(derive_seed(0xde5c, {features, embed_dim}));
    proj.resize(features * embed_dim);
    for (double& v : proj) v = rng.normal() / std::sqrt(static_cast<double>(features));
    cached_f = features;
    cached_e = embed_dim;
  }
  return proj;
}

void normalize_or_basis(std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  if (n2 == 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
    v[0] = 1.0;
    return;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
}

}  // namespace

std::vector<double> descriptor_embedding(std::span<const double> frames, std::size_t latent_dim,
                                         std::size_t num_frames, std::size_t embed_dim) {
  if (num_frames < 1) throw ArgumentError("descriptor_embedding: need at least one frame");
  if (latent_dim < 1 || embed_dim < 1) throw ArgumentError("descriptor_embedding: dimensions must be >= 1");
  if (frames.size() < num_frames * latent_dim) throw ShapeError("descriptor_embedding: frame span too short");
  const std::size_t d = latent_dim;
  const double n = static_cast<double>(num_frames);
  std::vector<double> feat(3 * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t f = 0; f < num_frames; ++f) mean += frames[f * d + j];
    mean /= n;
    double var = 0.0;
    for (std::size_t f = 0; f < num_frames; ++f) {
      const double c = frames[f * d + j] - mean;
      var += c * c;
    }
    double diff = 0.0;
    for (std::size_t f = 1; f < num_frames; ++f) diff += std::abs(frames[f * d + j] - frames[(f - 1) * d + j]);
    feat[j] = mean;
    feat[d + j] = std::sqrt(var / n);
    feat[2 * d + j] = num_frames > 1 ? diff / (n - 1.0) : 0.0;
  }
  const auto& proj = embedding_projection(3 * d, embed_dim);
  std::vector<double> out(embed_dim, 0.0);
  for (std::size_t p = 0; p < 3 * d; ++p) {
    for (std::size_t e = 0; e < embed_dim; ++e) out[e] += feat[p] * proj[p * embed_dim + e];
  }
  normalize_or_basis(out);
  return out;
}

EmbeddingSet windowed_embeddings(const LatentTrack& track, std::size_t window, std::size_t hop,
                                 std::size_t embed_dim) {
  if (window < 1 || hop < 1) throw ArgumentError("windowed_embeddings: window and hop must be >= 1");
  if (track.actual_len < 1) throw ArgumentError("windowed_embeddings: track has no real frames");
  const std::size_t d = track.latent_dim;
  EmbeddingSet set;
  set.track_id = track.id;
  set.dim = embed_dim;
  const std::size_t span = std::min(window, track.actual_len);
  set.count = (track.actual_len - span) / hop + 1;
  set.windows.reserve(set.count * embed_dim);
  set.mean.assign(embed_dim, 0.0);
  for (std::size_t w = 0; w < set.count; ++w) {
    const std::span<const double> frames(track.frames.data() + w * hop * d, span * d);
    const auto e = descriptor_embedding(frames, d, span, embed_dim);
    set.windows.insert(set.windows.end(), e.begin(), e.end());
    for (std::size_t k = 0; k < embed_dim; ++k) set.mean[k] += e[k];
  }
  normalize_or_basis(set.mean);
  return set;
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed) {
  const std::size_t n = points.size();
  if (k < 1) throw ArgumentError("kmeans: k must be >= 1");
  if (k > n) throw ArgumentError("kmeans: k = " + std::to_string(k) + " exceeds the number of points " + std::to_string(n));
  const std::size_t dim = points[0].size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ShapeError("kmeans: points differ in dimension");
  }

  // k-means++ seeding
  Rng rng(derive_seed(seed, {0x4b4d}));
  KMeansResult res;
  std::vector<bool> taken(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  res.centroids.push_back(points[first]);
  taken[first] = true;
  while (res.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sqdist(points[i], res.centroids.back()));
      if (!taken[i]) total += best[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        pick = i;
        r -= best[i];
        if (r < 0.0) break;
      }
    } else {
      // every remaining point coincides with a centroid
      std::size_t skip = rng.below(n - res.centroids.size());
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        if (skip-- == 0) {
          pick = i;
          break;
        }
      }
    }
    taken[pick] = true;
    res.centroids.push_back(points[pick]);
  }

  res.assignment.assign(n, 0);
  for (std::size_t iter = 0; iter < kKMeansMaxIter; ++iter) {
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sqdist(points[i], res.centroids[c]);
        if (dd < dmin) {
          dmin = dd;
          arg = c;
        }
      }
      res.assignment[i] = arg;
      wcss += dmin;
    }
    res.wcss_history.push_back(wcss);
    res.iterations = iter + 1;

    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& c = next[res.assignment[i]];
      for (std::size_t j = 0; j < dim; ++j) c[j] += points[i][j];
      ++count[res.assignment[i]];
    }
    double moved = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        next[c] = res.centroids[c];  // empty cluster keeps its centroid
      } else {
        for (double& v : next[c]) v /= static_cast<double>(count[c]);
      }
      moved = std::max(moved, std::sqrt(sqdist(next[c], res.centroids[c])));
    }
    res.centroids = std::move(next);
    if (moved <= kKMeansTol) break;
  }
  return res;
}

std::vector<std::uint64_t> kmeans_select(const std::vector<std::vector<double>>& points, std::size_t k,
                                         std::uint64_t seed) {
  if (k > points.size()) {
    throw ArgumentError("kmeans_select: k = " + std::to_string(k) + " exceeds the number of tracks " +
                        std::to_string(points.size()));
  }
  const auto res = kmeans(points, k, seed);
  std::vector<bool> used(points.size(), false);
  std::vector<std::uint64_t> ids;
  for (const auto& c : res.centroids) {
    std::size_t arg = points.size();
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (used[i]) continue;
      const double dd = sqdist(points[i], c);
      if (dd < dmin) {
        dmin = dd;
        arg = i;
      }
    }
    used[arg] = true;
    ids.push_back(arg);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Dataset file

namespace {
constexpr std::string_view kDatasetMagic = "UTDA";
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint64_t kNoDuplicate = std::numeric_limits<std::uint64_t>::max();
}  // namespace

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  binio::Writer w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u64(ds.tracks.size());
  w.u32(static_cast<std::uint32_t>(ds.max_frames));
  w.u32(static_cast<std::uint32_t>(ds.latent_dim));
  w.u32(static_cast<std::uint32_t>(ds.cond_dim));
  w.u64(ds.seed);
  for (const auto& t : ds.tracks) {
    w.u64(t.id);
    w.u32(static_cast<std::uint32_t>(t.actual_len));
    w.u32(t.cluster);
    w.u64(t.duplicate_of.value_or(kNoDuplicate));
    w.f64s(t.cond);
    w.f64s(t.frames);
  }
  return w.release();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kDatasetMagic);
  const std::size_t version_at = r.offset();
  if (r.u32() != kDatasetVersion) throw FormatError("unsupported dataset version", version_at);
  Dataset ds;
  const std::uint64_t n = r.u64();
  ds.max_frames = r.u32();
  ds.latent_dim = r.u32();
  ds.cond_dim = r.u32();
  ds.seed = r.u64();
  const std::size_t per_track = 24 + 8 * (ds.cond_dim + ds.max_frames * ds.latent_dim);
  if (n > r.remaining() / per_track) throw FormatError("track count exceeds file size", r.offset());
  ds.tracks.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    LatentTrack t;
    t.id = r.u64();
    t.actual_len = r.u32();
    t.cluster = r.u32();
    const std::uint64_t dup = r.u64();
    if (dup != kNoDuplicate) t.duplicate_of = dup;
    t.max_frames = ds.max_frames;
    t.latent_dim = ds.latent_dim;
    t.cond.resize(ds.cond_dim);
    r.f64s(t.cond);
    t.frames.resize(ds.max_frames * ds.latent_dim);
    r.f64s(t.frames);
    if (t.id != i) throw FormatError("track id does not match its position", at);
    try {
      t.validate();
    } catch (const Error& e) {
      throw FormatError(e.what(), at);
    }
    ds.tracks.push_back(std::move(t));
  }
  r.expect_end();
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) { binio::write_file(path, encode_dataset(ds)); }

Dataset read_dataset(const std::string& path) { return decode_dataset(binio::read_file(path)); }

}  // namespace tda
