#include "tda/fim.hpp"

#include "tda/binio.hpp"
#include "tda/errors.hpp"
#include "tda/rng.hpp"

namespace tda {

namespace {
constexpr std::size_t kFimChunk = 8;
constexpr std::string_view kFimMagic = "UTFM";
constexpr std::uint32_t kFimVersion = 1;
}  // namespace

double FimDiagonal::mean() const {
  if (values.empty()) return 0.0;
  return tree_sum(values) / static_cast<double>(values.size());
}

namespace {

// Adds 1/T sum_t g_t^2 (restricted to group) into acc.
void add_track_fisher(const ModelParams& params, const LatentTrack& track, LayerGroup group, std::size_t timesteps,
                      std::uint64_t seed, bool apply_mask, double weight, std::span<double> acc) {
  const auto& cfg = params.config;
  const auto draws = make_draws(derive_seed(seed, {track.id}), timesteps, cfg.max_frames, cfg.latent_dim);
  std::vector<double> full(params.layout.total());
  const double inv_t = weight / static_cast<double>(timesteps);
  for (const auto& d : draws) {
    std::fill(full.begin(), full.end(), 0.0);
    accumulate_loss_gradient(params, track, std::span<const NoiseDraw>(&d, 1), apply_mask, 1.0, full);
    std::size_t k = 0;
    for (const auto& s : params.layout.sections()) {
      if (!in_group(s.kind, group)) continue;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double g = full[s.offset + i];
        acc[k++] += inv_t * g * g;
      }
    }
  }
}

}  // namespace

std::vector<double> track_fisher(const ModelParams& params, const LatentTrack& track, LayerGroup group,
                                 std::size_t timesteps, std::uint64_t seed, bool apply_mask) {
  if (timesteps < 1) throw ArgumentError("track_fisher: timesteps must be >= 1");
  std::vector<double> acc(params.layout.group_size(group), 0.0);
  add_track_fisher(params, track, group, timesteps, seed, apply_mask, 1.0, acc);
  return acc;
}

FimDiagonal estimate_fim_diag(const Checkpoint& ckpt, const Dataset& dataset, LayerGroup group,
                              std::size_t timesteps, std::uint64_t seed, bool apply_mask, Exec exec) {
  if (dataset.tracks.empty()) throw ArgumentError("estimate_fim_diag: dataset is empty");
  if (timesteps < 1) throw ArgumentError("estimate_fim_diag: timesteps must be >= 1");
  const auto& params = ckpt.params;
  const std::size_t n = dataset.tracks.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  FimDiagonal fim;
  fim.group = group;
  fim.num_samples = n;
  fim.num_timesteps = timesteps;
  fim.seed = seed;
  fim.values = chunked_sum(n, kFimChunk, params.layout.group_size(group), exec,
                           [&](std::size_t i, std::span<double> acc) {
                             add_track_fisher(params, dataset.tracks[i], group, timesteps, seed, apply_mask, inv_n,
                                              acc);
                           });
  return fim;
}

FimDiagonal restrict_fim(const FimDiagonal& fim, const ParamLayout& layout, LayerGroup group) {
  if (fim.values.size() != layout.group_size(fim.group)) {
    throw ShapeError("restrict_fim: estimate does not match the layout");
  }
  FimDiagonal out = fim;
  out.group = group;
  out.values.clear();
  std::size_t k = 0;
  for (const auto& s : layout.sections()) {
    if (!in_group(s.kind, fim.group)) {
      if (in_group(s.kind, group)) {
        throw ArgumentError("restrict_fim: group '" + std::string(group_name(group)) + "' is not contained in '" +
                            std::string(group_name(fim.group)) + "'");
      }
      continue;
    }
    if (in_group(s.kind, group)) {
      out.values.insert(out.values.end(), fim.values.begin() + static_cast<std::ptrdiff_t>(k),
                        fim.values.begin() + static_cast<std::ptrdiff_t>(k + s.size()));
    }
    k += s.size();
  }
  return out;
}

double default_damping(const FimDiagonal& fim) { return 1e-8 * fim.mean() + 1e-12; }

std::vector<double> precondition(const FimDiagonal& fim, std::span<const double> grad, double damping) {
  if (grad.size() != fim.values.size()) {
    throw ShapeError("precondition: gradient length " + std::to_string(grad.size()) + " does not match FIM length " +
                     std::to_string(fim.values.size()));
  }
  if (!(damping > 0.0)) throw ArgumentError("precondition: damping must be > 0");
  std::vector<double> out(grad.size());
  for (std::size_t j = 0; j < grad.size(); ++j) out[j] = grad[j] / (fim.values[j] + damping);
  return out;
}

std::vector<std::uint8_t> encode_fim(const FimDiagonal& fim) {
  binio::Writer w;
  w.bytes(kFimMagic);
  w.u32(kFimVersion);
  w.str(group_name(fim.group));
  w.u64(fim.num_samples);
  w.u32(static_cast<std::uint32_t>(fim.num_timesteps));
  w.u64(fim.seed);
  w.u64(fim.values.size());
  w.f64s(fim.values);
  return w.release();
}

FimDiagonal decode_fim(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kFimMagic);
  const std::size_t version_at = r.offset();
  if (r.u32() != kFimVersion) throw FormatError("unsupported FIM version", version_at);
  FimDiagonal fim;
  const std::size_t group_at = r.offset();
  try {
    fim.group = parse_group(r.str());
  } catch (const ArgumentError& e) {
    throw FormatError(e.what(), group_at);
  }
  fim.num_samples = r.u64();
  fim.num_timesteps = r.u32();
  fim.seed = r.u64();
  const std::size_t count_at = r.offset();
  const std::uint64_t count = r.u64();
  if (count > r.remaining() / 8) throw FormatError("value count exceeds file size", count_at);
  fim.values.resize(count);
  r.f64s(fim.values);
  r.expect_end();
  for (double v : fim.values) {
    if (!(v >= 0.0)) throw FormatError("negative or NaN FIM entry", count_at);
  }
  return fim;
}

void write_fim(const FimDiagonal& fim, const std::string& path) { binio::write_file(path, encode_fim(fim)); }

FimDiagonal read_fim(const std::string& path) { return decode_fim(binio::read_file(path)); }

}  // namespace tda
