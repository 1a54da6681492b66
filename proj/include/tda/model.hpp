#pragma once

// Toy conditional latent diffusion transformer trained with the v-objective.
//
// Architecture (pre-norm, no attention masking):
//   x    = z_t W_in + b_in + pos + temb(t)
//   ctx  = reshape(cond W_c + b_c)                 (cond_tokens x width)
//   per block:  x += SelfAttn(norm1(x))
//               x += CrossAttn(norm2(x), ctx)
//               x += FF(norm3(x))                  (SiLU, hidden = ff_mult * width)
//   v_hat = norm_f(x) W_out + b_out
// Norms are RMSNorm with a learned gain. All arithmetic is in double precision and
// every gradient is computed analytically.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tda/hash.hpp"
#include "tda/parallel.hpp"
#include "tda/track.hpp"

namespace tda {

struct ScheduleValue {
  double alpha;
  double sigma;
};

// Cosine schedule: alpha = cos(pi t / 2), sigma = sin(pi t / 2). Throws DomainError
// for t outside [0, 1].
ScheduleValue noise_schedule(double t);

// alpha_t * eps - sigma_t * z0.
std::vector<double> v_target(std::span<const double> z0, std::span<const double> eps, double t);

struct ModelConfig {
  std::size_t latent_dim = 8;
  std::size_t max_frames = 64;
  std::size_t cond_dim = 8;
  std::size_t width = 32;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t cond_tokens = 4;
  std::size_t ff_mult = 2;
  std::size_t time_features = 16;  // even; sin/cos pairs
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class SectionKind {
  Embedding,
  TimeEmbedding,
  Norm,
  SelfAttention,
  CrossAttentionOther,
  CrossAttentionKV,
  FeedForward,
  Output,
};

// Parameter subsets targeted by unlearning.
//   to_kv: cross-attention key/value projections
//   cross: all cross-attention weights
//   self:  all self-attention weights
//   all:   every transformer-block weight (norm gains, attention, feed-forward)
enum class LayerGroup { ToKV, Cross, Self, All };

LayerGroup parse_group(std::string_view name);
std::string_view group_name(LayerGroup g);
bool in_group(SectionKind kind, LayerGroup g);

struct Section {
  std::string name;
  SectionKind kind;
  std::size_t rows;
  std::size_t cols;
  std::size_t offset;
  std::size_t size() const noexcept { return rows * cols; }
};

class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<Section>& sections() const noexcept { return sections_; }
  std::size_t total() const noexcept { return total_; }
  const Section& find(std::string_view name) const;

  std::size_t group_size(LayerGroup g) const;
  // Copy the group's entries (in layout order) out of a full-length vector.
  std::vector<double> gather(LayerGroup g, std::span<const double> full) const;
  // full[group entries] += scale * packed.
  void scatter_add(LayerGroup g, std::span<const double> packed, double scale, std::span<double> full) const;

  // Offsets of every section, resolved once for the forward pass.
  struct BlockSlots {
    std::size_t norm1, norm2, norm3;
    std::size_t self_q, self_k, self_v, self_out, self_out_b;
    std::size_t cross_q, cross_k, cross_v, cross_out, cross_out_b;
    std::size_t ff1, ff1_b, ff2, ff2_b;
  };
  struct Slots {
    std::size_t in_w, in_b, pos, cond_w, cond_b;
    std::size_t time1, time1_b, time2, time2_b;
    std::vector<BlockSlots> blocks;
    std::size_t final_norm, out_w, out_b;
  };
  const Slots& slots() const noexcept { return slots_; }

 private:
  std::size_t add(std::string name, SectionKind kind, std::size_t rows, std::size_t cols);

  std::vector<Section> sections_;
  std::size_t total_ = 0;
  Slots slots_{};
};

struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<double> values;

  explicit ModelParams(const ModelConfig& cfg);  // zero-initialised
  std::span<double> section(std::string_view name);
  std::span<const double> section(std::string_view name) const;
};

// Seeded initialisation (scaled Gaussian weights, unit norm gains, zero biases).
ModelParams init_params(const ModelConfig& cfg);

// Hash over the canonical config JSON, section names and parameter bytes.
Digest content_hash(const ModelParams& params);

// v_hat for a max_frames x latent_dim noisy latent.
std::vector<double> forward(const ModelParams& params, std::span<const double> z_t, double t,
                            std::span<const double> cond);

struct NoiseDraw {
  double t;
  std::vector<double> eps;
};

inline constexpr double kTimestepMargin = 1e-3;

// `count` draws with t on [margin, 1 - margin]. Stratified draws place one uniform
// sample in each of `count` equal-width bins of t.
std::vector<NoiseDraw> make_draws(std::uint64_t seed, std::size_t count, std::size_t frames, std::size_t dim,
                                  bool stratified = true);

// Mean over draws of the per-draw v-prediction squared error. Masked: rows below
// actual_len, divided by actual_len * d. Unmasked: all rows, divided by max_frames * d.
double diffusion_loss(const ModelParams& params, const LatentTrack& track, std::span<const NoiseDraw> draws,
                      bool apply_mask);

// Mean gradient of diffusion_loss restricted to `group`, in layout order.
std::vector<double> loss_gradient(const ModelParams& params, const LatentTrack& track,
                                  std::span<const NoiseDraw> draws, bool apply_mask, LayerGroup group);

// Adds scale * sum_over_draws(grad of per-draw loss) into full_grad (length
// layout.total()). Returns the sum of per-draw losses.
double accumulate_loss_gradient(const ModelParams& params, const LatentTrack& track,
                                std::span<const NoiseDraw> draws, bool apply_mask, double scale,
                                std::span<double> full_grad);

// Deterministic DDIM trajectory from seeded noise at t = 1 down to t = 0.
LatentTrack sample(const ModelParams& params, std::span<const double> cond, std::size_t num_steps,
                   std::size_t length, std::uint64_t seed);

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 32;  // >= dataset size means full batch
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 100;
  double min_lr_ratio = 0.05;  // cosine decay floor
  double grad_clip = 1.0;      // global-norm clip; <= 0 disables
  double loss_threshold = 0.5;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainMeta {
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // exponential moving average of the minibatch loss
  bool converged = false;
};

void to_json(nlohmann::json& j, const TrainMeta& m);
void from_json(const nlohmann::json& j, TrainMeta& m);

struct Checkpoint {
  ModelParams params;
  TrainMeta meta;
  nlohmann::json provenance = nlohmann::json::object();
  Digest hash{};

  void rehash() { hash = content_hash(params); }
};

// Unmasked Adam training from init_params(model_cfg). Per-sample draws are seeded by
// (seed, step, track id), so removing a track leaves every other track's draws intact.
Checkpoint train(const std::vector<LatentTrack>& tracks, const ModelConfig& model_cfg, const TrainConfig& cfg,
                 Exec exec = Exec::Parallel);

// Mean unmasked loss over `draws_per_track` held-out draws per track (seeded by
// (seed, track id)); used to measure training progress.
double heldout_loss(const ModelParams& params, const std::vector<LatentTrack>& tracks, std::size_t draws_per_track,
                    std::uint64_t seed, Exec exec = Exec::Parallel);

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace tda
