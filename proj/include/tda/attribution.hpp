#pragma once

// Attribution scores as paired loss deltas between the base and unlearned models:
//   tau_i = L(z_i, theta_unlearned) - L(z_i, theta_0)

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tda/data.hpp"
#include "tda/fim.hpp"
#include "tda/model.hpp"
#include "tda/unlearn.hpp"

namespace tda {

struct EvalSpec {
  std::size_t eval_timesteps = 64;
  std::uint64_t seed = 0;
  bool mask_loss = false;

  void validate() const;
  std::string key() const;
  bool operator==(const EvalSpec&) const = default;
};

void to_json(nlohmann::json& j, const EvalSpec& s);
void from_json(const nlohmann::json& j, EvalSpec& s);

// Evaluation draws are keyed by track id; members of a duplicate pair share the
// smaller id so identical tracks get identical losses.
std::uint64_t draw_key(const LatentTrack& track);

// Per-track diffusion loss over stratified draws seeded by (spec.seed, draw_key).
// Draws never depend on the checkpoint, so before/after losses are paired.
std::vector<double> eval_losses(const ModelParams& params, const std::vector<LatentTrack>& tracks,
                                const EvalSpec& spec, Exec exec = Exec::Parallel);
std::vector<double> eval_losses(const Checkpoint& ckpt, const Dataset& dataset, const EvalSpec& spec,
                                Exec exec = Exec::Parallel);

std::vector<double> attribution_scores(std::span<const double> loss_before, std::span<const double> loss_after);

struct AttributionResult {
  std::string target;                   // "train:<id>" or "generated:<tag>"
  std::optional<std::uint64_t> target_id;  // training id in self-influence mode
  std::vector<double> tau;
  std::vector<double> loss_before;
  std::vector<double> loss_after;
  Digest base_hash{};
  Digest unlearned_hash{};
  EvalSpec eval;
  UnlearnConfig unlearn;
};

// Base-model loss vectors keyed by (checkpoint hash, eval spec), optionally
// persisted as files under `dir`.
class LossCache {
 public:
  explicit LossCache(std::string dir = {}) : dir_(std::move(dir)) {}

  const std::vector<double>& get(const Checkpoint& ckpt, const Dataset& dataset, const EvalSpec& spec,
                                 Exec exec = Exec::Parallel);

 private:
  std::string dir_;
  std::map<std::string, std::vector<double>> memory_;
};

AttributionResult score_unlearned(const Checkpoint& base, const Checkpoint& unlearned, const Dataset& dataset,
                                  const EvalSpec& spec, LossCache& cache, Exec exec = Exec::Parallel);

// Train-to-train: unlearn each training target and score every training track.
std::vector<AttributionResult> self_influence_run(const Checkpoint& base, const FimDiagonal& fim,
                                                  const Dataset& dataset, const std::vector<std::uint64_t>& target_ids,
                                                  const UnlearnConfig& ucfg, const EvalSpec& espec, LossCache& cache,
                                                  Exec exec = Exec::Parallel);

// Test-to-train: unlearn each generated sample and score every training track.
std::vector<AttributionResult> test_to_train_run(const Checkpoint& base, const FimDiagonal& fim,
                                                 const std::vector<LatentTrack>& generated, const Dataset& dataset,
                                                 const UnlearnConfig& ucfg, const EvalSpec& espec, LossCache& cache,
                                                 Exec exec = Exec::Parallel);

inline constexpr std::size_t kLooMaxTracks = 32;

// Leave-one-out retraining: tau_i = L(z_i, theta_without_target) - L(z_i, theta_full)
// with paired draws. Retrains from the same initialisation; `full` may supply the
// already-trained full-data checkpoint.
std::vector<double> loo_oracle(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                               std::uint64_t target_id, const EvalSpec& espec, const Checkpoint* full = nullptr,
                               Exec exec = Exec::Parallel);

// Scores file (track_id,loss_before,loss_after,tau) and its JSON sidecar.
std::string scores_csv(const AttributionResult& r);
nlohmann::json scores_sidecar(const AttributionResult& r);

// Shortest round-trip decimal form used in every CSV output.
std::string format_double(double v);

}  // namespace tda
