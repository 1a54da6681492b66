#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "tda/fim.hpp"
#include "tda/model.hpp"
#include "tda/parallel.hpp"

namespace tda {

// Whether padded frames are excluded from the unlearning gradient (mask_unlearn)
// and from the attribution loss (mask_loss).
struct MaskPolicy {
  bool mask_unlearn = true;
  bool mask_loss = false;

  static constexpr MaskPolicy none() { return {false, false}; }
  static constexpr MaskPolicy both() { return {true, true}; }
  static constexpr MaskPolicy mixed() { return {true, false}; }

  static MaskPolicy parse(std::string_view name);
  std::string name() const;  // "none", "both", "mixed" or "loss_only"
  bool operator==(const MaskPolicy&) const = default;
};

struct UnlearnConfig {
  double learning_rate = 1e-6;
  std::size_t steps = 1;
  LayerGroup group = LayerGroup::All;
  std::size_t grad_timesteps = 2048;
  MaskPolicy mask = MaskPolicy::mixed();
  std::optional<double> damping;  // default_damping(fim) when unset
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const UnlearnConfig&) const = default;
};

void to_json(nlohmann::json& j, const UnlearnConfig& c);
void from_json(const nlohmann::json& j, UnlearnConfig& c);

// Mean target-loss gradient over `grad_timesteps` stratified draws seeded by
// (cfg.seed, target id, step), restricted to cfg.group. Masked per cfg.mask.mask_unlearn.
std::vector<double> unlearning_gradient(const ModelParams& params, const LatentTrack& target,
                                        const UnlearnConfig& cfg, std::size_t step, Exec exec = Exec::Parallel);

// Gradient-ascent unlearning preconditioned by the inverse damped Fisher diagonal:
//   theta_group += lr * g / (F + damping), repeated cfg.steps times with g taken at the
// current iterate. Parameters outside cfg.group are left untouched.
Checkpoint unlearn(const Checkpoint& base, const FimDiagonal& fim, const LatentTrack& target,
                   const UnlearnConfig& cfg, Exec exec = Exec::Parallel);

}  // namespace tda
