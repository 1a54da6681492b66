#include "tda/unlearn.hpp"

#include <cmath>

#include "tda/errors.hpp"
#include "tda/rng.hpp"

namespace tda {

using nlohmann::json;

namespace {
constexpr std::size_t kDrawChunk = 64;
}

MaskPolicy MaskPolicy::parse(std::string_view name) {
  if (name == "none") return none();
  if (name == "both") return both();
  if (name == "mixed") return mixed();
  throw ArgumentError("unknown mask policy '" + std::string(name) + "' (expected none, both or mixed)");
}

std::string MaskPolicy::name() const {
  if (*this == none()) return "none";
  if (*this == both()) return "both";
  if (*this == mixed()) return "mixed";
  return "loss_only";
}

void UnlearnConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("unlearn config: learning rate must be finite and >= 0");
  }
  if (steps < 1) throw ArgumentError("unlearn config: steps must be >= 1");
  if (grad_timesteps < 1) throw ArgumentError("unlearn config: grad_timesteps must be >= 1");
  if (damping && !(*damping > 0.0)) throw ArgumentError("unlearn config: damping must be > 0");
}

void to_json(json& j, const UnlearnConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"steps", c.steps},
           {"group", group_name(c.group)},
           {"grad_timesteps", c.grad_timesteps},
           {"mask", c.mask.name()},
           {"mask_unlearn", c.mask.mask_unlearn},
           {"mask_loss", c.mask.mask_loss},
           {"seed", c.seed}};
  j["damping"] = c.damping ? json(*c.damping) : json(nullptr);
}

void from_json(const json& j, UnlearnConfig& c) {
  UnlearnConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.steps = j.value("steps", d.steps);
  c.group = parse_group(j.value("group", std::string(group_name(d.group))));
  c.grad_timesteps = j.value("grad_timesteps", d.grad_timesteps);
  if (j.contains("mask_unlearn") || j.contains("mask_loss")) {
    c.mask.mask_unlearn = j.value("mask_unlearn", d.mask.mask_unlearn);
    c.mask.mask_loss = j.value("mask_loss", d.mask.mask_loss);
  } else if (j.contains("mask")) {
    c.mask = MaskPolicy::parse(j.at("mask").get<std::string>());
  }
  c.seed = j.value("seed", d.seed);
  if (j.contains("damping") && !j.at("damping").is_null()) c.damping = j.at("damping").get<double>();
}

std::vector<double> unlearning_gradient(const ModelParams& params, const LatentTrack& target,
                                        const UnlearnConfig& cfg, std::size_t step, Exec exec) {
  cfg.validate();
  const auto& mc = params.config;
  const auto draws =
      make_draws(derive_seed(cfg.seed, {target.id, step}), cfg.grad_timesteps, mc.max_frames, mc.latent_dim);
  const std::size_t chunks = (draws.size() + kDrawChunk - 1) / kDrawChunk;
  const double scale = 1.0 / static_cast<double>(draws.size());
  auto full = chunked_sum(chunks, 1, params.layout.total(), exec, [&](std::size_t c, std::span<double> acc) {
    const std::size_t begin = c * kDrawChunk;
    const std::size_t count = std::min(kDrawChunk, draws.size() - begin);
    accumulate_loss_gradient(params, target, std::span<const NoiseDraw>(draws).subspan(begin, count),
                             cfg.mask.mask_unlearn, scale, acc);
  });
  return params.layout.gather(cfg.group, full);
}

Checkpoint unlearn(const Checkpoint& base, const FimDiagonal& fim, const LatentTrack& target,
                   const UnlearnConfig& cfg, Exec exec) {
  cfg.validate();
  if (fim.group != cfg.group) {
    throw ArgumentError("unlearn: FIM was estimated for group '" + std::string(group_name(fim.group)) +
                        "' but the config targets '" + std::string(group_name(cfg.group)) + "'");
  }
  if (fim.values.size() != base.params.layout.group_size(cfg.group)) {
    throw ArgumentError("unlearn: FIM length does not match the checkpoint's parameter group");
  }
  const double damping = cfg.damping.value_or(default_damping(fim));

  Checkpoint out = base;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto grad = unlearning_gradient(out.params, target, cfg, step, exec);
    const auto update = precondition(fim, grad, damping);
    for (double u : update) {
      if (!std::isfinite(u * cfg.learning_rate)) throw NumericError("non-finite parameter update", static_cast<long>(step));
    }
    out.params.layout.scatter_add(cfg.group, update, cfg.learning_rate, out.params.values);
  }
  out.rehash();
  out.provenance = json{{"base_hash", to_hex(base.hash)},
                        {"unlearn_config", cfg},
                        {"damping", damping},
                        {"target_id", target.id},
                        {"base_provenance", base.provenance}};
  return out;
}

}  // namespace tda
