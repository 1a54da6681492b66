#include "tda/attribution.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>

#include "tda/binio.hpp"
#include "tda/errors.hpp"
#include "tda/rng.hpp"

namespace tda {

using nlohmann::json;

void EvalSpec::validate() const {
  if (eval_timesteps < 1) throw ArgumentError("eval spec: eval_timesteps must be >= 1");
}

std::string EvalSpec::key() const {
  return std::to_string(eval_timesteps) + "_" + std::to_string(seed) + "_" + (mask_loss ? "masked" : "unmasked");
}

void to_json(json& j, const EvalSpec& s) {
  j = json{{"eval_timesteps", s.eval_timesteps}, {"seed", s.seed}, {"mask_loss", s.mask_loss}};
}

void from_json(const json& j, EvalSpec& s) {
  EvalSpec d;
  s.eval_timesteps = j.value("eval_timesteps", d.eval_timesteps);
  s.seed = j.value("seed", d.seed);
  s.mask_loss = j.value("mask_loss", d.mask_loss);
}

std::uint64_t draw_key(const LatentTrack& track) {
  return track.duplicate_of ? std::min(track.id, *track.duplicate_of) : track.id;
}

std::vector<double> eval_losses(const ModelParams& params, const std::vector<LatentTrack>& tracks,
                                const EvalSpec& spec, Exec exec) {
  spec.validate();
  if (tracks.empty()) throw ArgumentError("eval_losses: dataset is empty");
  const auto& cfg = params.config;
  std::vector<double> out(tracks.size());
  for_each_index(tracks.size(), exec, [&](std::size_t i) {
    const auto draws =
        make_draws(derive_seed(spec.seed, {draw_key(tracks[i])}), spec.eval_timesteps, cfg.max_frames, cfg.latent_dim);
    out[i] = diffusion_loss(params, tracks[i], draws, spec.mask_loss);
  });
  return out;
}

std::vector<double> eval_losses(const Checkpoint& ckpt, const Dataset& dataset, const EvalSpec& spec, Exec exec) {
  return eval_losses(ckpt.params, dataset.tracks, spec, exec);
}

std::vector<double> attribution_scores(std::span<const double> loss_before, std::span<const double> loss_after) {
  if (loss_before.size() != loss_after.size()) {
    throw ShapeError("attribution_scores: before has " + std::to_string(loss_before.size()) + " entries, after has " +
                     std::to_string(loss_after.size()));
  }
  std::vector<double> tau(loss_before.size());
  for (std::size_t i = 0; i < tau.size(); ++i) tau[i] = loss_after[i] - loss_before[i];
  return tau;
}

namespace {
constexpr std::string_view kLossMagic = "UTLC";
}

const std::vector<double>& LossCache::get(const Checkpoint& ckpt, const Dataset& dataset, const EvalSpec& spec,
                                          Exec exec) {
  const std::string key = to_hex(ckpt.hash) + "_" + spec.key() + "_n" + std::to_string(dataset.size());
  if (auto it = memory_.find(key); it != memory_.end()) return it->second;

  std::string path;
  if (!dir_.empty()) {
    path = (std::filesystem::path(dir_) / ("losses_" + key + ".bin")).string();
    if (std::filesystem::exists(path)) {
      const auto bytes = binio::read_file(path);
      binio::Reader r(bytes);
      r.expect_magic(kLossMagic);
      const std::uint64_t n = r.u64();
      if (n == dataset.size() && r.remaining() == 8 * n) {
        std::vector<double> v(n);
        r.f64s(v);
        return memory_.emplace(key, std::move(v)).first->second;
      }
    }
  }
  auto losses = eval_losses(ckpt, dataset, spec, exec);
  if (!path.empty()) {
    std::filesystem::create_directories(dir_);
    binio::Writer w;
    w.bytes(kLossMagic);
    w.u64(losses.size());
    w.f64s(losses);
    binio::write_file(path, w.buffer());
  }
  return memory_.emplace(key, std::move(losses)).first->second;
}

AttributionResult score_unlearned(const Checkpoint& base, const Checkpoint& unlearned, const Dataset& dataset,
                                  const EvalSpec& spec, LossCache& cache, Exec exec) {
  AttributionResult r;
  r.loss_before = cache.get(base, dataset, spec, exec);
  r.loss_after = eval_losses(unlearned, dataset, spec, exec);
  r.tau = attribution_scores(r.loss_before, r.loss_after);
  r.base_hash = base.hash;
  r.unlearned_hash = unlearned.hash;
  r.eval = spec;
  return r;
}

std::vector<AttributionResult> self_influence_run(const Checkpoint& base, const FimDiagonal& fim,
                                                  const Dataset& dataset, const std::vector<std::uint64_t>& target_ids,
                                                  const UnlearnConfig& ucfg, const EvalSpec& espec, LossCache& cache,
                                                  Exec exec) {
  std::vector<AttributionResult> out;
  for (auto id : target_ids) {
    if (id >= dataset.size()) throw ArgumentError("self_influence_run: target id " + std::to_string(id) + " is not in the dataset");
    const auto unlearned = unlearn(base, fim, dataset.tracks[id], ucfg, exec);
    auto r = score_unlearned(base, unlearned, dataset, espec, cache, exec);
    r.target = "train:" + std::to_string(id);
    r.target_id = id;
    r.unlearn = ucfg;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<AttributionResult> test_to_train_run(const Checkpoint& base, const FimDiagonal& fim,
                                                 const std::vector<LatentTrack>& generated, const Dataset& dataset,
                                                 const UnlearnConfig& ucfg, const EvalSpec& espec, LossCache& cache,
                                                 Exec exec) {
  std::vector<AttributionResult> out;
  for (std::size_t g = 0; g < generated.size(); ++g) {
    const auto& sample = generated[g];
    if (sample.max_frames != dataset.max_frames || sample.latent_dim != dataset.latent_dim ||
        sample.cond.size() != dataset.cond_dim) {
      throw ShapeError("test_to_train_run: generated sample " + std::to_string(g) + " does not match the dataset shape");
    }
    const auto unlearned = unlearn(base, fim, sample, ucfg, exec);
    auto r = score_unlearned(base, unlearned, dataset, espec, cache, exec);
    r.target = "generated:" + std::to_string(g);
    r.unlearn = ucfg;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> loo_oracle(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                               std::uint64_t target_id, const EvalSpec& espec, const Checkpoint* full, Exec exec) {
  if (dataset.size() > kLooMaxTracks) {
    throw ArgumentError("loo_oracle: refusing to retrain on " + std::to_string(dataset.size()) + " tracks (limit " +
                        std::to_string(kLooMaxTracks) + ")");
  }
  if (target_id >= dataset.size()) throw ArgumentError("loo_oracle: target id is not in the dataset");
  Checkpoint trained_full = full != nullptr ? *full : train(dataset.tracks, model_cfg, train_cfg, exec);
  std::vector<LatentTrack> kept;
  for (const auto& t : dataset.tracks) {
    if (t.id != target_id) kept.push_back(t);
  }
  const auto retrained = train(kept, model_cfg, train_cfg, exec);
  const auto before = eval_losses(trained_full.params, dataset.tracks, espec, exec);
  const auto after = eval_losses(retrained.params, dataset.tracks, espec, exec);
  return attribution_scores(before, after);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string scores_csv(const AttributionResult& r) {
  std::string s = "track_id,loss_before,loss_after,tau\n";
  for (std::size_t i = 0; i < r.tau.size(); ++i) {
    s += std::to_string(i) + "," + format_double(r.loss_before[i]) + "," + format_double(r.loss_after[i]) + "," +
         format_double(r.tau[i]) + "\n";
  }
  return s;
}

json scores_sidecar(const AttributionResult& r) {
  json j{{"target", r.target},
         {"base_hash", to_hex(r.base_hash)},
         {"unlearned_hash", to_hex(r.unlearned_hash)},
         {"eval_spec", r.eval},
         {"unlearn_config", r.unlearn}};
  j["target_id"] = r.target_id ? json(*r.target_id) : json(nullptr);
  return j;
}

}  // namespace tda
