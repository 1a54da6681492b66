#pragma once

// Experiment driver: one JSON config, artifact-producing commands with provenance
// sidecars, the unlearning grid search and the test-to-train comparison.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tda/attribution.hpp"
#include "tda/data.hpp"
#include "tda/model.hpp"
#include "tda/unlearn.hpp"

namespace tda {

inline constexpr int kConfigVersion = 1;

struct GridSpec {
  std::vector<double> learning_rates{1e-6};
  std::vector<std::size_t> steps{1};
  std::vector<LayerGroup> groups{LayerGroup::All};
  std::vector<MaskPolicy> masks{MaskPolicy::mixed(), MaskPolicy::none(), MaskPolicy::both()};
};

struct BaselineSpec {
  std::size_t window = 10;
  std::size_t hop = 1;
  std::size_t k = 0;  // 0 means min(100, N/4)
};

struct ExperimentConfig {
  int config_version = kConfigVersion;
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  ModelConfig model;
  TrainConfig train;
  std::size_t fim_timesteps = kDefaultFimTimesteps;
  UnlearnConfig unlearn;  // base values for the grid (grad_timesteps, damping, defaults)
  GridSpec grid;
  EvalSpec eval;
  BaselineSpec baseline;
  std::size_t grid_targets = 20;
  std::size_t generated = 16;
  std::size_t sample_steps = 50;
  std::size_t fd_samples = 64;
  std::string out = "out";

  ExperimentConfig() { derive_seeds(); }

  // Fills dataset/model/train/unlearn/eval seeds from the global seed. Call again
  // after changing `seed`.
  void derive_seeds();
  void validate() const;
  std::size_t top_k(std::size_t n) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::string& path);

// Command-line overrides of the unlearning settings.
struct Overrides {
  std::optional<double> lr;
  std::optional<std::size_t> steps;
  std::optional<LayerGroup> group;
  std::optional<MaskPolicy> mask;
  std::optional<std::uint64_t> target;
};

void apply_overrides(ExperimentConfig& cfg, const Overrides& o);

// Artifact paths under cfg.out.
struct Paths {
  std::string root;
  explicit Paths(std::string out) : root(std::move(out)) {}
  std::string dataset() const { return root + "/dataset.bin"; }
  std::string checkpoint() const { return root + "/checkpoint.bin"; }
  std::string fim() const { return root + "/fim_all.bin"; }
  std::string sidecar(const std::string& artifact) const;
};

std::string file_hash(const std::string& path);

struct CommandResult {
  std::string artifact;
  bool skipped = false;  // an up-to-date artifact was already present
};

CommandResult cmd_gen_data(const ExperimentConfig& cfg, Exec exec = Exec::Parallel);
CommandResult cmd_train(const ExperimentConfig& cfg, Exec exec = Exec::Parallel);
CommandResult cmd_fim(const ExperimentConfig& cfg, Exec exec = Exec::Parallel);
// Unlearns the training track `target` with the first grid cell.
CommandResult cmd_unlearn(const ExperimentConfig& cfg, std::uint64_t target, Exec exec = Exec::Parallel);
// Self-influence scores for `target` with the first grid cell.
CommandResult cmd_attribute(const ExperimentConfig& cfg, std::uint64_t target, Exec exec = Exec::Parallel);
CommandResult cmd_grid_search(const ExperimentConfig& cfg, Exec exec = Exec::Parallel);
CommandResult cmd_test_to_train(const ExperimentConfig& cfg, Exec exec = Exec::Parallel);
// gen-data, train, fim, grid-search and test-to-train in order.
std::vector<CommandResult> cmd_pipeline(const ExperimentConfig& cfg, Exec exec = Exec::Parallel);

// Library-level pieces shared by the commands and the acceptance suite.

struct GridRow {
  LayerGroup group = LayerGroup::All;
  MaskPolicy mask;
  double lr = 0.0;
  std::size_t steps = 0;
  std::vector<std::uint64_t> targets;
  std::vector<std::size_t> ranks;
  std::vector<double> target_tau;  // each target's own score
  std::vector<double> sim_topk;
  std::vector<double> sim_botk;
  double fd_reference = 0.0;
  double fd_unlearned = 0.0;

  double mean_rank() const;
  double median_rank() const;
  double mean_sim_topk() const;
  double mean_sim_botk() const;
};

// Mean descriptor embedding of every track (the k-means and top-k space).
std::vector<std::vector<double>> track_embeddings(const Dataset& ds, const BaselineSpec& b);
std::vector<std::uint64_t> grid_targets(const Dataset& ds, const ExperimentConfig& cfg);

// Descriptor embeddings of `count` generated samples, conditioned on cluster
// prototypes in turn.
std::vector<std::vector<double>> sample_embeddings(const ModelParams& params, const DatasetSpec& spec,
                                                   std::size_t count, std::size_t sample_steps, std::uint64_t seed,
                                                   Exec exec = Exec::Parallel);

GridRow run_grid_cell(const Checkpoint& base, const FimDiagonal& fim_all, const Dataset& ds,
                      const ExperimentConfig& cfg, LayerGroup group, MaskPolicy mask, double lr, std::size_t steps,
                      const std::vector<std::uint64_t>& targets, LossCache& cache, Exec exec = Exec::Parallel);

std::string grid_csv(std::vector<GridRow> rows);

// G generated tracks; sample g uses cluster_condition(g mod K) and gets id N + g.
std::vector<LatentTrack> generate_samples(const ModelParams& params, const DatasetSpec& spec, std::size_t count,
                                          std::size_t sample_steps, std::uint64_t seed, std::size_t first_id,
                                          Exec exec = Exec::Parallel);

}  // namespace tda
