// Command-line driver for the unlearning attribution experiments.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "tda/errors.hpp"
#include "tda/experiment.hpp"
#include "tda/parallel.hpp"

using namespace tda;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  std::string out;
  std::optional<double> lr;
  std::optional<std::size_t> steps;
  std::string group;
  std::string mask;
  std::optional<std::uint64_t> target;
};

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.derive_seeds();
  }
  if (!c.out.empty()) cfg.out = c.out;
  Overrides o;
  o.lr = c.lr;
  o.steps = c.steps;
  if (!c.group.empty()) o.group = parse_group(c.group);
  if (!c.mask.empty()) o.mask = MaskPolicy::parse(c.mask);
  o.target = c.target;
  apply_overrides(cfg, o);
  cfg.validate();
  if (c.jobs > 0) set_num_threads(c.jobs);
  return cfg;
}

void report(const CommandResult& r) {
  std::printf("%s %s\n", r.skipped ? "up-to-date" : "wrote", r.artifact.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unlearning-based training data attribution for a latent diffusion model"};
  app.require_subcommand(1);
  Common c;
  app.add_option("--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", c.seed, "Global seed; component seeds derive from it");
  app.add_option("--jobs", c.jobs, "Worker threads (0 = OpenMP default)")->check(CLI::NonNegativeNumber);
  app.add_option("--out", c.out, "Output directory");
  app.add_option("--lr", c.lr, "Unlearning learning rate");
  app.add_option("--steps", c.steps, "Unlearning steps");
  app.add_option("--group", c.group, "Layer group")->check(CLI::IsMember({"to_kv", "cross", "self", "all"}));
  app.add_option("--mask", c.mask, "Masking policy")->check(CLI::IsMember({"none", "both", "mixed"}));

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  auto* trn = app.add_subcommand("train", "Train the base model");
  auto* fim = app.add_subcommand("fim", "Estimate the diagonal Fisher information");
  auto* unl = app.add_subcommand("unlearn", "Unlearn one training track");
  unl->add_option("--target", c.target, "Training track id")->required();
  auto* att = app.add_subcommand("attribute", "Self-influence scores for one training track");
  att->add_option("--target", c.target, "Training track id")->required();
  auto* grid = app.add_subcommand("grid-search", "Unlearning hyperparameter grid over k-means targets");
  auto* t2t = app.add_subcommand("test-to-train", "Attribute generated samples to training tracks");
  auto* pipe = app.add_subcommand("pipeline", "gen-data, train, fim, grid-search, test-to-train");
  auto* show = app.add_subcommand("show-config", "Print the resolved config as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = resolve(c);
    if (*gen) report(cmd_gen_data(cfg));
    if (*trn) report(cmd_train(cfg));
    if (*fim) report(cmd_fim(cfg));
    if (*unl) report(cmd_unlearn(cfg, *c.target));
    if (*att) report(cmd_attribute(cfg, *c.target));
    if (*grid) report(cmd_grid_search(cfg));
    if (*t2t) report(cmd_test_to_train(cfg));
    if (*pipe) {
      for (const auto& r : cmd_pipeline(cfg)) report(r);
    }
    if (*show) std::cout << nlohmann::json(cfg).dump(2) << "\n";
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
