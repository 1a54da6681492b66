#include "tda/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "tda/analysis.hpp"
#include "tda/binio.hpp"
#include "tda/errors.hpp"
#include "tda/fim.hpp"
#include "tda/rng.hpp"

namespace tda {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum SeedKey : std::uint64_t {
  kSeedDataset = 1,
  kSeedModel,
  kSeedTrain,
  kSeedFim,
  kSeedUnlearn,
  kSeedEval,
  kSeedKMeans,
  kSeedSamples,
  kSeedFdA,
  kSeedFdB,
};

std::uint64_t component_seed(const ExperimentConfig& cfg, SeedKey k) { return derive_seed(cfg.seed, {k}); }

json grid_to_json(const GridSpec& g) {
  json groups = json::array(), masks = json::array();
  for (auto x : g.groups) groups.push_back(std::string(group_name(x)));
  for (auto m : g.masks) masks.push_back(m.name());
  return json{{"learning_rates", g.learning_rates}, {"steps", g.steps}, {"groups", groups}, {"masks", masks}};
}

GridSpec grid_from_json(const json& j) {
  GridSpec g;
  if (j.contains("learning_rates")) g.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  if (j.contains("steps")) g.steps = j.at("steps").get<std::vector<std::size_t>>();
  if (j.contains("groups")) {
    g.groups.clear();
    for (const auto& x : j.at("groups")) g.groups.push_back(parse_group(x.get<std::string>()));
  }
  if (j.contains("masks")) {
    g.masks.clear();
    for (const auto& x : j.at("masks")) g.masks.push_back(MaskPolicy::parse(x.get<std::string>()));
  }
  return g;
}

void write_json(const std::string& path, const json& j) { binio::write_text(path, j.dump(2) + "\n"); }

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in '" + path + "': " + e.what());
  }
}

void require(const std::string& path, const std::string& producer) {
  if (!fs::exists(path)) throw MissingArtifactError(path, producer);
}

// True when `artifact` exists, its sidecar records `key`, and the recorded hash
// still matches the file.
bool up_to_date(const Paths& p, const std::string& artifact, const json& key) {
  const auto side = p.sidecar(artifact);
  if (!fs::exists(artifact) || !fs::exists(side)) return false;
  try {
    const auto j = read_json(side);
    return j.value("key", json()) == key && j.value("artifact_hash", std::string()) == file_hash(artifact);
  } catch (const Error&) {
    return false;
  }
}

UnlearnConfig cell_config(const ExperimentConfig& cfg, LayerGroup group, MaskPolicy mask, double lr,
                          std::size_t steps) {
  UnlearnConfig u = cfg.unlearn;
  u.group = group;
  u.mask = mask;
  u.learning_rate = lr;
  u.steps = steps;
  return u;
}

EvalSpec eval_for(const ExperimentConfig& cfg, MaskPolicy mask) {
  EvalSpec e = cfg.eval;
  e.mask_loss = mask.mask_loss;
  return e;
}

struct Loaded {
  Dataset ds;
  Checkpoint base;
  FimDiagonal fim;
  json inputs;
};

Loaded load_all(const ExperimentConfig& cfg, bool need_fim) {
  Paths p(cfg.out);
  require(p.dataset(), "gen-data");
  require(p.checkpoint(), "train");
  if (need_fim) require(p.fim(), "fim");
  Loaded l{read_dataset(p.dataset()), read_checkpoint(p.checkpoint()), {}, json::object()};
  l.inputs["dataset"] = file_hash(p.dataset());
  l.inputs["checkpoint"] = file_hash(p.checkpoint());
  if (need_fim) {
    l.fim = read_fim(p.fim());
    l.inputs["fim"] = file_hash(p.fim());
  }
  return l;
}

}  // namespace

void ExperimentConfig::derive_seeds() {
  dataset.seed = component_seed(*this, kSeedDataset);
  model.seed = component_seed(*this, kSeedModel);
  train.seed = component_seed(*this, kSeedTrain);
  unlearn.seed = component_seed(*this, kSeedUnlearn);
  eval.seed = component_seed(*this, kSeedEval);
}

void ExperimentConfig::validate() const {
  if (config_version != kConfigVersion) {
    throw ArgumentError("unsupported config_version " + std::to_string(config_version) + " (expected " +
                        std::to_string(kConfigVersion) + ")");
  }
  dataset.validate();
  model.validate();
  unlearn.validate();
  eval.validate();
  if (model.latent_dim != dataset.latent_dim || model.max_frames != dataset.max_frames ||
      model.cond_dim != dataset.cond_dim) {
    throw ArgumentError("config: model and dataset shapes disagree");
  }
  if (grid.learning_rates.empty() || grid.steps.empty() || grid.groups.empty() || grid.masks.empty()) {
    throw ArgumentError("config: every grid list must be nonempty");
  }
  if (grid_targets < 1) throw ArgumentError("config: grid_targets must be >= 1");
  if (fd_samples < kEmbedDim + 1) throw ArgumentError("config: fd_samples must exceed the embedding dimension");
  if (sample_steps < 1) throw ArgumentError("config: sample_steps must be >= 1");
  if (out.empty()) throw ArgumentError("config: output directory is empty");
}

std::size_t ExperimentConfig::top_k(std::size_t n) const {
  if (baseline.k > 0) return baseline.k;
  return std::max<std::size_t>(1, std::min<std::size_t>(100, n / 4));
}

void to_json(json& j, const ExperimentConfig& c) {
  json u = c.unlearn;
  for (auto key : {"learning_rate", "steps", "group", "mask", "seed"}) u.erase(key);
  json e = c.eval;
  e.erase("seed");
  e.erase("mask_loss");
  json d = c.dataset;
  d.erase("seed");
  json m = c.model;
  m.erase("seed");
  json t = c.train;
  t.erase("seed");
  j = json{{"config_version", c.config_version},
           {"seed", c.seed},
           {"dataset", d},
           {"model", m},
           {"train", t},
           {"fim_timesteps", c.fim_timesteps},
           {"unlearn", u},
           {"grid", grid_to_json(c.grid)},
           {"eval", e},
           {"baseline", {{"window", c.baseline.window}, {"hop", c.baseline.hop}, {"k", c.baseline.k}}},
           {"grid_targets", c.grid_targets},
           {"generated", c.generated},
           {"sample_steps", c.sample_steps},
           {"fd_samples", c.fd_samples},
           {"out", c.out}};
}

void from_json(const json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.config_version = j.value("config_version", d.config_version);
  c.seed = j.value("seed", d.seed);
  c.dataset = j.contains("dataset") ? j.at("dataset").get<DatasetSpec>() : d.dataset;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.fim_timesteps = j.value("fim_timesteps", d.fim_timesteps);
  c.unlearn = j.contains("unlearn") ? j.at("unlearn").get<UnlearnConfig>() : d.unlearn;
  c.grid = j.contains("grid") ? grid_from_json(j.at("grid")) : d.grid;
  c.eval = j.contains("eval") ? j.at("eval").get<EvalSpec>() : d.eval;
  if (j.contains("baseline")) {
    const auto& b = j.at("baseline");
    c.baseline.window = b.value("window", d.baseline.window);
    c.baseline.hop = b.value("hop", d.baseline.hop);
    c.baseline.k = b.value("k", d.baseline.k);
  }
  c.grid_targets = j.value("grid_targets", d.grid_targets);
  c.generated = j.value("generated", d.generated);
  c.sample_steps = j.value("sample_steps", d.sample_steps);
  c.fd_samples = j.value("fd_samples", d.fd_samples);
  c.out = j.value("out", d.out);
  c.derive_seeds();
}

ExperimentConfig load_config(const std::string& path) {
  const auto j = read_json(path);
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ArgumentError("invalid config '" + path + "': " + e.what());
  }
  c.validate();
  return c;
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
  if (o.lr) cfg.grid.learning_rates = {*o.lr};
  if (o.steps) cfg.grid.steps = {*o.steps};
  if (o.group) cfg.grid.groups = {*o.group};
  if (o.mask) cfg.grid.masks = {*o.mask};
}

std::string Paths::sidecar(const std::string& artifact) const {
  return fs::path(artifact).replace_extension(".json").string();
}

std::string file_hash(const std::string& path) { return to_hex(sha256(binio::read_file(path))); }

// ---------------------------------------------------------------------------
// Artifact commands

CommandResult cmd_gen_data(const ExperimentConfig& cfg, Exec) {
  cfg.validate();
  Paths p(cfg.out);
  fs::create_directories(p.root);
  const json key = cfg.dataset;
  if (up_to_date(p, p.dataset(), key)) return {p.dataset(), true};
  write_dataset(generate_dataset(cfg.dataset), p.dataset());
  write_json(p.sidecar(p.dataset()),
             json{{"key", key}, {"artifact_hash", file_hash(p.dataset())}, {"inputs", json::object()}});
  return {p.dataset(), false};
}

CommandResult cmd_train(const ExperimentConfig& cfg, Exec exec) {
  cfg.validate();
  Paths p(cfg.out);
  require(p.dataset(), "gen-data");
  const json inputs{{"dataset", file_hash(p.dataset())}};
  const json key{{"inputs", inputs}, {"model", cfg.model}, {"train", cfg.train}};
  if (up_to_date(p, p.checkpoint(), key)) return {p.checkpoint(), true};
  const auto ds = read_dataset(p.dataset());
  auto ckpt = train(ds.tracks, cfg.model, cfg.train, exec);
  ckpt.provenance["dataset_hash"] = inputs["dataset"];
  write_checkpoint(ckpt, p.checkpoint());
  const auto heldout_seed = derive_seed(cfg.seed, {kSeedEval, 1});
  const double before = heldout_loss(init_params(cfg.model), ds.tracks, 16, heldout_seed, exec);
  const double after = heldout_loss(ckpt.params, ds.tracks, 16, heldout_seed, exec);
  write_json(p.sidecar(p.checkpoint()), json{{"key", key},
                                             {"artifact_hash", file_hash(p.checkpoint())},
                                             {"content_hash", to_hex(ckpt.hash)},
                                             {"inputs", inputs},
                                             {"meta", ckpt.meta},
                                             {"heldout_loss_init", before},
                                             {"heldout_loss_trained", after}});
  return {p.checkpoint(), false};
}

CommandResult cmd_fim(const ExperimentConfig& cfg, Exec exec) {
  cfg.validate();
  Paths p(cfg.out);
  require(p.dataset(), "gen-data");
  require(p.checkpoint(), "train");
  const json inputs{{"dataset", file_hash(p.dataset())}, {"checkpoint", file_hash(p.checkpoint())}};
  const json key{{"inputs", inputs}, {"timesteps", cfg.fim_timesteps}, {"group", "all"}};
  if (up_to_date(p, p.fim(), key)) return {p.fim(), true};
  const auto ds = read_dataset(p.dataset());
  const auto ckpt = read_checkpoint(p.checkpoint());
  const auto fim =
      estimate_fim_diag(ckpt, ds, LayerGroup::All, cfg.fim_timesteps, component_seed(cfg, kSeedFim), false, exec);
  write_fim(fim, p.fim());
  write_json(p.sidecar(p.fim()),
             json{{"key", key}, {"artifact_hash", file_hash(p.fim())}, {"inputs", inputs}, {"mean", fim.mean()}});
  return {p.fim(), false};
}

CommandResult cmd_unlearn(const ExperimentConfig& cfg, std::uint64_t target, Exec exec) {
  cfg.validate();
  auto l = load_all(cfg, true);
  if (target >= l.ds.size()) throw ArgumentError("unlearn: target " + std::to_string(target) + " is not in the dataset");
  const auto u = cell_config(cfg, cfg.grid.groups[0], cfg.grid.masks[0], cfg.grid.learning_rates[0], cfg.grid.steps[0]);
  const auto fim = restrict_fim(l.fim, l.base.params.layout, u.group);
  const auto out = unlearn(l.base, fim, l.ds.tracks[target], u, exec);
  Paths p(cfg.out);
  fs::create_directories(p.root + "/unlearned");
  const std::string path = p.root + "/unlearned/t" + std::to_string(target) + ".bin";
  write_checkpoint(out, path);
  write_json(p.sidecar(path), json{{"artifact_hash", file_hash(path)},
                                   {"content_hash", to_hex(out.hash)},
                                   {"inputs", l.inputs},
                                   {"base_hash", to_hex(l.base.hash)},
                                   {"target_id", target},
                                   {"group", std::string(group_name(u.group))},
                                   {"unlearn_config", u}});
  return {path, false};
}

CommandResult cmd_attribute(const ExperimentConfig& cfg, std::uint64_t target, Exec exec) {
  cfg.validate();
  auto l = load_all(cfg, true);
  if (target >= l.ds.size()) {
    throw ArgumentError("attribute: target " + std::to_string(target) + " is not in the dataset");
  }
  const auto mask = cfg.grid.masks[0];
  const auto u = cell_config(cfg, cfg.grid.groups[0], mask, cfg.grid.learning_rates[0], cfg.grid.steps[0]);
  const auto fim = restrict_fim(l.fim, l.base.params.layout, u.group);
  Paths p(cfg.out);
  LossCache cache(p.root + "/cache");
  const auto r = self_influence_run(l.base, fim, l.ds, {target}, u, eval_for(cfg, mask), cache, exec)[0];
  fs::create_directories(p.root + "/scores");
  const std::string path = p.root + "/scores/t" + std::to_string(target) + ".csv";
  binio::write_text(path, scores_csv(r));
  auto side = scores_sidecar(r);
  side["inputs"] = l.inputs;
  side["artifact_hash"] = file_hash(path);
  side["rank"] = rank_of_target(r.tau, target);
  write_json(p.sidecar(path), side);
  return {path, false};
}

// ---------------------------------------------------------------------------
// Grid search

double GridRow::mean_rank() const {
  double s = 0;
  for (auto r : ranks) s += static_cast<double>(r);
  return ranks.empty() ? 0.0 : s / static_cast<double>(ranks.size());
}

double GridRow::median_rank() const {
  if (ranks.empty()) return 0.0;
  auto r = ranks;
  std::sort(r.begin(), r.end());
  const std::size_t n = r.size();
  return n % 2 == 1 ? static_cast<double>(r[n / 2]) : 0.5 * static_cast<double>(r[n / 2 - 1] + r[n / 2]);
}

namespace {
double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}
}  // namespace

double GridRow::mean_sim_topk() const { return mean_of(sim_topk); }
double GridRow::mean_sim_botk() const { return mean_of(sim_botk); }

std::vector<std::vector<double>> track_embeddings(const Dataset& ds, const BaselineSpec& b) {
  std::vector<std::vector<double>> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out[i] = windowed_embeddings(ds.tracks[i], b.window, b.hop).mean;
  return out;
}

std::vector<std::uint64_t> grid_targets(const Dataset& ds, const ExperimentConfig& cfg) {
  const auto emb = track_embeddings(ds, cfg.baseline);
  return kmeans_select(emb, std::min(cfg.grid_targets, ds.size()), component_seed(cfg, kSeedKMeans));
}

std::vector<LatentTrack> generate_samples(const ModelParams& params, const DatasetSpec& spec, std::size_t count,
                                          std::size_t sample_steps, std::uint64_t seed, std::size_t first_id,
                                          Exec exec) {
  std::vector<LatentTrack> out(count);
  for_each_index(count, exec, [&](std::size_t g) {
    const auto cluster = static_cast<std::uint32_t>(g % spec.num_clusters);
    const auto cond = cluster_condition(spec, cluster);
    out[g] = sample(params, cond, sample_steps, spec.max_frames, derive_seed(seed, {g}));
    out[g].id = first_id + g;
    out[g].cluster = cluster;
  });
  return out;
}

std::vector<std::vector<double>> sample_embeddings(const ModelParams& params, const DatasetSpec& spec,
                                                   std::size_t count, std::size_t sample_steps, std::uint64_t seed,
                                                   Exec exec) {
  const auto samples = generate_samples(params, spec, count, sample_steps, seed, 0, exec);
  std::vector<std::vector<double>> out(count);
  for (std::size_t g = 0; g < count; ++g) {
    out[g] = descriptor_embedding(samples[g].frames, samples[g].latent_dim, samples[g].actual_len);
  }
  return out;
}

GridRow run_grid_cell(const Checkpoint& base, const FimDiagonal& fim_all, const Dataset& ds,
                      const ExperimentConfig& cfg, LayerGroup group, MaskPolicy mask, double lr, std::size_t steps,
                      const std::vector<std::uint64_t>& targets, LossCache& cache, Exec exec) {
  GridRow row;
  row.group = group;
  row.mask = mask;
  row.lr = lr;
  row.steps = steps;
  row.targets = targets;
  const auto u = cell_config(cfg, group, mask, lr, steps);
  const auto espec = eval_for(cfg, mask);
  const auto fim = restrict_fim(fim_all, base.params.layout, group);
  const auto emb = track_embeddings(ds, cfg.baseline);
  const std::size_t k = std::min(cfg.top_k(ds.size()), ds.size() - 1);

  std::optional<Checkpoint> first;
  for (auto id : targets) {
    const auto unlearned = unlearn(base, fim, ds.tracks[id], u, exec);
    const auto r = score_unlearned(base, unlearned, ds, espec, cache, exec);
    row.ranks.push_back(rank_of_target(r.tau, id));
    row.target_tau.push_back(r.tau[id]);
    row.sim_topk.push_back(topk_similarity(r.tau, emb, emb[id], k, Which::Top, id));
    row.sim_botk.push_back(topk_similarity(r.tau, emb, emb[id], k, Which::Bottom, id));
    if (!first) first = unlearned;
  }

  if (first) {
    const auto& dspec = cfg.dataset;
    const auto a = sample_embeddings(base.params, dspec, cfg.fd_samples, cfg.sample_steps,
                                     component_seed(cfg, kSeedFdA), exec);
    const auto b = sample_embeddings(base.params, dspec, cfg.fd_samples, cfg.sample_steps,
                                     component_seed(cfg, kSeedFdB), exec);
    const auto b2 = sample_embeddings(first->params, dspec, cfg.fd_samples, cfg.sample_steps,
                                      component_seed(cfg, kSeedFdB), exec);
    row.fd_reference = frechet_distance(a, b);
    row.fd_unlearned = frechet_distance(a, b2);
  }
  return row;
}

std::string grid_csv(std::vector<GridRow> rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const GridRow& a, const GridRow& b) { return a.mean_rank() < b.mean_rank(); });
  std::string s =
      "group,M_U,M_L,lr,steps,mean_rank,median_rank,mean_sim_topk,mean_sim_botk,fd_reference,fd_unlearned\n";
  for (const auto& r : rows) {
    s += std::string(group_name(r.group)) + "," + (r.mask.mask_unlearn ? "true" : "false") + "," +
         (r.mask.mask_loss ? "true" : "false") + "," + format_double(r.lr) + "," + std::to_string(r.steps) + "," +
         format_double(r.mean_rank()) + "," + format_double(r.median_rank()) + "," +
         format_double(r.mean_sim_topk()) + "," + format_double(r.mean_sim_botk()) + "," +
         format_double(r.fd_reference) + "," + format_double(r.fd_unlearned) + "\n";
  }
  return s;
}

CommandResult cmd_grid_search(const ExperimentConfig& cfg, Exec exec) {
  cfg.validate();
  auto l = load_all(cfg, true);
  Paths p(cfg.out);
  LossCache cache(p.root + "/cache");
  const auto targets = grid_targets(l.ds, cfg);
  std::vector<GridRow> rows;
  json cells = json::array();
  for (auto group : cfg.grid.groups) {
    for (auto mask : cfg.grid.masks) {
      for (double lr : cfg.grid.learning_rates) {
        for (auto steps : cfg.grid.steps) {
          auto row = run_grid_cell(l.base, l.fim, l.ds, cfg, group, mask, lr, steps, targets, cache, exec);
          cells.push_back(json{{"group", std::string(group_name(group))},
                               {"mask", mask.name()},
                               {"lr", lr},
                               {"steps", steps},
                               {"ranks", row.ranks},
                               {"target_tau", row.target_tau},
                               {"sim_topk", row.sim_topk},
                               {"sim_botk", row.sim_botk}});
          rows.push_back(std::move(row));
        }
      }
    }
  }
  const std::string path = p.root + "/grid.csv";
  binio::write_text(path, grid_csv(rows));
  write_json(p.sidecar(path), json{{"artifact_hash", file_hash(path)},
                                   {"inputs", l.inputs},
                                   {"targets", targets},
                                   {"k", std::min(cfg.top_k(l.ds.size()), l.ds.size() - 1)},
                                   {"cells", cells}});
  return {path, false};
}

// ---------------------------------------------------------------------------
// Test-to-train

namespace {

double top_share(const std::vector<double>& softmax, double fraction) {
  auto v = softmax;
  std::sort(v.begin(), v.end(), std::greater<>());
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size()))));
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s;
}

std::vector<double> sorted_desc(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

}  // namespace

CommandResult cmd_test_to_train(const ExperimentConfig& cfg, Exec exec) {
  cfg.validate();
  auto l = load_all(cfg, true);
  Paths p(cfg.out);
  const std::string dir = p.root + "/test_to_train";
  fs::create_directories(dir);
  LossCache cache(p.root + "/cache");

  const auto mask = cfg.grid.masks[0];
  const auto u = cell_config(cfg, cfg.grid.groups[0], mask, cfg.grid.learning_rates[0], cfg.grid.steps[0]);
  const auto fim = restrict_fim(l.fim, l.base.params.layout, u.group);
  const auto generated = generate_samples(l.base.params, cfg.dataset, cfg.generated, cfg.sample_steps,
                                          component_seed(cfg, kSeedSamples), l.ds.size(), exec);
  const auto results = test_to_train_run(l.base, fim, generated, l.ds, u, eval_for(cfg, mask), cache, exec);

  std::vector<EmbeddingSet> train_emb(l.ds.size());
  for (std::size_t i = 0; i < l.ds.size(); ++i) {
    train_emb[i] = windowed_embeddings(l.ds.tracks[i], cfg.baseline.window, cfg.baseline.hop);
  }

  const std::size_t n = l.ds.size();
  const std::size_t g_count = generated.size();
  const char* methods[] = {"unlearning", "aaa", "avg"};
  // sorted[m][view][g] with view 0 = minmax, 1 = softmax
  std::vector<std::vector<std::vector<std::vector<double>>>> sorted(
      3, std::vector<std::vector<std::vector<double>>>(2, std::vector<std::vector<double>>(g_count)));
  json samples = json::array();

  for (std::size_t g = 0; g < g_count; ++g) {
    const auto& r = results[g];
    const auto target_emb = windowed_embeddings(generated[g], cfg.baseline.window, cfg.baseline.hop);
    const auto aaa = sim_all_against_all(target_emb, train_emb, exec);
    const auto avg = sim_average(target_emb, train_emb);

    const std::string base_name = dir + "/sample_" + std::to_string(g);
    binio::write_text(base_name + ".csv", report_csv(r.tau, aaa, avg));
    binio::write_text(base_name + "_scores.csv", scores_csv(r));

    const std::vector<double>* raw[] = {&r.tau, &aaa, &avg};
    json per_method = json::object();
    for (int m = 0; m < 3; ++m) {
      auto rep = make_report(methods[m], *raw[m]);
      sorted[m][0][g] = sorted_desc(rep.minmax);
      sorted[m][1][g] = sorted_desc(rep.softmax);
      per_method[methods[m]] = {{"top1pct_softmax_share", top_share(rep.softmax, 0.01)}};
    }
    json pear = json::object();
    for (int m = 1; m < 3; ++m) {
      json views = json::object();
      auto safe = [](std::span<const double> a, std::span<const double> b) -> json {
        try {
          return pearson(a, b);
        } catch (const DomainError&) {
          return nullptr;
        }
      };
      views["raw"] = safe(r.tau, *raw[m]);
      views["minmax"] = safe(minmax_normalize(r.tau), minmax_normalize(*raw[m]));
      views["softmax"] = safe(softmax_normalize(r.tau), softmax_normalize(*raw[m]));
      pear[methods[m]] = views;
    }
    double in_sum = 0, out_sum = 0;
    std::size_t in_n = 0, out_n = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (l.ds.tracks[i].cluster == generated[g].cluster) {
        in_sum += r.tau[i];
        ++in_n;
      } else {
        out_sum += r.tau[i];
        ++out_n;
      }
    }
    json side = scores_sidecar(r);
    side["inputs"] = l.inputs;
    side["artifact_hash"] = file_hash(base_name + ".csv");
    side["cluster"] = generated[g].cluster;
    side["mean_tau_same_cluster"] = in_n ? in_sum / static_cast<double>(in_n) : 0.0;
    side["mean_tau_other_clusters"] = out_n ? out_sum / static_cast<double>(out_n) : 0.0;
    side["methods"] = per_method;
    side["pearson_vs_unlearning"] = pear;
    write_json(base_name + ".json", side);
    samples.push_back(json{{"sample", g},
                           {"cluster", generated[g].cluster},
                           {"pearson_vs_unlearning", pear},
                           {"methods", per_method},
                           {"mean_tau_same_cluster", side["mean_tau_same_cluster"]},
                           {"mean_tau_other_clusters", side["mean_tau_other_clusters"]}});
  }

  std::string agg = "rank";
  for (const char* m : methods) {
    for (const char* v : {"minmax", "softmax"}) agg += std::string(",") + m + "_" + v + "_mean," + m + "_" + v + "_std";
  }
  agg += "\n";
  for (std::size_t rank = 0; rank < n; ++rank) {
    agg += std::to_string(rank + 1);
    for (int m = 0; m < 3; ++m) {
      for (int v = 0; v < 2; ++v) {
        double mean = 0;
        for (std::size_t g = 0; g < g_count; ++g) mean += sorted[m][v][g][rank];
        mean /= static_cast<double>(g_count);
        double var = 0;
        for (std::size_t g = 0; g < g_count; ++g) var += (sorted[m][v][g][rank] - mean) * (sorted[m][v][g][rank] - mean);
        var /= static_cast<double>(g_count);
        agg += "," + format_double(mean) + "," + format_double(std::sqrt(var));
      }
    }
    agg += "\n";
  }
  const std::string agg_path = dir + "/aggregate.csv";
  binio::write_text(agg_path, agg);

  json mean_pearson = json::object();
  for (int m = 1; m < 3; ++m) {
    double s = 0;
    std::size_t c = 0;
    for (const auto& smp : samples) {
      const auto& v = smp["pearson_vs_unlearning"][methods[m]]["raw"];
      if (v.is_number()) {
        s += v.get<double>();
        ++c;
      }
    }
    mean_pearson[methods[m]] = c ? json(s / static_cast<double>(c)) : json(nullptr);
  }
  write_json(dir + "/summary.json", json{{"inputs", l.inputs},
                                         {"aggregate_hash", file_hash(agg_path)},
                                         {"unlearn_config", u},
                                         {"eval_spec", eval_for(cfg, mask)},
                                         {"generated", g_count},
                                         {"mean_pearson_raw", mean_pearson},
                                         {"samples", samples}});
  return {agg_path, false};
}

std::vector<CommandResult> cmd_pipeline(const ExperimentConfig& cfg, Exec exec) {
  std::vector<CommandResult> out;
  out.push_back(cmd_gen_data(cfg, exec));
  out.push_back(cmd_train(cfg, exec));
  out.push_back(cmd_fim(cfg, exec));
  out.push_back(cmd_grid_search(cfg, exec));
  out.push_back(cmd_test_to_train(cfg, exec));
  return out;
}

}  // namespace tda
