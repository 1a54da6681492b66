// Acceptance suite: one PASS/FAIL line per criterion. Trained artifacts are kept
// in the work directory and reused on later runs when their inputs are unchanged.

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "support.hpp"
#include "tda/analysis.hpp"
#include "tda/attribution.hpp"
#include "tda/experiment.hpp"
#include "tda/fim.hpp"
#include "tda/unlearn.hpp"

using namespace tda;
using namespace tda::testing;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  std::printf("[%s] criterion %2d  %-28s %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

void info(const std::string& text) {
  std::printf("[INFO] %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

void criterion_schedule() {
  Rng rng(20240601);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = noise_schedule(rng.uniform());
    worst = std::max(worst, std::abs(s.alpha * s.alpha + s.sigma * s.sigma - 1.0));
  }
  verdict(1, worst <= 1e-12, "schedule identity", fmt("max |a^2+s^2-1| = %.3g (tol 1e-12)", worst));
}

void criterion_gradients() {
  const auto cfg = tiny_model();
  const auto p = jittered(cfg, 7);
  const auto ds = generate_dataset(tiny_spec(4, 9));
  const auto draws = make_draws(5, 3, cfg.max_frames, cfg.latent_dim);
  double worst = 0;
  std::string per;
  for (auto g : {LayerGroup::ToKV, LayerGroup::Cross, LayerGroup::Self, LayerGroup::All}) {
    const auto r = finite_difference_check(p, ds.tracks[1], draws, true, g, 20, 100 + static_cast<int>(g));
    worst = std::max(worst, r.max_rel);
    per += fmt(" %s=%.2g", std::string(group_name(g)).c_str(), r.max_rel);
  }
  verdict(2, worst <= 1e-5 && p.layout.total() <= 5000, "gradient check",
          fmt("%zu params, max rel err%s (tol 1e-5)", p.layout.total(), per.c_str()));
}

void criterion_metric_oracles() {
  bool ok = true;
  std::string detail;

  const std::vector<double> x{1.0, 2.5, 0.5, 4.0}, y{2.0, 1.0, 0.0, 3.5};
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  const double direct = (4 * sxy - sx * sy) / std::sqrt((4 * sxx - sx * sx) * (4 * syy - sy * sy));
  const double perr = std::abs(pearson(x, y) - direct);
  ok &= perr <= 1e-12;
  detail += fmt("pearson %.1e", perr);

  Rng rng(3);
  std::vector<std::vector<double>> a(300, std::vector<double>(8)), b = a;
  for (auto& r : a) {
    for (auto& v : r) v = rng.normal();
  }
  std::vector<double> delta(8);
  double d2 = 0;
  for (auto& v : delta) d2 += (v = rng.normal()) * v;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < 8; ++j) b[i][j] = a[i][j] + delta[j];
  }
  const double shift_err = std::abs(frechet_distance(a, b) - d2);
  ok &= shift_err <= 1e-6;
  detail += fmt(", fd shift %.1e", shift_err);

  // eigenvalues of the nonsymmetric covariance product as the oracle
  std::vector<std::vector<double>> c(120, std::vector<double>(16)), e(140, std::vector<double>(16));
  for (auto& r : c) {
    for (std::size_t j = 0; j < 16; ++j) r[j] = rng.normal() * (1 + 0.05 * static_cast<double>(j));
  }
  for (auto& r : e) {
    for (std::size_t j = 0; j < 16; ++j) r[j] = 0.2 + 1.3 * rng.normal();
  }
  auto moments = [](const std::vector<std::vector<double>>& pts, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const auto n = static_cast<Eigen::Index>(pts.size()), d = static_cast<Eigen::Index>(pts[0].size());
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) m(i, j) = pts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    mu = m.colwise().mean();
    const Eigen::MatrixXd centred = m.rowwise() - mu.transpose();
    cov = centred.transpose() * centred / static_cast<double>(n - 1);
    cov += 1e-6 * cov.trace() * Eigen::MatrixXd::Identity(d, d);
  };
  Eigen::VectorXd mc, me;
  Eigen::MatrixXd sc, se;
  moments(c, mc, sc);
  moments(e, me, se);
  Eigen::EigenSolver<Eigen::MatrixXd> es(sc * se, false);
  double tr = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
  const double oracle = (mc - me).squaredNorm() + sc.trace() + se.trace() - 2 * tr;
  const double eig_err = std::abs(frechet_distance(c, e) - oracle);
  ok &= eig_err <= 1e-6;
  detail += fmt(", fd eig %.1e", eig_err);

  std::vector<double> tau(200);
  for (auto& v : tau) v = 2 * rng.normal();
  const auto s1 = softmax_normalize(tau);
  auto shifted = tau;
  for (auto& v : shifted) v -= 37.5;
  const auto s2 = softmax_normalize(shifted);
  double sum = 0, shift = 0;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    sum += s1[i];
    shift = std::max(shift, std::abs(s1[i] - s2[i]));
  }
  ok &= std::abs(sum - 1) <= 1e-9 && shift <= 1e-12;
  detail += fmt(", softmax sum %.1e shift %.1e", std::abs(sum - 1), shift);

  bool rank_ok = true;
  for (std::size_t t = 0; t < tau.size(); ++t) {
    std::vector<double> affine(tau.size()), cubic(tau.size());
    for (std::size_t i = 0; i < tau.size(); ++i) {
      affine[i] = 0.5 * tau[i] - 3;
      cubic[i] = tau[i] * tau[i] * tau[i];
    }
    rank_ok &= rank_of_target(affine, t) == rank_of_target(tau, t) && rank_of_target(cubic, t) == rank_of_target(tau, t);
  }
  ok &= rank_ok;
  detail += rank_ok ? ", rank invariant" : ", rank NOT invariant";
  verdict(11, ok, "metric oracles", detail);
}

void criterion_baseline(const Dataset& ds) {
  Rng rng(12);
  std::size_t mismatches = 0;
  for (int k = 0; k < 50; ++k) {
    const auto a = windowed_embeddings(ds.tracks[rng.below(ds.size())]);
    const auto b = windowed_embeddings(ds.tracks[rng.below(ds.size())]);
    double best = -2.0;
    for (std::size_t i = 0; i < a.count; ++i) {
      for (std::size_t j = 0; j < b.count; ++j) {
        const auto u = a.window(i), v = b.window(j);
        double dot = 0, nu = 0, nv = 0;
        for (std::size_t q = 0; q < a.dim; ++q) {
          dot += u[q] * v[q];
          nu += u[q] * u[q];
          nv += v[q] * v[q];
        }
        best = std::max(best, dot / (std::sqrt(nu) * std::sqrt(nv)));
      }
    }
    if (sim_all_against_all(a, b) != best) ++mismatches;
  }
  verdict(12, mismatches == 0, "baseline brute force", fmt("%zu/50 pairs differ from the double loop", mismatches));
}

// ---------------------------------------------------------------------------
// Desk-scale experiments

ExperimentConfig desk_config(const std::string& work) {
  ExperimentConfig c;
  c.seed = 1;
  c.dataset.duplicate_pairs = 1;
  c.out = work + "/desk";
  c.derive_seeds();
  return c;
}

void desk_criteria(const std::string& work) {
  const auto cfg = desk_config(work);
  auto t0 = std::chrono::steady_clock::now();
  cmd_gen_data(cfg);
  const bool trained = !cmd_train(cfg).skipped;
  cmd_fim(cfg);
  info(fmt("desk artifacts ready in %.0fs (%s)", seconds_since(t0), trained ? "trained" : "cached"));

  Paths paths(cfg.out);
  const auto ds = read_dataset(paths.dataset());
  const auto base = read_checkpoint(paths.checkpoint());
  const auto fim = read_fim(paths.fim());
  {
    std::ifstream in(paths.sidecar(paths.checkpoint()));
    const auto side = nlohmann::json::parse(in);
    const double init = side["heldout_loss_init"], fin = side["heldout_loss_trained"];
    info(fmt("held-out loss %.4f -> %.4f (%.1f%% decrease, target >= 50%%)", init, fin, 100 * (1 - fin / init)));
  }

  criterion_baseline(ds);

  LossCache cache(cfg.out + "/cache");

  // null unlearning
  {
    UnlearnConfig u = cfg.unlearn;
    u.learning_rate = 0.0;
    const auto r = self_influence_run(base, fim, ds, {0}, u, cfg.eval, cache)[0];
    std::size_t nonzero = 0;
    for (double v : r.tau) nonzero += v != 0.0;
    verdict(3, nonzero == 0, "null unlearning", fmt("%zu of %zu scores nonzero at lr=0", nonzero, r.tau.size()));
  }

  // train-to-train with the default (all, mixed) setting
  t0 = std::chrono::steady_clock::now();
  const auto targets = grid_targets(ds, cfg);
  const auto mixed = run_grid_cell(base, fim, ds, cfg, LayerGroup::All, MaskPolicy::mixed(),
                                   cfg.unlearn.learning_rate, cfg.unlearn.steps, targets, cache);
  info(fmt("(all, mixed) cell over %zu targets in %.0fs", targets.size(), seconds_since(t0)));

  std::size_t ascended = 0;
  for (double v : mixed.target_tau) ascended += v > 0.0;
  verdict(4, ascended == targets.size() && targets.size() == 20, "ascent",
          fmt("%zu/%zu targets have higher paired loss after unlearning", ascended, targets.size()));

  std::string ranks;
  for (auto r : mixed.ranks) ranks += fmt("%zu ", r);
  verdict(5, mixed.median_rank() == 1.0 && mixed.mean_rank() <= 2.0, "self-influence rank",
          fmt("median %.1f, mean %.2f (need 1 and <= 2); ranks %s", mixed.median_rank(), mixed.mean_rank(),
              ranks.c_str()));

  // masking directionality on short targets
  std::vector<std::uint64_t> short_targets;
  std::vector<std::size_t> short_mixed;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (ds.tracks[targets[i]].actual_len <= ds.max_frames / 4) {
      short_targets.push_back(targets[i]);
      short_mixed.push_back(mixed.ranks[i]);
    }
  }
  if (short_targets.empty()) {
    verdict(6, false, "masking directionality", "no short targets among the k-means selection");
  } else {
    const auto none = run_grid_cell(base, fim, ds, cfg, LayerGroup::All, MaskPolicy::none(),
                                    cfg.unlearn.learning_rate, cfg.unlearn.steps, short_targets, cache);
    double m = 0;
    for (auto r : short_mixed) m += static_cast<double>(r);
    m /= static_cast<double>(short_mixed.size());
    verdict(6, none.mean_rank() >= m, "masking directionality",
            fmt("%zu short targets: mean rank none %.2f vs mixed %.2f", short_targets.size(), none.mean_rank(), m));
  }

  verdict(7, mixed.mean_sim_topk() > mixed.mean_sim_botk(), "similarity separation",
          fmt("mean sim_topk %.4f vs sim_botk %.4f (k=%zu)", mixed.mean_sim_topk(), mixed.mean_sim_botk(),
              cfg.top_k(ds.size())));

  const double rel = std::abs(mixed.fd_unlearned - mixed.fd_reference) / mixed.fd_reference;
  verdict(8, rel <= 0.05, "quality drift",
          fmt("FD(theta0,theta0') %.5f vs FD(theta0,unlearned) %.5f, rel diff %.2f%% (tol 5%%)", mixed.fd_reference,
              mixed.fd_unlearned, 100 * rel));

  // duplicate retrieval
  {
    const LatentTrack* a = nullptr;
    for (const auto& t : ds.tracks) {
      if (t.duplicate_of && !a) a = &t;
    }
    const auto r = self_influence_run(base, fim, ds, {a->id}, cfg.unlearn, cfg.eval, cache)[0];
    std::vector<double> rest;
    std::size_t other = 0;
    for (std::size_t i = 0; i < r.tau.size(); ++i) {
      if (i == a->id) continue;
      if (i == *a->duplicate_of) other = rest.size();
      rest.push_back(r.tau[i]);
    }
    const auto rank = rank_of_target(rest, other);
    verdict(9, rank <= 2, "duplicate retrieval",
            fmt("unlearning track %llu ranks its duplicate %llu at %zu of %zu", static_cast<unsigned long long>(a->id),
                static_cast<unsigned long long>(*a->duplicate_of), rank, rest.size()));
  }

  // test-to-train on generated samples, reported only
  t0 = std::chrono::steady_clock::now();
  cmd_test_to_train(cfg);
  std::ifstream in(cfg.out + "/test_to_train/summary.json");
  const auto summary = nlohmann::json::parse(in);
  std::size_t cluster_hits = 0, samples = 0;
  double top_share = 0;
  for (const auto& s : summary["samples"]) {
    ++samples;
    cluster_hits += s["mean_tau_same_cluster"].get<double>() > s["mean_tau_other_clusters"].get<double>();
    top_share += s["methods"]["unlearning"]["top1pct_softmax_share"].get<double>();
  }
  const auto& mp = summary["mean_pearson_raw"];
  info(fmt("test-to-train over %zu samples in %.0fs: same-cluster mean tau above other clusters for %zu", samples,
           seconds_since(t0), cluster_hits));
  info(fmt("mean Pearson vs unlearning: all-against-all %.3f, average %.3f; top-1%% softmax share %.4f",
           mp["aaa"].is_number() ? mp["aaa"].get<double>() : NAN, mp["avg"].is_number() ? mp["avg"].get<double>() : NAN,
           top_share / static_cast<double>(samples)));
}

// ---------------------------------------------------------------------------
// Leave-one-out agreement on a micro dataset

void criterion_loo() {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.latent_dim = 4;
  mc.max_frames = 16;
  mc.cond_dim = 4;
  mc.width = 16;
  mc.num_heads = 2;
  mc.num_blocks = 1;
  mc.cond_tokens = 2;
  mc.time_features = 8;
  std::vector<double> rhos;
  for (std::uint64_t seed : {1, 2, 3}) {
    DatasetSpec spec;
    spec.num_tracks = 16;
    spec.num_clusters = 4;
    spec.max_frames = mc.max_frames;
    spec.latent_dim = mc.latent_dim;
    spec.cond_dim = mc.cond_dim;
    spec.seed = derive_seed(seed, {1});
    const auto ds = generate_dataset(spec);
    mc.seed = derive_seed(seed, {2});
    TrainConfig tc;
    tc.steps = 1500;
    tc.batch_size = ds.size();  // full batch: removing a track changes nothing else
    tc.warmup_steps = 50;
    tc.seed = derive_seed(seed, {3});
    const auto full = train(ds.tracks, mc, tc);
    const auto fim = estimate_fim_diag(full, ds, LayerGroup::All, kDefaultFimTimesteps, derive_seed(seed, {4}));
    const EvalSpec es{256, derive_seed(seed, {5}), false};
    const std::uint64_t target = seed % ds.size();
    UnlearnConfig u;
    u.seed = derive_seed(seed, {6});
    LossCache cache;
    const auto r = self_influence_run(full, fim, ds, {target}, u, es, cache)[0];
    const auto loo = loo_oracle(ds, mc, tc, target, es, &full);
    rhos.push_back(spearman(r.tau, loo));
  }
  const double mean = (rhos[0] + rhos[1] + rhos[2]) / 3;
  verdict(10, mean >= 0.3, "LOO agreement",
          fmt("Spearman per seed %.3f %.3f %.3f, mean %.3f (need >= 0.3); %.0fs", rhos[0], rhos[1], rhos[2], mean,
              seconds_since(t0)));
}

// ---------------------------------------------------------------------------

void criterion_determinism(const std::string& work) {
  auto t0 = std::chrono::steady_clock::now();
  auto make = [&](const std::string& name) {
    ExperimentConfig c;
    c.seed = 5;
    c.dataset.num_tracks = 32;
    c.dataset.num_clusters = 4;
    c.dataset.max_frames = 16;
    c.dataset.latent_dim = 4;
    c.dataset.cond_dim = 4;
    c.model.max_frames = 16;
    c.model.latent_dim = 4;
    c.model.cond_dim = 4;
    c.model.width = 16;
    c.model.num_heads = 2;
    c.train.steps = 150;
    c.unlearn.grad_timesteps = 128;
    c.eval.eval_timesteps = 16;
    c.grid.masks = {MaskPolicy::mixed(), MaskPolicy::none()};
    c.grid_targets = 4;
    c.generated = 4;
    c.sample_steps = 10;
    c.fd_samples = 32;
    c.out = work + "/" + name;
    c.derive_seeds();
    fs::remove_all(c.out);
    return c;
  };
  const auto a = make("pipeline_a");
  const auto b = make("pipeline_b");
  cmd_pipeline(a);
  cmd_pipeline(b, Exec::Serial);
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.out)) {
    if (entry.path().extension() != ".csv") continue;
    ++files;
    const auto other = fs::path(b.out) / fs::relative(entry.path(), a.out);
    if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) ++differing;
  }
  verdict(13, files > 0 && differing == 0, "determinism",
          fmt("%zu CSV reports compared (parallel vs serial run), %zu differ; %.0fs", files, differing,
              seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-13"};
  std::string work = "acceptance_work";
  app.add_option("--work", work, "Directory for cached artifacts");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const auto t0 = std::chrono::steady_clock::now();
  try {
    criterion_schedule();
    criterion_gradients();
    criterion_metric_oracles();
    desk_criteria(work);
    criterion_loo();
    criterion_determinism(work);
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed; total %.0fs\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
