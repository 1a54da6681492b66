#include <cmath>
#include <numbers>

#include "doctest.h"
#include "support.hpp"
#include "tda/errors.hpp"
#include "tda/model.hpp"

using namespace tda;
using namespace tda::testing;

TEST_CASE("noise schedule endpoints and midpoint") {
  auto s0 = noise_schedule(0.0);
  CHECK(s0.alpha == 1.0);
  CHECK(s0.sigma == 0.0);
  auto s1 = noise_schedule(1.0);
  CHECK(s1.alpha == 0.0);
  CHECK(s1.sigma == 1.0);
  auto h = noise_schedule(0.5);
  CHECK(h.alpha == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-15));
  CHECK(h.sigma == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-15));
  CHECK_THROWS_AS(noise_schedule(-1e-9), DomainError);
  CHECK_THROWS_AS(noise_schedule(1.0 + 1e-9), DomainError);
  CHECK_THROWS_AS(noise_schedule(std::nan("")), DomainError);
}

TEST_CASE("schedule identity over random t") {
  Rng rng(1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double t = rng.uniform();
    const auto s = noise_schedule(t);
    worst = std::max(worst, std::abs(s.alpha * s.alpha + s.sigma * s.sigma - 1.0));
    CHECK(s.alpha == doctest::Approx(std::cos(std::numbers::pi * t / 2)).epsilon(1e-15));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("v_target special cases") {
  const std::vector<double> z0{1.5, -2.0, 0.25}, eps{0.3, 0.7, -1.1};
  CHECK(v_target(z0, eps, 0.0) == eps);
  const auto v1 = v_target(z0, eps, 1.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(v1[i] == -z0[i]);
  const std::vector<double> zero(3, 0.0);
  const auto vh = v_target(zero, eps, 0.5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(vh[i] == doctest::Approx(std::sqrt(2.0) / 2 * eps[i]).epsilon(1e-15));
  CHECK_THROWS_AS(v_target(z0, std::vector<double>{1.0}, 0.5), ShapeError);
}

TEST_CASE("layout sizes and group partition") {
  const ModelConfig cfg;
  const ParamLayout layout(cfg);
  CHECK(layout.total() == 30472);
  CHECK(layout.group_size(LayerGroup::All) == 25088);
  const auto kv = group_indices(layout, LayerGroup::ToKV);
  const auto cross = group_indices(layout, LayerGroup::Cross);
  const auto self = group_indices(layout, LayerGroup::Self);
  const auto all = group_indices(layout, LayerGroup::All);
  CHECK(std::includes(cross.begin(), cross.end(), kv.begin(), kv.end()));
  CHECK(std::includes(all.begin(), all.end(), cross.begin(), cross.end()));
  CHECK(std::includes(all.begin(), all.end(), self.begin(), self.end()));
  std::vector<std::size_t> both;
  std::set_intersection(cross.begin(), cross.end(), self.begin(), self.end(), std::back_inserter(both));
  CHECK(both.empty());
  for (const auto& s : layout.sections()) {
    const bool block = s.name.rfind("blocks.", 0) == 0;
    CHECK(in_group(s.kind, LayerGroup::All) == block);
  }
  CHECK(parse_group("to_kv") == LayerGroup::ToKV);
  CHECK(group_name(LayerGroup::Cross) == "cross");
  CHECK_THROWS_AS(parse_group("attention"), ArgumentError);
}

TEST_CASE("forward is deterministic and shape-checked") {
  const auto cfg = tiny_model();
  const auto p = jittered(cfg);
  Rng rng(2);
  std::vector<double> z(cfg.max_frames * cfg.latent_dim), c(cfg.cond_dim);
  for (auto& v : z) v = rng.normal();
  for (auto& v : c) v = rng.normal();
  const auto a = forward(p, z, 0.3, c);
  const auto b = forward(p, z, 0.3, c);
  CHECK(a == b);
  CHECK(a.size() == z.size());
  CHECK_THROWS_AS(forward(p, std::vector<double>(3), 0.3, c), ShapeError);
  CHECK_THROWS_AS(forward(p, z, 0.3, std::vector<double>(cfg.cond_dim + 1)), ShapeError);
}

TEST_CASE("diffusion loss: hand-computed two-frame example") {
  ModelConfig cfg = tiny_model();
  cfg.max_frames = 2;
  cfg.latent_dim = 1;
  const ModelParams zero(cfg);  // every weight and gain 0, so v_hat = 0
  LatentTrack tr;
  tr.max_frames = 2;
  tr.latent_dim = 1;
  tr.actual_len = 2;
  tr.frames = {0.8, -0.4};
  tr.cond.assign(cfg.cond_dim, 0.1);
  const double t = 0.3;
  std::vector<NoiseDraw> draws{{t, {0.5, 1.2}}};
  const double a = std::cos(std::numbers::pi * t / 2), s = std::sin(std::numbers::pi * t / 2);
  const double v0 = a * 0.5 - s * 0.8, v1 = a * 1.2 - s * -0.4;
  CHECK(diffusion_loss(zero, tr, draws, false) == doctest::Approx((v0 * v0 + v1 * v1) / 2).epsilon(1e-12));
  CHECK(diffusion_loss(zero, tr, draws, true) == diffusion_loss(zero, tr, draws, false));

  tr.actual_len = 1;
  tr.frames = {0.8, 0.0};
  const double w0 = a * 0.5 - s * 0.8, w1 = a * 1.2;
  CHECK(diffusion_loss(zero, tr, draws, true) == doctest::Approx(w0 * w0).epsilon(1e-12));
  CHECK(diffusion_loss(zero, tr, draws, false) == doctest::Approx((w0 * w0 + w1 * w1) / 2).epsilon(1e-12));

  // zero data and zero noise: a zero model is a perfect predictor
  tr.frames = {0.0, 0.0};
  std::vector<NoiseDraw> quiet{{0.4, {0.0, 0.0}}};
  CHECK(diffusion_loss(zero, tr, quiet, true) == 0.0);
  CHECK_THROWS_AS(diffusion_loss(zero, tr, std::vector<NoiseDraw>{}, false), ArgumentError);
}

TEST_CASE("mask is a no-op at full length and loss is nonnegative") {
  const auto cfg = tiny_model();
  const auto p = jittered(cfg);
  DatasetSpec spec = tiny_spec(6);
  spec.lengths = {cfg.max_frames};
  const auto ds = generate_dataset(spec);
  const auto draws = make_draws(4, 5, cfg.max_frames, cfg.latent_dim);
  for (const auto& tr : ds.tracks) {
    const double u = diffusion_loss(p, tr, draws, false);
    CHECK(u == diffusion_loss(p, tr, draws, true));
    CHECK(u >= 0.0);
  }
}

TEST_CASE("make_draws is stratified and seeded") {
  const auto d = make_draws(9, 16, 3, 2);
  REQUIRE(d.size() == 16);
  for (std::size_t k = 0; k < d.size(); ++k) {
    const double lo = kTimestepMargin + (1 - 2 * kTimestepMargin) * static_cast<double>(k) / 16;
    const double hi = kTimestepMargin + (1 - 2 * kTimestepMargin) * static_cast<double>(k + 1) / 16;
    CHECK(d[k].t >= lo);
    CHECK(d[k].t <= hi);
    CHECK(d[k].eps.size() == 6);
  }
  const auto e = make_draws(9, 16, 3, 2);
  for (std::size_t k = 0; k < d.size(); ++k) {
    CHECK(d[k].t == e[k].t);
    CHECK(d[k].eps == e[k].eps);
  }
  const auto u = make_draws(9, 100, 1, 1, false);
  for (const auto& x : u) CHECK((x.t >= kTimestepMargin && x.t <= 1 - kTimestepMargin));
}

TEST_CASE("analytic gradients match central differences for every group") {
  const auto cfg = tiny_model();
  const auto p = jittered(cfg);
  const auto ds = generate_dataset(tiny_spec(4));
  const auto draws = make_draws(2, 3, cfg.max_frames, cfg.latent_dim);
  CHECK(p.layout.total() <= 5000);
  for (auto g : {LayerGroup::ToKV, LayerGroup::Cross, LayerGroup::Self, LayerGroup::All}) {
    for (bool mask : {false, true}) {
      const auto& tr = ds.tracks[1];
      const auto rep = finite_difference_check(p, tr, draws, mask, g, 20, 17);
      INFO("group " << group_name(g) << " mask " << mask);
      CHECK(rep.max_rel <= 1e-5);
    }
  }
}

TEST_CASE("group gradients are restrictions of the all-group gradient") {
  const auto cfg = tiny_model();
  const auto p = jittered(cfg);
  const auto ds = generate_dataset(tiny_spec(4));
  const auto draws = make_draws(3, 4, cfg.max_frames, cfg.latent_dim);
  const auto all = loss_gradient(p, ds.tracks[0], draws, true, LayerGroup::All);
  const auto all_idx = group_indices(p.layout, LayerGroup::All);
  std::vector<double> full(p.layout.total(), 0.0);
  for (std::size_t i = 0; i < all.size(); ++i) full[all_idx[i]] = all[i];
  for (auto g : {LayerGroup::ToKV, LayerGroup::Cross, LayerGroup::Self}) {
    const auto sub = loss_gradient(p, ds.tracks[0], draws, true, g);
    CHECK(sub == p.layout.gather(g, full));
  }
}

TEST_CASE("zero model has dead block parameters") {
  const auto cfg = tiny_model();
  const ModelParams zero(cfg);
  const auto ds = generate_dataset(tiny_spec(2));
  const auto draws = make_draws(1, 2, cfg.max_frames, cfg.latent_dim);
  const auto g = loss_gradient(zero, ds.tracks[0], draws, false, LayerGroup::All);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("sampling contracts") {
  const auto cfg = tiny_model();
  const auto p = jittered(cfg);
  const std::vector<double> cond{0.2, -0.1, 0.4};
  const auto a = sample(p, cond, 4, 3, 8);
  const auto b = sample(p, cond, 4, 3, 8);
  CHECK(a.frames == b.frames);
  for (std::size_t i = 3 * cfg.latent_dim; i < a.frames.size(); ++i) CHECK(a.frames[i] == 0.0);
  CHECK_NOTHROW(a.validate());
  CHECK_THROWS_AS(sample(p, cond, 4, 0, 8), ArgumentError);
  CHECK_THROWS_AS(sample(p, cond, 4, cfg.max_frames + 1, 8), ArgumentError);

  const ModelParams zero(cfg);  // v_hat = 0
  const auto z = sample(zero, cond, 1, cfg.max_frames, 8);
  for (double v : z.frames) CHECK(v == 0.0);
}

TEST_CASE("training reduces loss and is deterministic") {
  const auto cfg = tiny_model();
  auto spec = tiny_spec(1);
  spec.num_clusters = 1;
  const auto ds = generate_dataset(spec);
  TrainConfig tc;
  tc.steps = 150;
  tc.seed = 4;
  tc.warmup_steps = 10;
  const auto a = train(ds.tracks, cfg, tc, Exec::Serial);
  CHECK(a.meta.final_loss < a.meta.initial_loss);
  const auto b = train(ds.tracks, cfg, tc, Exec::Serial);
  CHECK(a.hash == b.hash);
  CHECK(heldout_loss(a.params, ds.tracks, 16, 1) < heldout_loss(init_params(cfg), ds.tracks, 16, 1));
  CHECK_THROWS_AS(train({}, cfg, tc), ArgumentError);
}

TEST_CASE("diverging training reports the step") {
  const auto cfg = tiny_model();
  const auto ds = generate_dataset(tiny_spec(2));
  TrainConfig tc;
  tc.steps = 50;
  tc.learning_rate = 1e300;
  tc.grad_clip = 0;
  tc.warmup_steps = 0;
  try {
    train(ds.tracks, cfg, tc, Exec::Serial);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() >= 0);
    CHECK(std::string(e.what()).find("training step") != std::string::npos);
  }
}

TEST_CASE("init and content hash") {
  const auto cfg = tiny_model();
  const auto a = init_params(cfg);
  CHECK(content_hash(a) == content_hash(init_params(cfg)));
  CHECK(a.section("blocks.0.norm1.gain")[0] == 1.0);
  CHECK(a.section("in_proj.bias")[0] == 0.0);
  auto b = a;
  b.values[7] += 1e-12;
  CHECK(content_hash(a) != content_hash(b));
  auto other = cfg;
  other.seed = cfg.seed + 1;
  CHECK(content_hash(a) != content_hash(init_params(other)));
}
