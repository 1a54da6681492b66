#include <filesystem>

#include "doctest.h"
#include "support.hpp"
#include "tda/errors.hpp"
#include "tda/fim.hpp"

using namespace tda;
using namespace tda::testing;

namespace {

Checkpoint checkpoint_of(ModelParams p) {
  Checkpoint c{std::move(p), {}, nlohmann::json::object(), {}};
  c.rehash();
  return c;
}

// Direct definition: average over tracks and draws of squared per-draw gradients.
std::vector<double> fim_oracle(const ModelParams& p, const std::vector<LatentTrack>& tracks, LayerGroup g,
                               std::size_t T, std::uint64_t seed, double loss_scale = 1.0) {
  std::vector<double> out(p.layout.group_size(g), 0.0);
  for (const auto& tr : tracks) {
    const auto draws = make_draws(derive_seed(seed, {tr.id}), T, p.config.max_frames, p.config.latent_dim);
    for (const auto& d : draws) {
      std::vector<double> full(p.layout.total(), 0.0);
      accumulate_loss_gradient(p, tr, std::span(&d, 1), false, loss_scale, full);
      const auto gg = p.layout.gather(g, full);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += gg[j] * gg[j] / static_cast<double>(T * tracks.size());
    }
  }
  return out;
}

}  // namespace

TEST_CASE("precondition arithmetic") {
  FimDiagonal f;
  f.values = {1, 3};
  const auto r = precondition(f, std::vector<double>{2, 4}, 1.0);
  CHECK(r == std::vector<double>{1, 1});
  f.values = {0, 0};
  CHECK(precondition(f, std::vector<double>{2, -4}, 0.5) == std::vector<double>{4, -8});
  const double lam = 1e-3;
  f.values = {1 - lam, 1 - lam};
  const auto u = precondition(f, std::vector<double>{0.7, -2.5}, lam);
  CHECK(u[0] == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(u[1] == doctest::Approx(-2.5).epsilon(1e-15));
  CHECK_THROWS_AS(precondition(f, std::vector<double>{1}, lam), ShapeError);
  CHECK_THROWS_AS(precondition(f, std::vector<double>{1, 2}, 0.0), ArgumentError);
  CHECK_THROWS_AS(precondition(f, std::vector<double>{1, 2}, -1.0), ArgumentError);
}

TEST_CASE("default damping") {
  FimDiagonal f;
  f.values = {2, 4};
  CHECK(default_damping(f) == doctest::Approx(3e-8 + 1e-12).epsilon(1e-15));
}

TEST_CASE("FIM matches its definition") {
  const auto cfg = tiny_model();
  const auto ck = checkpoint_of(jittered(cfg));
  auto ds = generate_dataset(tiny_spec(3));

  SUBCASE("N=1, T=1 is the squared gradient") {
    Dataset one = ds;
    one.tracks.resize(1);
    const auto f = estimate_fim_diag(ck, one, LayerGroup::All, 1, 5);
    const auto draws = make_draws(derive_seed(5, {0}), 1, cfg.max_frames, cfg.latent_dim);
    const auto g = loss_gradient(ck.params, one.tracks[0], draws, false, LayerGroup::All);
    REQUIRE(f.values.size() == g.size());
    for (std::size_t j = 0; j < g.size(); ++j) CHECK(f.values[j] == doctest::Approx(g[j] * g[j]).epsilon(1e-12));
  }
  SUBCASE("average of per-track estimates and the direct oracle") {
    Dataset a = ds, b = ds;
    a.tracks = {ds.tracks[0]};
    b.tracks = {ds.tracks[1]};
    Dataset two = ds;
    two.tracks.resize(2);
    const auto fa = estimate_fim_diag(ck, a, LayerGroup::Cross, 4, 8);
    const auto fb = estimate_fim_diag(ck, b, LayerGroup::Cross, 4, 8);
    const auto f2 = estimate_fim_diag(ck, two, LayerGroup::Cross, 4, 8);
    const auto oracle = fim_oracle(ck.params, two.tracks, LayerGroup::Cross, 4, 8);
    for (std::size_t j = 0; j < f2.values.size(); ++j) {
      CHECK(f2.values[j] == doctest::Approx(0.5 * (fa.values[j] + fb.values[j])).epsilon(1e-12));
      CHECK(f2.values[j] == doctest::Approx(oracle[j]).epsilon(1e-10));
    }
  }
  SUBCASE("scaling the loss by k scales the FIM by k^2") {
    const double k = 3.0;
    const auto base = fim_oracle(ck.params, ds.tracks, LayerGroup::Self, 2, 1);
    const auto scaled = fim_oracle(ck.params, ds.tracks, LayerGroup::Self, 2, 1, k);
    const auto est = estimate_fim_diag(ck, ds, LayerGroup::Self, 2, 1);
    for (std::size_t j = 0; j < base.size(); ++j) {
      CHECK(scaled[j] == doctest::Approx(k * k * est.values[j]).epsilon(1e-10));
      CHECK(est.values[j] >= 0.0);
    }
  }
}

TEST_CASE("FIM properties") {
  const auto cfg = tiny_model();
  const auto ck = checkpoint_of(jittered(cfg));
  const auto ds = generate_dataset(tiny_spec(5));
  const auto all = estimate_fim_diag(ck, ds, LayerGroup::All, 3, 2, false, Exec::Serial);
  CHECK(all.values.size() == ck.params.layout.group_size(LayerGroup::All));
  CHECK(all.num_samples == 5);
  CHECK(all.num_timesteps == 3);
  for (double v : all.values) CHECK(v >= 0.0);

  set_num_threads(4);
  const auto par = estimate_fim_diag(ck, ds, LayerGroup::All, 3, 2, false, Exec::Parallel);
  CHECK(par.values == all.values);

  for (auto g : {LayerGroup::ToKV, LayerGroup::Cross, LayerGroup::Self}) {
    const auto direct = estimate_fim_diag(ck, ds, g, 3, 2, false, Exec::Serial);
    const auto restricted = restrict_fim(all, ck.params.layout, g);
    CHECK(restricted.group == g);
    CHECK(restricted.values == direct.values);
  }
  CHECK_THROWS_AS(restrict_fim(restrict_fim(all, ck.params.layout, LayerGroup::Self), ck.params.layout,
                               LayerGroup::Cross),
                  ArgumentError);

  Dataset empty = ds;
  empty.tracks.clear();
  CHECK_THROWS_AS(estimate_fim_diag(ck, empty, LayerGroup::All, 3, 2), ArgumentError);
  CHECK_THROWS_AS(estimate_fim_diag(ck, ds, LayerGroup::All, 0, 2), ArgumentError);
}

TEST_CASE("dead parameters have zero Fisher entries") {
  const auto cfg = tiny_model();
  const auto ck = checkpoint_of(ModelParams(cfg));
  const auto ds = generate_dataset(tiny_spec(2));
  const auto f = estimate_fim_diag(ck, ds, LayerGroup::All, 2, 1);
  for (double v : f.values) CHECK(v == 0.0);
}

TEST_CASE("FIM file round trip") {
  FimDiagonal f;
  f.group = LayerGroup::Cross;
  f.values = {0.0, 1.5, 2e-9};
  f.num_samples = 7;
  f.num_timesteps = 32;
  f.seed = 99;
  const auto path = (std::filesystem::temp_directory_path() / "tda_test_fim.bin").string();
  write_fim(f, path);
  CHECK(read_fim(path) == f);
  std::filesystem::remove(path);
  auto bytes = encode_fim(f);
  bytes[1] = 'Z';
  CHECK_THROWS_AS(decode_fim(bytes), FormatError);
  f.values[0] = -1.0;
  CHECK_THROWS_AS(decode_fim(encode_fim(f)), FormatError);
}
