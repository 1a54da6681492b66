// Serial reference vs OpenMP kernels on the default model size.

#include <benchmark/benchmark.h>

#include "tda/attribution.hpp"
#include "tda/data.hpp"
#include "tda/fim.hpp"
#include "tda/model.hpp"
#include "tda/unlearn.hpp"

using namespace tda;

namespace {

struct Setup {
  Dataset ds;
  Checkpoint ckpt;
  Setup() : ds(make_ds()), ckpt{init_params(ModelConfig{}), {}, nlohmann::json::object(), {}} { ckpt.rehash(); }
  static Dataset make_ds() {
    DatasetSpec s;
    s.num_tracks = 32;
    return generate_dataset(s);
  }
};

const Setup& setup() {
  static const Setup s;
  return s;
}

Exec exec_of(const benchmark::State& st) { return st.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

void BM_EvalLosses(benchmark::State& st) {
  const auto& s = setup();
  const EvalSpec spec{8, 1, false};
  for (auto _ : st) benchmark::DoNotOptimize(eval_losses(s.ckpt, s.ds, spec, exec_of(st)));
}

void BM_UnlearningGradient(benchmark::State& st) {
  const auto& s = setup();
  UnlearnConfig u;
  u.grad_timesteps = 256;
  for (auto _ : st) benchmark::DoNotOptimize(unlearning_gradient(s.ckpt.params, s.ds.tracks[0], u, 0, exec_of(st)));
}

void BM_Fim(benchmark::State& st) {
  const auto& s = setup();
  for (auto _ : st) benchmark::DoNotOptimize(estimate_fim_diag(s.ckpt, s.ds, LayerGroup::All, 4, 1, false, exec_of(st)));
}

void BM_TrainSteps(benchmark::State& st) {
  const auto& s = setup();
  TrainConfig tc;
  tc.steps = 5;
  for (auto _ : st) benchmark::DoNotOptimize(train(s.ds.tracks, ModelConfig{}, tc, exec_of(st)));
}

}  // namespace

// Argument 0 = serial reference, 1 = OpenMP.
BENCHMARK(BM_EvalLosses)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_UnlearningGradient)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_Fim)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_TrainSteps)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
