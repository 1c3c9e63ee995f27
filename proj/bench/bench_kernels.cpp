// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

// Serial reference path vs OpenMP path for the hot kernels.
// Arg 0 = serial, 1 = parallel.

#include <benchmark/benchmark.h>

#include "opadpo/diagnostics.hpp"
#include "opadpo/eval.hpp"
#include "opadpo/loss.hpp"
#include "opadpo/run_config.hpp"
#include "opadpo/synth.hpp"

namespace opadpo {
namespace {

struct Fixture {
  RunConfig cfg;
  policy::ParameterSet trainee, reference;
  std::vector<PreferenceRecord> records;
  loss::Distortion distortion;

  static const Fixture& get() {
    static const Fixture f = [] {
      Fixture f;
      f.trainee = policy::ParameterSet::random(f.cfg.spec, 1);
      f.reference = policy::ParameterSet::random(f.cfg.spec, 2);
      f.records = synth::build_dataset(f.reference, dataset(f.cfg, 256));
      f.distortion = {loss::dataset_mean(f.records), 3};
      return f;
    }();
    return f;
  }

  static synth::DatasetConfig dataset(const RunConfig& cfg, int n) {
    synth::DatasetConfig dc;
    dc.n_records = n;
    dc.sampling = cfg.sampling;
    dc.world = cfg.world;
    return dc;
  }
};

Exec exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? Exec::serial : Exec::parallel;
}

void BM_OpaDpoLoss(benchmark::State& state) {
  const auto& f = Fixture::get();
  const std::span<const PreferenceRecord> batch(f.records.data(), 32);
  const auto tables = loss::WeightTables::standard();
  for (auto _ : state)
    benchmark::DoNotOptimize(loss::opa_dpo_loss(f.trainee, f.reference, batch, tables,
                                                f.cfg.train.loss, f.distortion, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_OpaDpoLoss)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_BuildDataset(benchmark::State& state) {
  const auto& f = Fixture::get();
  const auto dc = Fixture::dataset(f.cfg, 128);
  for (auto _ : state)
    benchmark::DoNotOptimize(synth::build_dataset(f.reference, dc, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_BuildDataset)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  const auto& f = Fixture::get();
  eval::EvalConfig ec;
  ec.n_worlds = 200;
  ec.world = f.cfg.world;
  ec.exec = exec_of(state);
  for (auto _ : state) benchmark::DoNotOptimize(eval::evaluate("bench", f.trainee, ec));
  state.SetItemsProcessed(state.iterations() * 200);
}
BENCHMARK(BM_Evaluate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PositionwiseKl(benchmark::State& state) {
  const auto& f = Fixture::get();
  const auto set = diag::revised_responses(f.records);
  for (auto _ : state)
    benchmark::DoNotOptimize(diag::positionwise_kl(f.trainee, f.reference, set, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(set.size()));
}
BENCHMARK(BM_PositionwiseKl)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace opadpo

BENCHMARK_MAIN();
