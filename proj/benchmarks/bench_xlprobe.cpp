#include <benchmark/benchmark.h>

#include <limits>

#include "xlprobe/overlap.hpp"
#include "xlprobe/probe.hpp"
#include "xlprobe/selection.hpp"
#include "xlprobe/synth.hpp"

using namespace xlprobe;

namespace {

PlantedDataset planted(std::size_t d) {
  PlantedSpec spec;
  spec.d = d;
  spec.k_true = 8;
  spec.n_per_class = 500;
  spec.seed = 1;
  return generate_planted(spec);
}

LinearProbe trained(const PlantedDataset& p) {
  TrainConfig cfg;
  cfg.epochs = 5;
  return train(p.data, cfg);
}

// Greedy selection that rescores every candidate subset from scratch.
std::vector<std::size_t> naive_greedy(const LinearProbe& probe, const DataView& dev,
                                      std::size_t k) {
  Mask current(probe.dim());
  std::vector<std::size_t> order;
  for (std::size_t step = 0; step < k; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t pick = 0;
    for (std::size_t j = 0; j < probe.dim(); ++j) {
      if (current.contains(j)) continue;
      current.insert(j);
      const double nll = masked_nll(probe, dev, current);
      current.erase(j);
      if (nll < best) {
        best = nll;
        pick = j;
      }
    }
    current.insert(pick);
    order.push_back(pick);
  }
  return order;
}

void BM_GreedyIncremental(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const PlantedDataset p = planted(d);
  const LinearProbe probe = trained(p);
  const DataView dev = view(p.data, Split::dev);
  for (auto _ : state) benchmark::DoNotOptimize(greedy_select(probe, dev, 16));
}
BENCHMARK(BM_GreedyIncremental)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_GreedyNaive(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const PlantedDataset p = planted(d);
  const LinearProbe probe = trained(p);
  const DataView dev = view(p.data, Split::dev);
  for (auto _ : state) benchmark::DoNotOptimize(naive_greedy(probe, dev, 16));
}
BENCHMARK(BM_GreedyNaive)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const PlantedDataset p = planted(d);
  TrainConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) benchmark::DoNotOptimize(train(p.data, cfg));
  state.SetItemsProcessed(state.iterations() *
                          static_cast<std::int64_t>(p.data.rows_in(Split::train).size()));
}
BENCHMARK(BM_TrainEpoch)->Arg(64)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_HypergeomExact(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(hypergeom_pvalue(60, 10, 4));
}
BENCHMARK(BM_HypergeomExact);

void BM_HypergeomLogSpace(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(hypergeom_pvalue(1024, 50, 8));
}
BENCHMARK(BM_HypergeomLogSpace);

}  // namespace

BENCHMARK_MAIN();
