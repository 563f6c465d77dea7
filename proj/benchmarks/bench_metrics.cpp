#include <vector>

#include <benchmark/benchmark.h>

#include "slmaudit/bootstrap.hpp"
#include "slmaudit/calibration.hpp"
#include "slmaudit/rng.hpp"
#include "slmaudit/robustness.hpp"

namespace {

using namespace slmaudit;

void BM_Ece(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Xoshiro256 gen(1);
  std::vector<double> conf(n);
  std::vector<bool> correct(n);
  for (std::size_t i = 0; i < n; ++i) {
    conf[i] = uniform_unit(gen);
    correct[i] = uniform_unit(gen) < conf[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(ece(conf, correct, 10));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n));
}
BENCHMARK(BM_Ece)->Arg(500)->Arg(5000);

// Exact permutation p-value: n! orderings.
void BM_SpearmanExact(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = static_cast<double>(i % 4);
    y[i] = static_cast<double>((i * 7) % n);
  }
  for (auto _ : state) benchmark::DoNotOptimize(spearman(x, y));
}
BENCHMARK(BM_SpearmanExact)->Arg(6)->Arg(8)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_SpearmanMonteCarlo(benchmark::State& state) {
  std::vector<double> x(30), y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    x[i] = static_cast<double>(i);
    y[i] = static_cast<double>((i * 11) % 30);
  }
  for (auto _ : state) benchmark::DoNotOptimize(spearman(x, y));
}
BENCHMARK(BM_SpearmanMonteCarlo)->Unit(benchmark::kMillisecond);

void BM_BootstrapMean(benchmark::State& state) {
  Xoshiro256 gen(2);
  std::vector<double> data(500);
  for (auto& v : data) v = uniform_unit(gen) < 0.7 ? 1.0 : 0.0;
  BootstrapOptions opts;
  opts.threads = static_cast<unsigned>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(bootstrap_ci(data, mean_of, opts));
}
BENCHMARK(BM_BootstrapMean)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();

void BM_SpreadCi(benchmark::State& state) {
  Xoshiro256 gen(3);
  std::map<Variant, std::vector<bool>> columns;
  for (Variant v : kSpreadVariants) {
    auto& c = columns[v];
    for (int i = 0; i < 500; ++i) c.push_back(uniform_unit(gen) < 0.8);
  }
  for (auto _ : state) benchmark::DoNotOptimize(spread_ci(columns));
}
BENCHMARK(BM_SpreadCi)->Unit(benchmark::kMillisecond);

}  // namespace
