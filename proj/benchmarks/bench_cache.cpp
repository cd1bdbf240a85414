#include <benchmark/benchmark.h>

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "keycache/analysis.hpp"
#include "keycache/cache.hpp"
#include "keycache/model.hpp"
#include "keycache/tuner.hpp"

namespace {

using namespace keycache;

RowMatrix random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  RowMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(gen);
  return m;
}

CacheStore random_cache(std::size_t k, std::size_t d, std::uint32_t classes) {
  RowMatrix keys = random_rows(k, d, 1);
  keys.rowwise().normalize();
  std::vector<std::uint32_t> labels(k);
  for (std::size_t i = 0; i < k; ++i) labels[i] = static_cast<std::uint32_t>(i % classes);
  return CacheStore(std::move(keys), std::move(labels), classes, {"keys"});
}

std::vector<ClassDistribution> uniform_p_net(std::size_t n, std::uint32_t classes) {
  return std::vector<ClassDistribution>(n, ClassDistribution{std::vector<double>(classes, 1.0 / classes)});
}

// args: queries, cache size, key width
void BM_ComputeScores(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto d = static_cast<std::size_t>(state.range(2));
  const CacheStore cache = random_cache(k, d, 10);
  const RowMatrix queries = random_rows(n, d, 2);
  for (auto _ : state) benchmark::DoNotOptimize(compute_scores(queries, cache));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k));
}
BENCHMARK(BM_ComputeScores)->Args({100, 1000, 64})->Args({1000, 1000, 64})->Args({1000, 10000, 64})
    ->Args({1000, 1000, 512})->Unit(benchmark::kMillisecond);

void BM_PredictBatch(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const CacheStore cache = random_cache(k, 64, 10);
  const RowMatrix queries = random_rows(n, 64, 3);
  const auto p_net = uniform_p_net(n, 10);
  for (auto _ : state) benchmark::DoNotOptimize(predict_batch(queries, cache, p_net, {50.0, 0.5}));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_PredictBatch)->Args({1000, 1000})->Args({1000, 10000})->Unit(benchmark::kMillisecond);

// Full 9x9 grid on precomputed scores.
void BM_GridSearch(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const CacheStore cache = random_cache(k, 64, 10);
  ScoredSplit split;
  split.scores = compute_scores(random_rows(n, 64, 4), cache);
  split.p_net = uniform_p_net(n, 10);
  split.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) split.labels[i] = static_cast<std::uint32_t>(i % 10);
  const Grid grid = Grid::standard();
  for (auto _ : state) benchmark::DoNotOptimize(grid_search(split, cache, grid));
}
BENCHMARK(BM_GridSearch)->Args({500, 1000})->Args({2000, 1000})->Unit(benchmark::kMillisecond);

void BM_MixtureJacobian(benchmark::State& state) {
  RefNetConfig cfg;
  auto net = std::make_shared<const RefNet>(RefNet(cfg));
  const auto k = static_cast<std::size_t>(state.range(0));
  auto cache = std::make_shared<const CacheStore>([&] {
    RowMatrix keys = random_rows(k, 64, 5).cwiseAbs();
    keys.rowwise().normalize();
    std::vector<std::uint32_t> labels(k);
    for (std::size_t i = 0; i < k; ++i) labels[i] = static_cast<std::uint32_t>(i % 10);
    return CacheStore(std::move(keys), std::move(labels), 10, {"hidden2"});
  }());
  const CacheAugmentedNet model(net, cache, {50.0, 0.5});
  std::vector<double> x(64, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(jacobian(model, x));
}
BENCHMARK(BM_MixtureJacobian)->Arg(1000)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
