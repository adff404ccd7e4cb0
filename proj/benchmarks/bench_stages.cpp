#include <random>

#include <benchmark/benchmark.h>

#include "stgdn/graph_attention.hpp"
#include "stgdn/graph_diffusion.hpp"
#include "stgdn/temporal_encoder.hpp"

using namespace stgdn;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double scale = 0.5) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& x : t.values()) x = u(rng);
  return t;
}

constexpr std::size_t kWidth = 16;
constexpr std::size_t kHeads = 2;
constexpr std::size_t kLayers = 2;

// Forward and backward of the layered graph attention on a side x side grid.
void BM_GraphAttention(benchmark::State& state, EdgePolicy kind) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const std::size_t n = side * side;
  const Tensor profiles = uniform({n, 24}, 3);
  const AttentionGraph graph = build_attention_graph(n, {kind, 8}, &profiles);
  const Tensor y = uniform({n, kWidth}, 1);
  std::vector<Tensor> w, a;
  for (std::size_t l = 0; l < kLayers; ++l) {
    w.push_back(uniform({kWidth, kWidth}, 10 + l));
    a.push_back(uniform({kHeads, 2 * kWidth / kHeads}, 20 + l));
  }
  for (auto _ : state) {
    Graph g;
    std::vector<GatLayerVars> layers;
    for (std::size_t l = 0; l < kLayers; ++l) layers.push_back({g.leaf(w[l]), g.leaf(a[l])});
    const auto enc = encode_global(g.constant(y), graph, layers, kHeads, 0.2, true);
    Var loss = sum(enc.z);
    g.backward(loss);
    benchmark::DoNotOptimize(loss.value().item());
  }
  state.counters["regions"] = static_cast<double>(n);
  state.counters["edges"] = static_cast<double>(graph.edges());
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n));
}

void BM_Diffusion(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const std::size_t k = static_cast<std::size_t>(state.range(1));
  const RegionGrid grid(side, side);
  const SpatialGraph sg = build_spatial_graph(grid, uniform({side * side, side * side}, 4, 1.0), {9, 4, 1.0, 0.1});
  const Tensor z = uniform({side * side, kWidth}, 5);
  const Tensor theta = uniform({kWidth, kWidth, k, 2}, 6);
  for (auto _ : state) {
    Graph g;
    Var out = diffusion_conv(g.constant(z), g.leaf(theta), sg, 0.2);
    Var loss = sum(out);
    g.backward(loss);
    benchmark::DoNotOptimize(loss.value().item());
  }
  state.SetComplexityN(static_cast<benchmark::IterationCount>(side * side));
}

void BM_TemporalAttention(benchmark::State& state) {
  const auto steps = static_cast<std::size_t>(state.range(0));
  const Tensor e = uniform({steps, kWidth}, 7);
  const Tensor wq = uniform({kWidth, kWidth}, 8), wk = uniform({kWidth, kWidth}, 9), wv = uniform({kWidth, kWidth}, 10);
  for (auto _ : state) benchmark::DoNotOptimize(self_attention(e, wq, wk, wv).pooled);
}

}  // namespace

BENCHMARK_CAPTURE(BM_GraphAttention, full, EdgePolicy::full)
    ->DenseRange(4, 16, 4)
    ->Unit(benchmark::kMicrosecond)
    ->Complexity(benchmark::oNSquared);
BENCHMARK_CAPTURE(BM_GraphAttention, knn8, EdgePolicy::knn)
    ->DenseRange(4, 16, 4)
    ->Unit(benchmark::kMicrosecond)
    ->Complexity(benchmark::oN);
BENCHMARK(BM_Diffusion)->ArgsProduct({{4, 8, 16}, {1, 3}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TemporalAttention)->RangeMultiplier(2)->Range(2, 32);

BENCHMARK_MAIN();
