#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "stgdn/graph_attention.hpp"
#include "test_util.hpp"

using namespace stgdn;

namespace {

Tensor rnd(Shape s, std::uint64_t seed) { return testing_util::random_tensor(std::move(s), seed, -1.0, 1.0); }

double leaky(double x, double s) { return x >= 0.0 ? x : s * x; }

AttentionGraph self_loops(std::size_t n) {
  std::vector<std::vector<std::size_t>> l(n);
  for (std::size_t v = 0; v < n; ++v) l[v] = {v};
  return AttentionGraph(l);
}

AttentionGraph random_graph(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> l(n);
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t u = 0; u < n; ++u) {
      if (u == v || rng() % 3 == 0) l[v].push_back(u);
    }
    std::shuffle(l[v].begin(), l[v].end(), rng);
  }
  return AttentionGraph(l);
}

struct Stack {
  ParamSet params;
  std::size_t heads;
};

Stack random_stack(std::size_t d, std::size_t heads, std::size_t layers, std::uint64_t seed) {
  Stack s{{}, heads};
  for (std::size_t l = 0; l < layers; ++l) {
    s.params.add("w" + std::to_string(l), rnd({d, d}, seed + 2 * l));
    s.params.add("a" + std::to_string(l), rnd({heads, 2 * d / heads}, seed + 2 * l + 1));
  }
  return s;
}

std::vector<GatLayerVars> bind_layers(const Bindings& b, const ParamSet& p) {
  std::vector<GatLayerVars> out;
  for (std::size_t l = 0; 2 * l < p.size(); ++l) out.push_back({b["w" + std::to_string(l)], b["a" + std::to_string(l)]});
  return out;
}

}  // namespace

TEST(AttentionGraph, Policies) {
  const auto full = build_attention_graph(4, {EdgePolicy::full, 8});
  for (std::size_t v = 0; v < 4; ++v) {
    const auto nb = full.neighbors(v);
    EXPECT_EQ(nb.size(), 4u);
    EXPECT_NE(std::find(nb.begin(), nb.end(), v), nb.end());
  }

  // Regions 1 and 3 share a profile shape; the rest differ.
  Tensor prof = Tensor::matrix(4, 4, {1, 5, 2, 0, 0, 1, 0, 9, 3, 3, 8, 1, 0, 2, 0, 18});
  const auto knn1 = build_attention_graph(4, {EdgePolicy::knn, 1}, &prof);
  EXPECT_EQ(knn1.neighbors(1), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(knn1.neighbors(3), (std::vector<std::size_t>{1, 3}));

  const Tensor big = rnd({32 * 32, 6}, 3);
  const auto knn3 = build_attention_graph(32 * 32, {EdgePolicy::knn, 3}, &big);
  for (std::size_t v = 0; v < knn3.nodes(); ++v) {
    const auto nb = knn3.neighbors(v);
    EXPECT_EQ(nb.size(), 4u);
    EXPECT_EQ(std::count(nb.begin(), nb.end(), v), 1);
  }
  EXPECT_THROW(build_attention_graph(4, {EdgePolicy::knn, 4}, &prof), ValidationError);
  EXPECT_EQ(resolve_policy({}, 256).kind, EdgePolicy::full);
  EXPECT_EQ(resolve_policy({}, 257).kind, EdgePolicy::knn);
}

TEST(AttentionGraph, IsolatedNodeGetsSelfLoopAndDuplicatesRejected) {
  AttentionGraph g({{1}, {}});
  EXPECT_EQ(g.neighbors(1), (std::vector<std::size_t>{1}));
  EXPECT_THROW(AttentionGraph({{0, 0}}), ValidationError);
}

TEST(AttentionCoefficients, Examples) {
  AttentionGraph g({{0, 1, 2}, {1}, {2}});
  Tensor y = Tensor::matrix(3, 2, {0.3, -0.2, 1.0, 2.0, 1.0, 2.0});
  const Tensor alpha = Tensor::matrix(1, 4, {0.4, 0.1, -0.7, 0.9});
  const auto om = attention_coefficients(y, g, alpha, 0.2);
  EXPECT_EQ(om[1], om[2]);
  EXPECT_EQ(om[3], 1.0);
  const auto uniform = attention_coefficients(y, g, Tensor({1, 4}), 0.2);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(uniform[e], 1.0 / 3.0, 1e-16);
}

TEST(PropagateLayer, UniformIdentityIsNeighbourMean) {
  AttentionGraph g({{0, 1}, {0, 1, 2}, {2}});
  const Tensor z = Tensor::matrix(3, 2, {1.0, -3.0, 2.0, 5.0, -4.0, 0.5});
  Graph gr;
  const Var out = propagate_layer(gr.constant(z), g, {gr.constant(Tensor::identity(2)), gr.constant(Tensor({1, 4}))},
                                  1, 0.2);
  const double expect[] = {1.5, 1.0, -0.2 / 3.0, 2.5 / 3.0, -0.8, 0.5};
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(out.value()[k], expect[k], 1e-15);

  const Tensor z2 = rnd({4, 4}, 9);
  const Var self = propagate_layer(gr.constant(z2), self_loops(4),
                                   {gr.constant(Tensor::identity(4)), gr.constant(rnd({2, 4}, 10))}, 2, 0.2);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(self.value()[k], leaky(z2[k], 0.2));
}

TEST(PropagateLayer, PathGraphHandEvaluated) {
  // Path 0 - 1 - 2 with self-loops, width 1, one head.
  AttentionGraph g({{0, 1}, {0, 1, 2}, {1, 2}});
  const double z[] = {0.5, -1.0, 2.0}, w = 1.5, ad = 0.8, as = -0.6, slope = 0.2;
  double expect[3];
  for (std::size_t v = 0; v < 3; ++v) {
    const auto nb = g.neighbors(v);
    double den = 0.0, num = 0.0;
    for (auto u : nb) {
      const double e = std::exp(leaky(ad * z[v] * w + as * z[u] * w, slope));
      den += e;
      num += e * z[u] * w;
    }
    expect[v] = leaky(num / den, slope);
  }
  Graph gr;
  const Var out = propagate_layer(gr.constant(Tensor({3, 1}, {z[0], z[1], z[2]})), g,
                                  {gr.constant(Tensor::matrix(1, 1, {w})), gr.constant(Tensor::matrix(1, 2, {ad, as}))},
                                  1, slope);
  for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(out.value()[v], expect[v], 1e-15);
}

TEST(EncodeGlobal, LayerSums) {
  const Tensor y = testing_util::random_tensor({3, 4}, 4, 0.1, 1.0);
  Graph gr;
  const GatLayerVars id{gr.constant(Tensor::identity(4)), gr.constant(rnd({2, 4}, 5))};
  const auto one = encode_global(gr.constant(y), self_loops(3), {id}, 2, 0.2);
  EXPECT_EQ(one.z.value(), one.layers[0].value());
  const auto three = encode_global(gr.constant(y), self_loops(3), {id, id, id}, 2, 0.2);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_NEAR(three.z.value()[k], 3.0 * y[k], 1e-15);
  const auto with_input = encode_global(gr.constant(y), self_loops(3), {id, id, id}, 2, 0.2, true);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_NEAR(with_input.z.value()[k], 4.0 * y[k], 1e-15);

  const Tensor y64 = rnd({16, 64}, 6);
  const auto st = random_stack(64, 4, 3, 7);
  Bindings b(gr, st.params, false);
  const auto enc = encode_global(gr.constant(y64), build_attention_graph(16, {}), bind_layers(b, st.params), 4, 0.2);
  EXPECT_EQ(enc.z.shape(), (Shape{16, 64}));
}

TEST(EncodeGlobal, EveryDistributionSumsToOne) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = random_graph(12, s);
    const auto st = random_stack(8, 2, 3, 100 + s);
    Graph gr;
    Bindings b(gr, st.params, false);
    const auto enc = encode_global(gr.constant(testing_util::random_tensor({12, 8}, s, -3.0, 3.0)), g,
                                   bind_layers(b, st.params), 2, 0.2);
    for (const auto& om : enc.omega) {
      for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t v = 0; v < 12; ++v) {
          double sum = 0.0;
          for (std::size_t e = g.begin(v); e < g.end(v); ++e) {
            EXPECT_GE(om[h * g.edges() + e], 0.0);
            sum += om[h * g.edges() + e];
          }
          EXPECT_NEAR(sum, 1.0, 1e-12);
        }
      }
    }
  }
}

TEST(EncodeGlobal, PermutationEquivariantBitExact) {
  const std::size_t n = 10, d = 8;
  const auto g = random_graph(n, 42);
  const auto st = random_stack(d, 2, 2, 43);
  const Tensor y = rnd({n, d}, 44);
  Graph g0;
  Bindings b0(g0, st.params, false);
  const Tensor ref = encode_global(g0.constant(y), g, bind_layers(b0, st.params), 2, 0.2).z.value();

  std::mt19937_64 rng(45);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> pi(n);
    std::iota(pi.begin(), pi.end(), std::size_t{0});
    std::shuffle(pi.begin(), pi.end(), rng);
    std::vector<std::vector<std::size_t>> lists(n);
    Tensor py({n, d});
    for (std::size_t v = 0; v < n; ++v) {
      for (auto u : g.neighbors(v)) lists[pi[v]].push_back(pi[u]);
      for (std::size_t c = 0; c < d; ++c) py.at(pi[v], c) = y.at(v, c);
    }
    Graph g1;
    Bindings b1(g1, st.params, false);
    const Tensor out = encode_global(g1.constant(py), AttentionGraph(lists), bind_layers(b1, st.params), 2, 0.2).z.value();
    for (std::size_t v = 0; v < n; ++v) {
      for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(out.at(pi[v], c), ref.at(v, c));
    }
  }
}

TEST(EncodeGlobal, IsolatedNodeDependsOnlyOnItself) {
  AttentionGraph g({{0, 1}, {0, 1}, {2}});
  const auto st = random_stack(4, 2, 2, 50);
  Tensor y = rnd({3, 4}, 51);
  auto run = [&](const Tensor& in) {
    Graph gr;
    Bindings b(gr, st.params, false);
    return encode_global(gr.constant(in), g, bind_layers(b, st.params), 2, 0.2).z.value();
  };
  const Tensor a = run(y);
  for (std::size_t c = 0; c < 4; ++c) y.at(0, c) += 1.0;
  const Tensor b = run(y);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.at(2, c), b.at(2, c));
  EXPECT_NE(a.at(1, 0), b.at(1, 0));
}

TEST(EncodeGlobal, GradCheck) {
  const auto g = random_graph(9, 60);
  auto st = random_stack(8, 2, 2, 61);
  st.params.add("y", rnd({9, 8}, 62));
  const Tensor weights = rnd({9, 8}, 63);
  auto f = [&](const ParamSet& ps, ParamSet* grads) {
    Graph gr;
    Bindings b(gr, ps);
    std::vector<GatLayerVars> layers = {{b["w0"], b["a0"]}, {b["w1"], b["a1"]}};
    const auto enc = encode_global(b["y"], g, layers, 2, 0.2);
    Var loss = sum(mul_elem(enc.z, gr.constant(weights)));
    if (grads) {
      gr.backward(loss);
      *grads = b.gradients(gr, ps);
    }
    return loss.value().item();
  };
  EXPECT_LT(grad_check(f, st.params, 1e-6).max_rel_error, 1e-5);
}

TEST(HeadMeanScores, DenseLayout) {
  AttentionGraph g({{0, 1}, {1}});
  const std::vector<double> omega = {0.25, 0.75, 1.0, 0.5, 0.5, 1.0};
  const Tensor s = head_mean_scores(omega, g, 2);
  EXPECT_EQ(s, Tensor::matrix(2, 2, {0.375, 0.625, 0.0, 1.0}));
}
