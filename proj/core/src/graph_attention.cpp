#include "stgdn/graph_attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "stgdn/io.hpp"
#include "stgdn/kernels.hpp"

namespace stgdn {

std::string format_policy(const AttentionGraphPolicy& p) {
  switch (p.kind) {
    case EdgePolicy::automatic: return "auto";
    case EdgePolicy::full: return "full";
    case EdgePolicy::knn: return "knn:" + std::to_string(p.m);
  }
  return "auto";
}

AttentionGraphPolicy parse_policy(std::string_view s) {
  if (s == "auto") return {EdgePolicy::automatic, 8};
  if (s == "full") return {EdgePolicy::full, 8};
  if (s.substr(0, 4) == "knn:") {
    const auto m = io::parse_int(s.substr(4), "knn neighbour count");
    if (m < 1) throw ValidationError("knn neighbour count must be at least 1");
    return {EdgePolicy::knn, static_cast<std::size_t>(m)};
  }
  throw ValidationError("unknown edge policy '" + std::string(s) + "' (expected auto, full or knn:M)");
}

AttentionGraphPolicy resolve_policy(const AttentionGraphPolicy& p, std::size_t regions) {
  if (p.kind != EdgePolicy::automatic) return p;
  if (regions <= 16 * 16) return {EdgePolicy::full, p.m};
  return {EdgePolicy::knn, 8};
}

// ---- AttentionGraph ------------------------------------------------------

AttentionGraph::AttentionGraph(const std::vector<std::vector<std::size_t>>& in_neighbors) {
  const std::size_t n = in_neighbors.size();
  offsets_.reserve(n + 1);
  offsets_.push_back(0);
  std::vector<char> seen(n, 0);
  for (std::size_t v = 0; v < n; ++v) {
    const auto& list = in_neighbors[v];
    if (list.empty()) {
      sources_.push_back(v);
    } else {
      for (auto u : list) {
        if (u >= n) throw ValidationError("attention graph edge source " + std::to_string(u) + " out of range");
        if (seen[u]) throw ValidationError("duplicate edge " + std::to_string(u) + " -> " + std::to_string(v));
        seen[u] = 1;
        sources_.push_back(u);
      }
      for (auto u : list) seen[u] = 0;
    }
    offsets_.push_back(sources_.size());
  }
}

std::vector<std::size_t> AttentionGraph::neighbors(std::size_t v) const {
  return {sources_.begin() + static_cast<std::ptrdiff_t>(begin(v)), sources_.begin() + static_cast<std::ptrdiff_t>(end(v))};
}

AttentionGraph build_attention_graph(std::size_t regions, const AttentionGraphPolicy& policy, const Tensor* profiles) {
  const auto p = resolve_policy(policy, regions);
  std::vector<std::vector<std::size_t>> lists(regions);
  if (p.kind == EdgePolicy::full) {
    for (auto& l : lists) {
      l.resize(regions);
      std::iota(l.begin(), l.end(), std::size_t{0});
    }
    return AttentionGraph(lists);
  }

  if (p.m >= regions) {
    throw ValidationError("knn(" + std::to_string(p.m) + ") needs fewer neighbours than the " + std::to_string(regions) +
                          " regions");
  }
  if (!profiles || profiles->rows() != regions) {
    throw ValidationError("knn edge policy needs one volume profile per region");
  }
  const std::size_t f = profiles->cols();
  std::vector<double> centred(profiles->values().begin(), profiles->values().end());
  std::vector<double> norm(regions, 0.0);
  for (std::size_t r = 0; r < regions; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < f; ++c) mu += centred[r * f + c];
    mu /= static_cast<double>(f);
    double ss = 0.0;
    for (std::size_t c = 0; c < f; ++c) {
      centred[r * f + c] -= mu;
      ss += centred[r * f + c] * centred[r * f + c];
    }
    norm[r] = std::sqrt(ss);
  }
  std::vector<std::pair<double, std::size_t>> sims;
  for (std::size_t v = 0; v < regions; ++v) {
    sims.clear();
    for (std::size_t u = 0; u < regions; ++u) {
      if (u == v) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < f; ++c) dot += centred[v * f + c] * centred[u * f + c];
      const double denom = norm[v] * norm[u];
      sims.emplace_back(denom > 0.0 ? dot / denom : 0.0, u);
    }
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    auto& l = lists[v];
    l.push_back(v);
    for (std::size_t k = 0; k < p.m; ++k) l.push_back(sims[k].second);
    std::sort(l.begin(), l.end());
  }
  return AttentionGraph(lists);
}

// ---- attention -----------------------------------------------------------

std::vector<double> attention_coefficients(const Tensor& projected, const AttentionGraph& graph, const Tensor& alpha,
                                           double slope) {
  const std::size_t dh = projected.cols();
  if (alpha.size() != 2 * dh) {
    throw ValidationError("attention vector has " + std::to_string(alpha.size()) + " entries, expected " +
                          std::to_string(2 * dh));
  }
  if (projected.rows() != graph.nodes()) throw ValidationError("feature rows do not match graph nodes");
  std::vector<double> omega(graph.edges());
  std::vector<double> logits;
  for (std::size_t v = 0; v < graph.nodes(); ++v) {
    if (graph.degree(v) == 0) throw ValidationError("node " + std::to_string(v) + " has no neighbours");
    double s_dst = 0.0;
    for (std::size_t c = 0; c < dh; ++c) s_dst += alpha[c] * projected.at(v, c);
    logits.clear();
    for (std::size_t e = graph.begin(v); e < graph.end(v); ++e) {
      const std::size_t u = graph.source(e);
      double s = s_dst;
      for (std::size_t c = 0; c < dh; ++c) s += alpha[dh + c] * projected.at(u, c);
      logits.push_back(kernels::leaky(s, slope));
    }
    kernels::softmax(logits, std::span<double>(omega.data() + graph.begin(v), graph.degree(v)));
  }
  return omega;
}

Var attention_aggregate(Var projected, Var alpha, const AttentionGraph& graph, std::size_t heads, double slope,
                        std::vector<double>* omega_out) {
  Graph& g = *projected.graph();
  const Tensor& y = projected.value();
  const Tensor& a = alpha.value();
  const std::size_t n = graph.nodes();
  if (heads == 0 || y.rank() != 2 || y.rows() != n || y.cols() % heads != 0) {
    throw ValidationError("attention_aggregate: features " + y.shape_str() + " incompatible with " +
                          std::to_string(n) + " nodes and " + std::to_string(heads) + " heads");
  }
  const std::size_t width = y.cols(), dh = width / heads, ne = graph.edges();
  if (a.rows() != heads || a.cols() != 2 * dh) {
    throw ValidationError("attention_aggregate: attention vectors " + a.shape_str() + ", expected " +
                          shape_to_string({heads, 2 * dh}));
  }

  // s_dst[v, h] = a_dst . y_v^h and s_src[u, h] = a_src . y_u^h.
  std::vector<double> s_dst(n * heads, 0.0), s_src(n * heads, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* yv = y.values().data() + v * width + h * dh;
      const double* ah = a.values().data() + h * 2 * dh;
      double sd = 0.0, ss = 0.0;
      for (std::size_t c = 0; c < dh; ++c) {
        sd += ah[c] * yv[c];
        ss += ah[dh + c] * yv[c];
      }
      s_dst[v * heads + h] = sd;
      s_src[v * heads + h] = ss;
    }
  }

  std::vector<double> pre(heads * ne), omega(heads * ne);
  Tensor out({n, width});
  std::vector<double> logits;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t v = 0; v < n; ++v) {
      const std::size_t b = graph.begin(v), deg = graph.degree(v);
      if (deg == 0) throw ValidationError("node " + std::to_string(v) + " has no neighbours");
      logits.resize(deg);
      for (std::size_t e = b; e < b + deg; ++e) {
        const double p = s_dst[v * heads + h] + s_src[graph.source(e) * heads + h];
        pre[h * ne + e] = p;
        logits[e - b] = kernels::leaky(p, slope);
      }
      double* om = omega.data() + h * ne + b;
      kernels::softmax(logits, std::span<double>(om, deg));
      double* ov = out.values().data() + v * width + h * dh;
      for (std::size_t e = b; e < b + deg; ++e) {
        const double w = om[e - b];
        const double* yu = y.values().data() + graph.source(e) * width + h * dh;
        for (std::size_t c = 0; c < dh; ++c) ov[c] += w * yu[c];
      }
    }
  }
  if (omega_out) *omega_out = omega;

  const AttentionGraph* gp = &graph;
  return g.record(std::move(out), {projected, alpha},
                  [projected, alpha, gp, heads, slope, dh, width, pre = std::move(pre), omega = std::move(omega)](
                      Graph& g, const Tensor& dout) {
                    const AttentionGraph& graph = *gp;
                    const std::size_t n = graph.nodes(), ne = graph.edges();
                    const Tensor& y = g.value(projected);
                    const Tensor& a = g.value(alpha);
                    std::vector<double> dy(n * width, 0.0);
                    std::vector<double> ds_dst(n * heads, 0.0), ds_src(n * heads, 0.0);
                    std::vector<double> domega;
                    for (std::size_t h = 0; h < heads; ++h) {
                      for (std::size_t v = 0; v < n; ++v) {
                        const std::size_t b = graph.begin(v), deg = graph.degree(v);
                        const double* dv = dout.values().data() + v * width + h * dh;
                        const double* om = omega.data() + h * ne + b;
                        domega.assign(deg, 0.0);
                        double dot = 0.0;
                        for (std::size_t k = 0; k < deg; ++k) {
                          const std::size_t u = graph.source(b + k);
                          const double* yu = y.values().data() + u * width + h * dh;
                          double s = 0.0;
                          for (std::size_t c = 0; c < dh; ++c) s += dv[c] * yu[c];
                          domega[k] = s;
                          dot += om[k] * s;
                          double* dyu = dy.data() + u * width + h * dh;
                          for (std::size_t c = 0; c < dh; ++c) dyu[c] += om[k] * dv[c];
                        }
                        for (std::size_t k = 0; k < deg; ++k) {
                          const std::size_t u = graph.source(b + k);
                          const double dpre =
                              om[k] * (domega[k] - dot) * kernels::leaky_grad(pre[h * ne + b + k], slope);
                          ds_dst[v * heads + h] += dpre;
                          ds_src[u * heads + h] += dpre;
                        }
                      }
                    }
                    const bool need_y = g.needs_grad(projected);
                    const bool need_a = g.needs_grad(alpha);
                    Tensor* da = need_a ? &g.adjoint(alpha) : nullptr;
                    for (std::size_t v = 0; v < n; ++v) {
                      for (std::size_t h = 0; h < heads; ++h) {
                        const double* ah = a.values().data() + h * 2 * dh;
                        const double* yv = y.values().data() + v * width + h * dh;
                        double* dyv = dy.data() + v * width + h * dh;
                        const double sd = ds_dst[v * heads + h], ss = ds_src[v * heads + h];
                        for (std::size_t c = 0; c < dh; ++c) dyv[c] += sd * ah[c] + ss * ah[dh + c];
                        if (da) {
                          double* dah = da->values().data() + h * 2 * dh;
                          for (std::size_t c = 0; c < dh; ++c) {
                            dah[c] += sd * yv[c];
                            dah[dh + c] += ss * yv[c];
                          }
                        }
                      }
                    }
                    if (need_y) {
                      auto dp = g.adjoint(projected).values();
                      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += dy[i];
                    }
                  });
}

Var propagate_layer(Var z, const AttentionGraph& graph, const GatLayerVars& layer, std::size_t heads, double slope,
                    std::vector<double>* omega) {
  return leaky_relu(attention_aggregate(matmul(z, layer.w), layer.alpha, graph, heads, slope, omega), slope);
}

GlobalEncoding encode_global(Var y, const AttentionGraph& graph, const std::vector<GatLayerVars>& layers,
                             std::size_t heads, double slope, bool include_input) {
  if (layers.empty()) throw ValidationError("graph attention needs at least one layer");
  GlobalEncoding enc;
  Var cur = y;
  for (const auto& layer : layers) {
    std::vector<double> omega;
    cur = propagate_layer(cur, graph, layer, heads, slope, &omega);
    enc.layers.push_back(cur);
    enc.omega.push_back(std::move(omega));
  }
  enc.z = include_input ? y : enc.layers.front();
  for (std::size_t l = include_input ? 0 : 1; l < enc.layers.size(); ++l) enc.z = add(enc.z, enc.layers[l]);
  return enc;
}

Tensor head_mean_scores(const std::vector<double>& omega, const AttentionGraph& graph, std::size_t heads) {
  const std::size_t n = graph.nodes(), ne = graph.edges();
  if (omega.size() != heads * ne) throw ValidationError("omega size does not match graph and head count");
  Tensor scores({n, n});
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t e = graph.begin(v); e < graph.end(v); ++e) {
      double s = 0.0;
      for (std::size_t h = 0; h < heads; ++h) s += omega[h * ne + e];
      scores.at(v, graph.source(e)) = s / static_cast<double>(heads);
    }
  }
  return scores;
}

void write_attention_edges(const std::string& path, const AttentionGraph& graph,
                           const std::vector<std::vector<double>>& omega_per_layer, std::size_t heads) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t ne = graph.edges();
  for (std::size_t l = 0; l < omega_per_layer.size(); ++l) {
    for (std::size_t h = 0; h < heads; ++h) {
      os << "# layer " << l << " head " << h << '\n';
      for (std::size_t v = 0; v < graph.nodes(); ++v) {
        for (std::size_t e = graph.begin(v); e < graph.end(v); ++e) {
          os << graph.source(e) << ',' << v << ',' << omega_per_layer[l][h * ne + e] << '\n';
        }
      }
    }
  }
  io::write_file_atomic(path, os.str());
}

}  // namespace stgdn
