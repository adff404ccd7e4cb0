#include "stgdn/graph_diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "stgdn/io.hpp"
#include "stgdn/kernels.hpp"

namespace stgdn {

// ---- SparseMatrix --------------------------------------------------------

Tensor SparseMatrix::dense() const {
  Tensor m({n, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t e = begin(r); e < end(r); ++e) m.at(r, cols[e]) += values[e];
  return m;
}

void SparseMatrix::apply(const double* x, double* out, std::size_t width) const {
  for (std::size_t r = 0; r < n; ++r) {
    double* o = out + r * width;
    std::fill(o, o + width, 0.0);
    for (std::size_t e = begin(r); e < end(r); ++e) {
      const double w = values[e];
      const double* xc = x + cols[e] * width;
      for (std::size_t c = 0; c < width; ++c) o[c] += w * xc[c];
    }
  }
}

void SparseMatrix::apply_transpose_add(const double* x, double* out, std::size_t width) const {
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x + r * width;
    for (std::size_t e = begin(r); e < end(r); ++e) {
      const double w = values[e];
      double* o = out + cols[e] * width;
      for (std::size_t c = 0; c < width; ++c) o[c] += w * xr[c];
    }
  }
}

namespace {

// Row-normalised CSR of the given (row, col, weight) triples.
SparseMatrix row_normalized(std::size_t n, std::vector<WeightedEdge> triples, std::vector<std::size_t>& zero_rows) {
  std::sort(triples.begin(), triples.end(),
            [](const WeightedEdge& a, const WeightedEdge& b) { return a.src != b.src ? a.src < b.src : a.dst < b.dst; });
  SparseMatrix m;
  m.n = n;
  m.offsets.assign(n + 1, 0);
  for (const auto& t : triples) ++m.offsets[t.src + 1];
  for (std::size_t r = 0; r < n; ++r) m.offsets[r + 1] += m.offsets[r];
  for (const auto& t : triples) {
    m.cols.push_back(t.dst);
    m.values.push_back(t.weight);
  }
  zero_rows.clear();
  for (std::size_t r = 0; r < n; ++r) {
    double deg = 0.0;
    for (std::size_t e = m.begin(r); e < m.end(r); ++e) deg += m.values[e];
    if (deg > 0.0) {
      for (std::size_t e = m.begin(r); e < m.end(r); ++e) m.values[e] /= deg;
    } else {
      zero_rows.push_back(r);
    }
  }
  return m;
}

}  // namespace

// ---- SpatialGraph --------------------------------------------------------

SpatialGraph::SpatialGraph(std::size_t nodes, std::vector<WeightedEdge> edges) : nodes_(nodes) {
  std::map<std::pair<std::size_t, std::size_t>, double> merged;
  for (const auto& e : edges) {
    if (e.src >= nodes || e.dst >= nodes) {
      throw ValidationError("spatial edge " + std::to_string(e.src) + " -> " + std::to_string(e.dst) + " outside " +
                            std::to_string(nodes) + " nodes");
    }
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) throw ValidationError("spatial edge weights must be finite and >= 0");
    merged[{e.src, e.dst}] = std::max(merged[{e.src, e.dst}], e.weight);
  }
  for (const auto& [k, w] : merged) edges_.push_back({k.first, k.second, w});

  std::vector<WeightedEdge> transposed;
  transposed.reserve(edges_.size());
  for (const auto& e : edges_) transposed.push_back({e.dst, e.src, e.weight});
  forward_ = row_normalized(nodes, edges_, zero_out_);
  backward_ = row_normalized(nodes, std::move(transposed), zero_in_);
}

Tensor SpatialGraph::adjacency() const {
  Tensor a({nodes_, nodes_});
  for (const auto& e : edges_) a.at(e.src, e.dst) = e.weight;
  return a;
}

SpatialGraph build_spatial_graph(const RegionGrid& grid, const Tensor& omega_scores, const SpatialGraphOptions& options) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(options.k_nbr))));
  if (options.k_nbr == 0 || side * side != options.k_nbr) {
    throw ValidationError("k_nbr must be a perfect square, got " + std::to_string(options.k_nbr));
  }
  if (!(options.length_scale > 0.0)) throw ValidationError("length_scale must be positive");
  const std::size_t n = grid.size();
  if (options.m_dep > 0) {
    if (omega_scores.rank() != 2 || omega_scores.rows() != n || omega_scores.cols() != n) {
      throw ValidationError("dependency scores must be [" + std::to_string(n) + " x " + std::to_string(n) + "], got " +
                            omega_scores.shape_str());
    }
    if (options.m_dep >= n) throw ValidationError("m_dep must be smaller than the region count");
  }

  const double ls2 = options.length_scale * options.length_scale;
  auto kernel = [&](std::size_t u, std::size_t v) {
    const auto [ui, uj] = grid.cell(u);
    const auto [vi, vj] = grid.cell(v);
    const double di = static_cast<double>(ui) - static_cast<double>(vi);
    const double dj = static_cast<double>(uj) - static_cast<double>(vj);
    return std::exp(-(di * di + dj * dj) / ls2);
  };

  std::vector<WeightedEdge> edges;
  const std::ptrdiff_t lo = -static_cast<std::ptrdiff_t>((side - 1) / 2);
  const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(side / 2);
  for (std::size_t u = 0; u < n; ++u) {
    const auto [i, j] = grid.cell(u);
    for (std::ptrdiff_t di = lo; di <= hi; ++di) {
      for (std::ptrdiff_t dj = lo; dj <= hi; ++dj) {
        const std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(i) + di, nj = static_cast<std::ptrdiff_t>(j) + dj;
        if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(grid.rows()) ||
            nj >= static_cast<std::ptrdiff_t>(grid.cols())) {
          continue;
        }
        const std::size_t v = grid.flat(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj));
        edges.push_back({u, v, kernel(u, v)});
      }
    }
  }
  if (options.m_dep > 0) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t v = 0; v < n; ++v) {
      cand.clear();
      for (std::size_t u = 0; u < n; ++u) {
        if (u != v) cand.emplace_back(omega_scores.at(v, u), u);
      }
      std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      for (std::size_t k = 0; k < options.m_dep; ++k) {
        const std::size_t u = cand[k].second;
        // v gathers from u along the forward transition.
        edges.push_back({v, u, std::max(kernel(v, u), options.dependency_floor)});
      }
    }
  }
  return SpatialGraph(n, std::move(edges));
}

std::vector<WeightedEdge> read_spatial_edges(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open spatial edge file '" + path + "'");
  std::vector<WeightedEdge> edges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = io::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto f = io::split(t, ',');
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 3) throw ValidationError(where + ": expected src,dst,weight");
    const auto s = io::parse_int(f[0], where + " src");
    const auto d = io::parse_int(f[1], where + " dst");
    if (s < 0 || d < 0) throw ValidationError(where + ": negative node id");
    edges.push_back({static_cast<std::size_t>(s), static_cast<std::size_t>(d), io::parse_double(f[2], where + " weight")});
  }
  return edges;
}

void write_spatial_edges(const std::string& path, const SpatialGraph& graph) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& e : graph.edges()) os << e.src << ',' << e.dst << ',' << e.weight << '\n';
  io::write_file_atomic(path, os.str());
}

// ---- diffusion -----------------------------------------------------------

Var diffusion_mix(Var z, Var theta, const SpatialGraph& graph) {
  Graph& g = *z.graph();
  const Tensor& zv = z.value();
  const Tensor& th = theta.value();
  const std::size_t n = graph.nodes();
  if (zv.rank() != 2 || zv.rows() != n) {
    throw ValidationError("diffusion input " + zv.shape_str() + " does not match " + std::to_string(n) + " nodes");
  }
  const std::size_t d = zv.cols();
  if (th.rank() != 4 || th.dim(1) != d || th.dim(3) != 2 || th.dim(2) == 0) {
    throw ValidationError("diffusion kernel " + th.shape_str() + " incompatible with input width " + std::to_string(d));
  }
  const std::size_t q = th.dim(0), k_diff = th.dim(2);

  // states[(k * 2 + dir)] = P_dir^k z, each [n x d].
  std::vector<std::vector<double>> states(2 * k_diff);
  for (std::size_t dir = 0; dir < 2; ++dir) {
    const SparseMatrix& p = dir == 0 ? graph.forward() : graph.backward();
    states[dir].assign(zv.values().begin(), zv.values().end());
    for (std::size_t k = 1; k < k_diff; ++k) {
      states[k * 2 + dir].resize(n * d);
      p.apply(states[(k - 1) * 2 + dir].data(), states[k * 2 + dir].data(), d);
    }
  }
  // Theta slice (k, dir) as a [d x q] matrix.
  auto slice = [q, d, k_diff](const Tensor& th, std::size_t k, std::size_t dir) {
    std::vector<double> m(d * q);
    for (std::size_t qq = 0; qq < q; ++qq)
      for (std::size_t dd = 0; dd < d; ++dd) m[dd * q + qq] = th[((qq * d + dd) * k_diff + k) * 2 + dir];
    return m;
  };
  Tensor out({n, q});
  for (std::size_t k = 0; k < k_diff; ++k) {
    for (std::size_t dir = 0; dir < 2; ++dir) {
      const auto m = slice(th, k, dir);
      kernels::gemm_nn(states[k * 2 + dir].data(), m.data(), out.values().data(), n, d, q);
    }
  }

  const SpatialGraph* gp = &graph;
  return g.record(std::move(out), {z, theta},
                  [z, theta, gp, n, d, q, k_diff, slice, states = std::move(states)](Graph& g, const Tensor& dout) {
                    if (g.needs_grad(theta)) {
                      Tensor& dth = g.adjoint(theta);
                      for (std::size_t k = 0; k < k_diff; ++k) {
                        for (std::size_t dir = 0; dir < 2; ++dir) {
                          std::vector<double> dm(d * q, 0.0);  // [d x q]
                          kernels::gemm_tn(states[k * 2 + dir].data(), dout.values().data(), dm.data(), n, d, q);
                          for (std::size_t qq = 0; qq < q; ++qq)
                            for (std::size_t dd = 0; dd < d; ++dd)
                              dth[((qq * d + dd) * k_diff + k) * 2 + dir] += dm[dd * q + qq];
                        }
                      }
                    }
                    if (g.needs_grad(z)) {
                      // dz = sum_k (P^T)^k ds_k, evaluated Horner-style per direction.
                      auto dz = g.adjoint(z).values();
                      for (std::size_t dir = 0; dir < 2; ++dir) {
                        const SparseMatrix& p = dir == 0 ? gp->forward() : gp->backward();
                        std::vector<double> acc(n * d, 0.0), next(n * d);
                        for (std::size_t k = k_diff; k-- > 0;) {
                          if (k + 1 < k_diff) {
                            std::fill(next.begin(), next.end(), 0.0);
                            p.apply_transpose_add(acc.data(), next.data(), d);
                            acc.swap(next);
                          }
                          const auto m = slice(theta.value(), k, dir);
                          kernels::gemm_nt(dout.values().data(), m.data(), acc.data(), n, q, d);
                        }
                        for (std::size_t i = 0; i < acc.size(); ++i) dz[i] += acc[i];
                      }
                    }
                  });
}

Var diffusion_conv(Var z, Var theta, const SpatialGraph& graph, double slope) {
  return leaky_relu(diffusion_mix(z, theta, graph), slope);
}

Var gated_fusion(std::span<const Var> lambdas, std::span<const Var> gates) {
  if (lambdas.empty() || lambdas.size() != gates.size()) {
    throw ValidationError("gated fusion needs one gate per enabled resolution");
  }
  Var acc;
  for (std::size_t p = 0; p < lambdas.size(); ++p) {
    if (lambdas[p].shape() != lambdas[0].shape()) {
      throw ValidationError("gated fusion: shape mismatch " + lambdas[0].value().shape_str() + " vs " +
                            lambdas[p].value().shape_str());
    }
    Var term = mul_elem(gates[p], lambdas[p]);
    acc = p == 0 ? term : add(acc, term);
  }
  return acc;
}

}  // namespace stgdn
