#pragma once

// Spatial relation graph and bidirectional diffusion convolution, plus the
// gated fusion of per-resolution outputs.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stgdn/autodiff.hpp"
#include "stgdn/grid_data.hpp"

namespace stgdn {

struct WeightedEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double weight = 0.0;
};

// Row-compressed sparse matrix; row r holds cols[begin(r)..end(r)).
struct SparseMatrix {
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> cols;
  std::vector<double> values;

  std::size_t begin(std::size_t r) const { return offsets[r]; }
  std::size_t end(std::size_t r) const { return offsets[r + 1]; }
  Tensor dense() const;
  // out[r] = sum_c M[r, c] x[c]  (x: [n x w])
  void apply(const double* x, double* out, std::size_t width) const;
  // out[c] += sum_r M[r, c] x[r]
  void apply_transpose_add(const double* x, double* out, std::size_t width) const;
};

// Weighted adjacency A (A[u, v] = weight of edge u -> v) with the forward
// transition D_o^-1 A and backward transition D_i^-1 A^T. Zero-degree rows
// stay zero and are listed.
class SpatialGraph {
 public:
  SpatialGraph() = default;
  SpatialGraph(std::size_t nodes, std::vector<WeightedEdge> edges);

  std::size_t nodes() const { return nodes_; }
  const std::vector<WeightedEdge>& edges() const { return edges_; }
  const SparseMatrix& forward() const { return forward_; }
  const SparseMatrix& backward() const { return backward_; }
  const std::vector<std::size_t>& zero_out_degree() const { return zero_out_; }
  const std::vector<std::size_t>& zero_in_degree() const { return zero_in_; }
  Tensor adjacency() const;

 private:
  std::size_t nodes_ = 0;
  std::vector<WeightedEdge> edges_;
  SparseMatrix forward_;
  SparseMatrix backward_;
  std::vector<std::size_t> zero_out_;
  std::vector<std::size_t> zero_in_;
};

struct SpatialGraphOptions {
  std::size_t k_nbr = 9;        // geographic block size, a perfect square
  std::size_t m_dep = 4;        // attention partners per region
  double length_scale = 1.0;    // Gaussian kernel width in cells
  double dependency_floor = 0.1;
};

// Geographic sqrt(k_nbr) x sqrt(k_nbr) block around each region (clipped,
// self included) plus each region's m_dep highest-scoring partners in
// `omega_scores` ([dst x src], may be empty when m_dep is 0). A[u, v] =
// exp(-dist^2 / length_scale^2); dependency edges are floored.
SpatialGraph build_spatial_graph(const RegionGrid& grid, const Tensor& omega_scores, const SpatialGraphOptions& options);

std::vector<WeightedEdge> read_spatial_edges(const std::string& path);
void write_spatial_edges(const std::string& path, const SpatialGraph& graph);

// Pre-activation of the diffusion layer. z: [regions x d], theta: [Q x d x K x 2].
// out[:, q] = sum_{d', k} (theta[q,d',k,0] P_f^k + theta[q,d',k,1] P_b^k) z[:, d'].
Var diffusion_mix(Var z, Var theta, const SpatialGraph& graph);
// LeakyReLU(diffusion_mix(...)).
Var diffusion_conv(Var z, Var theta, const SpatialGraph& graph, double slope);

// sum_p gate_p o lambda_p over the enabled resolutions.
Var gated_fusion(std::span<const Var> lambdas, std::span<const Var> gates);

}  // namespace stgdn
