#pragma once

// Multi-head attentive message passing over the region graph with L-layer
// high-order propagation and a layer-sum readout.

#include <cstddef>
#include <string>
#include <vector>

#include "stgdn/autodiff.hpp"
#include "stgdn/grid_data.hpp"

namespace stgdn {

enum class EdgePolicy { automatic, full, knn };

struct AttentionGraphPolicy {
  EdgePolicy kind = EdgePolicy::automatic;
  std::size_t m = 8;  // neighbours per node under knn
};

std::string format_policy(const AttentionGraphPolicy& p);
AttentionGraphPolicy parse_policy(std::string_view s);  // "auto", "full", "knn:8"
// automatic -> full up to 16x16 regions, knn(8) above.
AttentionGraphPolicy resolve_policy(const AttentionGraphPolicy& p, std::size_t regions);

// In-neighbour lists in CSR form: the sources feeding destination v are
// sources[offsets[v] .. offsets[v+1]).
class AttentionGraph {
 public:
  AttentionGraph() = default;
  // Lists are used in the given order; an empty list becomes a self-loop and
  // duplicate entries are rejected.
  explicit AttentionGraph(const std::vector<std::vector<std::size_t>>& in_neighbors);

  std::size_t nodes() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t edges() const { return sources_.size(); }
  std::size_t begin(std::size_t v) const { return offsets_[v]; }
  std::size_t end(std::size_t v) const { return offsets_[v + 1]; }
  std::size_t source(std::size_t e) const { return sources_[e]; }
  std::size_t degree(std::size_t v) const { return end(v) - begin(v); }
  std::vector<std::size_t> neighbors(std::size_t v) const;

 private:
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> sources_;
};

// full: every ordered pair incl. self-loops. knn(m): each node's m most
// cosine-similar other nodes (mean-centred profiles, ties to the lower id)
// plus itself; `profiles` required.
AttentionGraph build_attention_graph(std::size_t regions, const AttentionGraphPolicy& policy,
                                     const Tensor* profiles = nullptr);

// omega per edge (CSR order) for one head: softmax over each destination's
// in-neighbours of LeakyReLU(alpha^T [y_dst || y_src]). `projected` is
// [regions x d_h], alpha has 2*d_h entries.
std::vector<double> attention_coefficients(const Tensor& projected, const AttentionGraph& graph, const Tensor& alpha,
                                           double slope);

// Fused multi-head attention + aggregation. `projected` is [regions x H*d_h]
// (head h owns columns h*d_h..), `alpha` is [H x 2*d_h]. Returns the
// concatenated messages [regions x H*d_h] before the nonlinearity. When
// `omega` is given it receives H*edges coefficients, head-major.
Var attention_aggregate(Var projected, Var alpha, const AttentionGraph& graph, std::size_t heads, double slope,
                        std::vector<double>* omega = nullptr);

struct GatLayerVars {
  Var w;      // [d x d], heads' projections side by side
  Var alpha;  // [H x 2*d/H]
};

// LeakyReLU(concat_h sum_u omega^h_{v,u} z_u W^h).
Var propagate_layer(Var z, const AttentionGraph& graph, const GatLayerVars& layer, std::size_t heads, double slope,
                    std::vector<double>* omega = nullptr);

struct GlobalEncoding {
  Var z;                                   // [regions x d]
  std::vector<Var> layers;                 // each layer's output
  std::vector<std::vector<double>> omega;  // per layer, H*edges
};

// Runs the layers from y and sums every layer's output. With
// `include_input`, y itself joins the sum as layer 0.
GlobalEncoding encode_global(Var y, const AttentionGraph& graph, const std::vector<GatLayerVars>& layers,
                             std::size_t heads, double slope, bool include_input = false);

// Mean over heads of one layer's coefficients as a dense [dst x src] matrix.
Tensor head_mean_scores(const std::vector<double>& omega, const AttentionGraph& graph, std::size_t heads);

// "src,dst,omega" lines, one block per head, preceded by "# layer L head H".
void write_attention_edges(const std::string& path, const AttentionGraph& graph,
                           const std::vector<std::vector<double>>& omega_per_layer, std::size_t heads);

}  // namespace stgdn
