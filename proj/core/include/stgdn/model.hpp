#pragma once

// The composed forecaster: per-resolution temporal encoding, global attentive
// propagation and spatial diffusion, gated fusion, external factors and the
// prediction head. Ablations switch stages off.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stgdn/autodiff.hpp"
#include "stgdn/graph_attention.hpp"
#include "stgdn/graph_diffusion.hpp"
#include "stgdn/grid_data.hpp"
#include "stgdn/predictor.hpp"
#include "stgdn/temporal_encoder.hpp"

namespace stgdn {

struct ModelConfig {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<ResolutionSpec> resolutions = {{Resolution::hour, 3}, {Resolution::day, 2}, {Resolution::week, 1}};
  std::size_t d = 64;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t k_nbr = 9;
  std::size_t k_diff = 3;
  std::size_t q_out = 32;
  std::size_t d_e = 8;
  std::size_t head_hidden = 32;
  std::size_t m_dep = 4;
  double slope = 0.2;
  double length_scale = 1.0;
  Pooling pooling = Pooling::last;
  AttentionGraphPolicy edge_policy;
  bool use_graph_attention = true;
  bool use_diffusion = true;
  bool use_externals = true;
  bool include_input = true;
  NormScheme scheme = NormScheme::minmax;
  std::size_t omega_sample = 16;

  void validate() const;
  // Stable text form of every field that shapes the parameters or forward.
  std::string canonical() const;
  std::uint64_t digest() const;
};

// Parameter names and shapes the configuration requires, in order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

// Glorot-uniform matrices, zero biases, all-one gates.
ParamSet init_parameters(const ModelConfig& config, std::uint64_t seed);

// Throws ValidationError naming every parameter whose presence or shape
// differs, with both shapes.
void check_parameters(const ModelConfig& config, const ParamSet& params);

struct ForwardTrace {
  std::vector<TemporalEncoding> temporal;  // per resolution
  std::vector<GlobalEncoding> global;      // per resolution, empty under -g
  std::vector<Var> lambdas;                // per resolution
};

class Model {
 public:
  // `profiles` feeds the knn edge policy and may be empty otherwise.
  Model(ModelConfig config, const Tensor& profiles);

  const ModelConfig& config() const { return config_; }
  const AttentionGraph& attention_graph() const { return attention_; }
  const SpatialGraph& spatial_graph() const { return spatial_; }
  // Pins a user-supplied spatial graph; later refreshes leave it alone.
  void set_spatial_graph(SpatialGraph graph);
  bool spatial_graph_pinned() const { return pinned_; }

  // Normalized prediction [regions x 2] for one example.
  Var forward(Graph& g, const Bindings& params, const TrainingExample& example, ForwardTrace* trace = nullptr) const;

  Tensor predict(const ParamSet& params, const TrainingExample& example) const;
  // Joint loss of one example; fills `grads` (shaped like params) when given.
  double loss(const ParamSet& params, const TrainingExample& example, double lambda, ParamSet* grads = nullptr) const;

  // Head-mean final-layer attention scores [dst x src], averaged over the
  // enabled resolutions and the first omega_sample examples.
  Tensor dependency_scores(const ParamSet& params, std::span<const TrainingExample> sample) const;
  // Rebuilds the spatial graph from the current attention. Without graph
  // attention only the geographic block is used. No-op once pinned.
  void refresh_spatial_graph(const ParamSet& params, std::span<const TrainingExample> sample);

 private:
  ModelConfig config_;
  RegionGrid grid_;
  AttentionGraph attention_;
  SpatialGraph spatial_;
  bool pinned_ = false;
};

}  // namespace stgdn
