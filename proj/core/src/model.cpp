#include "stgdn/model.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "stgdn/io.hpp"

namespace stgdn {

namespace {

enum class Init { glorot, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

ParamSpec matrix(std::string name, std::size_t r, std::size_t c) { return {std::move(name), {r, c}, Init::glorot, r, c}; }

std::vector<ParamSpec> layout(const ModelConfig& c) {
  const std::size_t regions = c.rows * c.cols;
  std::vector<ParamSpec> specs;
  for (const auto& res : c.resolutions) {
    const std::string p(to_string(res.resolution));
    specs.push_back(matrix(p + ".lift_in", 1, c.d));
    specs.push_back(matrix(p + ".lift_out", 1, c.d));
    specs.push_back(matrix(p + ".wq", c.d, c.d));
    specs.push_back(matrix(p + ".wk", c.d, c.d));
    specs.push_back(matrix(p + ".wv", c.d, c.d));
    if (c.use_graph_attention) {
      const std::size_t dh = c.d / c.heads;
      for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string gp = p + ".gat" + std::to_string(l);
        specs.push_back(matrix(gp + ".w", c.d, c.d));
        specs.push_back({gp + ".alpha", {c.heads, 2 * dh}, Init::glorot, 2 * dh, 1});
      }
    }
    if (c.use_diffusion) {
      specs.push_back({p + ".theta", {c.q_out, c.d, c.k_diff, 2}, Init::glorot, c.d * c.k_diff * 2, c.q_out});
    } else {
      specs.push_back(matrix(p + ".proj", c.d, c.q_out));
    }
    specs.push_back({p + ".gate", {regions, c.q_out}, Init::ones});
  }
  if (c.use_externals) {
    specs.push_back(matrix("ext.embedding", weather_vocabulary().size() + 1, c.d_e));
    specs.push_back(matrix("ext.w1", c.d_e + kExternalScalars, c.d_e));
    specs.push_back({"ext.b1", {1, c.d_e}, Init::zeros});
    specs.push_back(matrix("ext.w2", c.d_e, c.d_e));
    specs.push_back({"ext.b2", {1, c.d_e}, Init::zeros});
  }
  const std::size_t head_in = c.q_out + (c.use_externals ? c.d_e : 0);
  specs.push_back(matrix("head.w1", head_in, c.head_hidden));
  specs.push_back({"head.b1", {1, c.head_hidden}, Init::zeros});
  specs.push_back(matrix("head.w2", c.head_hidden, c.head_hidden));
  specs.push_back({"head.b2", {1, c.head_hidden}, Init::zeros});
  specs.push_back(matrix("head.w3", c.head_hidden, 2));
  specs.push_back({"head.b3", {1, 2}, Init::zeros});
  return specs;
}

std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError(key + ": " + why); };
  if (rows == 0 || cols == 0) fail("grid", "rows and cols must be positive");
  if (resolutions.empty()) fail("resolutions", "at least one resolution must be enabled");
  validate_resolutions(resolutions);
  if (d == 0) fail("d", "must be positive");
  if (heads == 0 || d % heads != 0) fail("heads", "must divide d (" + std::to_string(d) + ")");
  if (layers == 0) fail("layers", "must be at least 1");
  if (k_diff == 0) fail("k_diff", "must be at least 1");
  if (q_out == 0) fail("q_out", "must be positive");
  if (use_externals && d_e == 0) fail("d_e", "must be positive");
  if (head_hidden == 0) fail("head_hidden", "must be positive");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k_nbr))));
  if (k_nbr == 0 || side * side != k_nbr) fail("k_nbr", "must be a perfect square, got " + std::to_string(k_nbr));
  if (!(slope > 0.0 && slope < 1.0)) fail("slope", "must lie in (0, 1)");
  if (!(length_scale > 0.0)) fail("length_scale", "must be positive");
  if (use_graph_attention && use_diffusion && m_dep >= rows * cols) fail("m_dep", "must be smaller than the region count");
  if (omega_sample == 0) fail("omega_sample", "must be positive");
  if (edge_policy.kind == EdgePolicy::knn && edge_policy.m >= rows * cols) {
    fail("edge_policy", "knn neighbour count must be smaller than the region count");
  }
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "rows=" << rows << ";cols=" << cols << ";resolutions=" << format_resolutions(resolutions) << ";d=" << d
     << ";layers=" << layers << ";heads=" << heads << ";k_nbr=" << k_nbr << ";k_diff=" << k_diff << ";q_out=" << q_out
     << ";d_e=" << d_e << ";head_hidden=" << head_hidden << ";m_dep=" << m_dep << ";slope=" << fmt_double(slope)
     << ";length_scale=" << fmt_double(length_scale) << ";pooling=" << to_string(pooling)
     << ";edge_policy=" << format_policy(edge_policy) << ";graph_attention=" << use_graph_attention
     << ";diffusion=" << use_diffusion << ";externals=" << use_externals << ";include_input=" << include_input
     << ";norm=" << to_string(scheme) << ";omega_sample=" << omega_sample;
  return os.str();
}

std::uint64_t ModelConfig::digest() const { return io::fnv1a(canonical()); }

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : layout(config)) out.emplace_back(std::move(s.name), std::move(s.shape));
  return out;
}

ParamSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamSet params;
  for (const auto& spec : layout(config)) {
    Tensor t(spec.shape);
    if (spec.init == Init::ones) {
      t.fill(1.0);
    } else if (spec.init == Init::glorot) {
      const double a = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& x : t.values()) x = u(rng);
    }
    params.add(spec.name, std::move(t));
  }
  return params;
}

void check_parameters(const ModelConfig& config, const ParamSet& params) {
  std::vector<std::string> problems;
  const auto expected = parameter_layout(config);
  for (const auto& [name, shape] : expected) {
    if (!params.contains(name)) {
      problems.push_back(name + ": expected " + shape_to_string(shape) + ", missing");
    } else if (params.get(name).shape() != shape) {
      problems.push_back(name + ": expected " + shape_to_string(shape) + ", found " + params.get(name).shape_str());
    }
  }
  if (params.size() != expected.size() && problems.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      bool known = false;
      for (const auto& e : expected) known = known || e.first == params.name(i);
      if (!known) problems.push_back(params.name(i) + ": unexpected " + params.at(i).shape_str());
    }
  }
  if (problems.empty()) return;
  std::string msg = "parameter shape mismatch:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ValidationError(msg);
}

// ---- Model ---------------------------------------------------------------

Model::Model(ModelConfig config, const Tensor& profiles) : config_(std::move(config)), grid_(1, 1) {
  config_.validate();
  grid_ = RegionGrid(config_.rows, config_.cols);
  const std::size_t regions = grid_.size();
  if (config_.use_graph_attention) {
    const auto policy = resolve_policy(config_.edge_policy, regions);
    attention_ = build_attention_graph(regions, policy, profiles.size() == 0 ? nullptr : &profiles);
  }
  if (config_.use_diffusion) {
    SpatialGraphOptions opt{config_.k_nbr, 0, config_.length_scale};
    spatial_ = build_spatial_graph(grid_, Tensor(), opt);
  }
}

void Model::set_spatial_graph(SpatialGraph graph) {
  if (graph.nodes() != grid_.size()) {
    throw ValidationError("spatial graph has " + std::to_string(graph.nodes()) + " nodes, model expects " +
                          std::to_string(grid_.size()));
  }
  spatial_ = std::move(graph);
  pinned_ = true;
}

Var Model::forward(Graph& g, const Bindings& b, const TrainingExample& example, ForwardTrace* trace) const {
  const auto& c = config_;
  if (example.windows.size() != c.resolutions.size()) {
    throw ValidationError("example carries " + std::to_string(example.windows.size()) + " resolutions, model expects " +
                          std::to_string(c.resolutions.size()));
  }
  std::vector<Var> lambdas, gates;
  for (std::size_t k = 0; k < c.resolutions.size(); ++k) {
    const std::string p(to_string(c.resolutions[k].resolution));
    const auto& win = example.windows[k];
    if (win.inflow.rank() != 2 || win.inflow.rows() != grid_.size() || win.inflow.cols() != c.resolutions[k].length) {
      throw ValidationError(p + " window " + win.inflow.shape_str() + " does not match " + std::to_string(grid_.size()) +
                            " regions x " + std::to_string(c.resolutions[k].length) + " steps");
    }
    TemporalVars tv{b[p + ".lift_in"], b[p + ".lift_out"], b[p + ".wq"], b[p + ".wk"], b[p + ".wv"]};
    TemporalEncoding te = encode_temporal(g.constant(win.inflow), g.constant(win.outflow), tv, c.pooling);
    Var z = te.pooled;
    if (c.use_graph_attention) {
      std::vector<GatLayerVars> layers;
      for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string gp = p + ".gat" + std::to_string(l);
        layers.push_back({b[gp + ".w"], b[gp + ".alpha"]});
      }
      GlobalEncoding ge = encode_global(z, attention_, layers, c.heads, c.slope, c.include_input);
      z = ge.z;
      if (trace) trace->global.push_back(std::move(ge));
    }
    Var lam = c.use_diffusion ? diffusion_conv(z, b[p + ".theta"], spatial_, c.slope)
                              : leaky_relu(matmul(z, b[p + ".proj"]), c.slope);
    if (trace) {
      trace->temporal.push_back(te);
      trace->lambdas.push_back(lam);
    }
    lambdas.push_back(lam);
    gates.push_back(b[p + ".gate"]);
  }
  Var fused = gated_fusion(lambdas, gates);
  Var ext;
  if (c.use_externals) {
    ExternalVars ev{b["ext.embedding"], b["ext.w1"], b["ext.b1"], b["ext.w2"], b["ext.b2"]};
    ext = encode_externals(g, example.features, ev, c.slope);
  }
  HeadVars hv{b["head.w1"], b["head.b1"], b["head.w2"], b["head.b2"], b["head.w3"], b["head.b3"]};
  return predict_head(fused, ext, hv, c.slope, c.scheme == NormScheme::minmax);
}

Tensor Model::predict(const ParamSet& params, const TrainingExample& example) const {
  Graph g;
  Bindings b(g, params, false);
  return forward(g, b, example).value();
}

double Model::loss(const ParamSet& params, const TrainingExample& example, double lambda, ParamSet* grads) const {
  Graph g;
  Bindings b(g, params, grads != nullptr);
  Var l = joint_loss(forward(g, b, example), example.truth, lambda);
  if (grads) {
    g.backward(l);
    *grads = b.gradients(g, params);
  }
  return l.value().item();
}

Tensor Model::dependency_scores(const ParamSet& params, std::span<const TrainingExample> sample) const {
  if (!config_.use_graph_attention) throw ValidationError("dependency scores need graph attention");
  const std::size_t n = std::min(sample.size(), config_.omega_sample);
  if (n == 0) throw ValidationError("dependency scores need at least one example");
  const std::size_t regions = grid_.size();
  Tensor acc({regions, regions});
  for (std::size_t i = 0; i < n; ++i) {
    Graph g;
    Bindings b(g, params, false);
    ForwardTrace trace;
    forward(g, b, sample[i], &trace);
    for (const auto& ge : trace.global) {
      const Tensor s = head_mean_scores(ge.omega.back(), attention_, config_.heads);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += s[k];
    }
  }
  const double denom = static_cast<double>(n * config_.resolutions.size());
  for (auto& x : acc.values()) x /= denom;
  return acc;
}

void Model::refresh_spatial_graph(const ParamSet& params, std::span<const TrainingExample> sample) {
  if (!config_.use_diffusion || pinned_) return;
  SpatialGraphOptions opt{config_.k_nbr, 0, config_.length_scale};
  Tensor scores;
  if (config_.use_graph_attention && config_.m_dep > 0) {
    opt.m_dep = config_.m_dep;
    scores = dependency_scores(params, sample);
  }
  spatial_ = build_spatial_graph(grid_, scores, opt);
}

}  // namespace stgdn
