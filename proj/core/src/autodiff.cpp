#include "stgdn/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "stgdn/error.hpp"
#include "stgdn/kernels.hpp"

namespace stgdn {

// ---- Graph ---------------------------------------------------------------

Var Graph::push(Tensor value, bool needs_grad, BackwardFn backward) {
  if (checked_mode()) require_finite(value, "graph node " + std::to_string(nodes_.size()));
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Graph::leaf(Tensor value) { return push(std::move(value), true, nullptr); }

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool needs = false;
  for (auto p : parents) needs = needs || nodes_[p.id()].needs_grad;
  return push(std::move(value), needs, std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  for (auto p : parents) needs = needs || nodes_[p.id()].needs_grad;
  return push(std::move(value), needs, std::move(backward));
}

Tensor& Graph::adjoint(Var v) {
  auto& n = nodes_[v.id()];
  if (!n.has_adjoint) {
    n.adjoint = Tensor(n.value.shape());
    n.has_adjoint = true;
  }
  return n.adjoint;
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ValidationError("backward() needs a scalar loss, got shape " + value(loss).shape_str());
  }
  for (auto& n : nodes_) {
    n.has_adjoint = false;
    n.adjoint = Tensor();
  }
  adjoint(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.needs_grad || !n.has_adjoint || !n.backward) continue;
    n.backward(*this, n.adjoint);
  }
}

Tensor Graph::grad(Var v) const {
  const auto& n = nodes_[v.id()];
  if (!n.has_adjoint) return Tensor(n.value.shape());
  return n.adjoint;
}

// ---- operations ----------------------------------------------------------

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ValidationError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                        shape_to_string(b));
}

Graph& graph_of(Var a, Var b) {
  if (a.graph() != b.graph()) throw ValidationError("operands belong to different graphs");
  return *a.graph();
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 2 || bv.rank() != 2 || av.cols() != bv.dim(0)) shape_error("matmul", av.shape(), bv.shape());
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Shape out_shape = av.shape();
  out_shape.back() = m;
  Tensor out(out_shape);
  kernels::gemm_nn(av.values().data(), bv.values().data(), out.values().data(), n, k, m);
  return g.record(std::move(out), {a, b}, [a, b, n, k, m](Graph& g, const Tensor& dout) {
    if (g.needs_grad(a)) {
      kernels::gemm_nt(dout.values().data(), g.value(b).values().data(), g.adjoint(a).values().data(), n, m, k);
    }
    if (g.needs_grad(b)) {
      kernels::gemm_tn(g.value(a).values().data(), dout.values().data(), g.adjoint(b).values().data(), n, k, m);
    }
  });
}

Var bmm(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
    shape_error("bmm", av.shape(), bv.shape());
  }
  const std::size_t batch = av.dim(0), n = av.dim(1), k = av.dim(2), m = bv.dim(2);
  Tensor out({batch, n, m});
  for (std::size_t s = 0; s < batch; ++s) {
    kernels::gemm_nn(av.values().data() + s * n * k, bv.values().data() + s * k * m,
                     out.values().data() + s * n * m, n, k, m);
  }
  return g.record(std::move(out), {a, b}, [a, b, batch, n, k, m](Graph& g, const Tensor& dout) {
    const double* dp = dout.values().data();
    if (g.needs_grad(a)) {
      double* da = g.adjoint(a).values().data();
      const double* bp = g.value(b).values().data();
      for (std::size_t s = 0; s < batch; ++s) {
        kernels::gemm_nt(dp + s * n * m, bp + s * k * m, da + s * n * k, n, m, k);
      }
    }
    if (g.needs_grad(b)) {
      double* db = g.adjoint(b).values().data();
      const double* ap = g.value(a).values().data();
      for (std::size_t s = 0; s < batch; ++s) {
        kernels::gemm_tn(ap + s * n * k, dp + s * n * m, db + s * k * m, n, k, m);
      }
    }
  });
}

Var transpose(Var a) {
  Graph& g = *a.graph();
  const Tensor& av = a.value();
  if (av.rank() != 2 && av.rank() != 3) throw ValidationError("transpose: expected rank 2 or 3, got " + av.shape_str());
  const std::size_t batch = av.rank() == 3 ? av.dim(0) : 1;
  const std::size_t n = av.dim(av.rank() - 2), m = av.dim(av.rank() - 1);
  Shape out_shape = av.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Tensor out(out_shape);
  for (std::size_t s = 0; s < batch; ++s) {
    const double* src = av.values().data() + s * n * m;
    double* dst = out.values().data() + s * n * m;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) dst[j * n + i] = src[i * m + j];
  }
  return g.record(std::move(out), {a}, [a, batch, n, m](Graph& g, const Tensor& dout) {
    double* da = g.adjoint(a).values().data();
    for (std::size_t s = 0; s < batch; ++s) {
      const double* src = dout.values().data() + s * n * m;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) da[s * n * m + i * m + j] += src[j * n + i];
    }
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dout) {
    for (Var p : {a, b}) {
      if (!g.needs_grad(p)) continue;
      auto dp = g.adjoint(p).values();
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += dout[i];
    }
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dout) {
    if (g.needs_grad(a)) {
      auto da = g.adjoint(a).values();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i];
    }
    if (g.needs_grad(b)) {
      auto db = g.adjoint(b).values();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dout[i];
    }
  });
}

Var mul_elem(Var a, Var b) {
  Graph& g = graph_of(a, b);
  if (a.shape() != b.shape()) shape_error("mul_elem", a.shape(), b.shape());
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dout) {
    if (g.needs_grad(a)) {
      auto da = g.adjoint(a).values();
      const auto bv = g.value(b).values();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i] * bv[i];
    }
    if (g.needs_grad(b)) {
      auto db = g.adjoint(b).values();
      const auto av = g.value(a).values();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dout[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (auto& x : out.values()) x *= c;
  return g.record(std::move(out), {a}, [a, c](Graph& g, const Tensor& dout) {
    auto da = g.adjoint(a).values();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += c * dout[i];
  });
}

Var add_row_bias(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  if (b.value().size() != av.cols()) shape_error("add_row_bias", av.shape(), b.shape());
  Tensor out = av;
  const auto bv = b.value().values();
  const std::size_t rows = av.rows(), cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return g.record(std::move(out), {a, b}, [a, b, rows, cols](Graph& g, const Tensor& dout) {
    if (g.needs_grad(a)) {
      auto da = g.adjoint(a).values();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i];
    }
    if (g.needs_grad(b)) {
      auto db = g.adjoint(b).values();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) db[c] += dout[r * cols + c];
    }
  });
}

Var concat(Var a, Var b, std::size_t axis) {
  Graph& g = graph_of(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || axis >= as.size()) shape_error("concat", as, bs);
  for (std::size_t i = 0; i < as.size(); ++i) {
    if (i != axis && as[i] != bs[i]) shape_error("concat", as, bs);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  const std::size_t ca = as[axis] * inner, cb = bs[axis] * inner;
  Shape out_shape = as;
  out_shape[axis] += bs[axis];
  Tensor out(out_shape);
  const auto av = a.value().values();
  const auto bv = b.value().values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + o * ca, ca, out.values().data() + o * (ca + cb));
    std::copy_n(bv.data() + o * cb, cb, out.values().data() + o * (ca + cb) + ca);
  }
  return g.record(std::move(out), {a, b}, [a, b, outer, ca, cb](Graph& g, const Tensor& dout) {
    if (g.needs_grad(a)) {
      auto da = g.adjoint(a).values();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < ca; ++i) da[o * ca + i] += dout[o * (ca + cb) + i];
    }
    if (g.needs_grad(b)) {
      auto db = g.adjoint(b).values();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < cb; ++i) db[o * cb + i] += dout[o * (ca + cb) + ca + i];
    }
  });
}

Var sum(Var a) {
  Graph& g = *a.graph();
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return g.record(Tensor::scalar(s), {a}, [a](Graph& g, const Tensor& dout) {
    const double d = dout[0];
    for (auto& x : g.adjoint(a).values()) x += d;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ValidationError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var softmax_rows(Var a) {
  Graph& g = *a.graph();
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  if (av.rank() < 2 || cols == 0) throw ValidationError("softmax_rows: expected non-empty rows, got " + av.shape_str());
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) kernels::softmax(av.row(r), out.row(r));
  return g.record(std::move(out), {a}, [a](Graph& g, const Tensor& dout) {
    // The node's own value is not captured; recompute from the parent.
    const Tensor& av = g.value(a);
    Tensor& da = g.adjoint(a);
    std::vector<double> y(av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
      kernels::softmax(av.row(r), y);
      const auto dy = dout.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < y.size(); ++c) dot += dy[c] * y[c];
      auto dx = da.row(r);
      for (std::size_t c = 0; c < y.size(); ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  });
}

Var leaky_relu(Var a, double slope) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (auto& x : out.values()) x = x >= 0.0 ? x : slope * x;
  return g.record(std::move(out), {a}, [a, slope](Graph& g, const Tensor& dout) {
    const auto av = g.value(a).values();
    auto da = g.adjoint(a).values();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += av[i] >= 0.0 ? dout[i] : slope * dout[i];
  });
}

Var tanh(Var a) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  for (auto& x : out.values()) x = std::tanh(x);
  return g.record(std::move(out), {a}, [a](Graph& g, const Tensor& dout) {
    const auto av = g.value(a).values();
    auto da = g.adjoint(a).values();
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double t = std::tanh(av[i]);
      da[i] += dout[i] * (1.0 - t * t);
    }
  });
}

Var gather_rows(Var a, const std::vector<std::size_t>& indices) {
  Graph& g = *a.graph();
  const Tensor& av = a.value();
  const std::size_t cols = av.cols();
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.rows()) {
      throw ValidationError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " + av.shape_str());
    }
    std::copy_n(av.values().data() + indices[i] * cols, cols, out.values().data() + i * cols);
  }
  return g.record(std::move(out), {a}, [a, indices, cols](Graph& g, const Tensor& dout) {
    auto da = g.adjoint(a).values();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) da[indices[i] * cols + c] += dout[i * cols + c];
  });
}

Var repeat_rows(Var a, std::size_t n) {
  Graph& g = *a.graph();
  const Tensor& av = a.value();
  if (av.rows() != 1) throw ValidationError("repeat_rows: expected a single row, got " + av.shape_str());
  const std::size_t cols = av.cols();
  Tensor out({n, cols});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(av.values().data(), cols, out.values().data() + r * cols);
  return g.record(std::move(out), {a}, [a, n, cols](Graph& g, const Tensor& dout) {
    auto da = g.adjoint(a).values();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < cols; ++c) da[c] += dout[r * cols + c];
  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = *a.graph();
  Tensor out = a.value().reshaped(std::move(shape));
  return g.record(std::move(out), {a}, [a](Graph& g, const Tensor& dout) {
    auto da = g.adjoint(a).values();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i];
  });
}

// ---- ParamSet / Bindings -------------------------------------------------

void ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

Tensor& ParamSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return values_[it->second];
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return values_[it->second];
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Tensor(values_[i].shape()));
  return out;
}

Bindings::Bindings(Graph& g, const ParamSet& params, bool trainable) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars_.emplace(params.name(i), trainable ? g.leaf(params.at(i)) : g.constant(params.at(i)));
  }
}

Var Bindings::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ValidationError("parameter '" + name + "' is not bound");
  return it->second;
}

ParamSet Bindings::gradients(const Graph& g, const ParamSet& params) const {
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) out.add(params.name(i), g.grad((*this)[params.name(i)]));
  return out;
}

// ---- grad_check ----------------------------------------------------------

GradCheckResult grad_check(const ParamLossFn& f, const ParamSet& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ValidationError("grad_check: eps must lie in [1e-7, 1e-3], got " + std::to_string(eps));
  }
  ParamSet analytic = params.zeros_like();
  f(params, &analytic);

  GradCheckResult res;
  ParamSet probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    Tensor& t = probe.at(p);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + eps;
      const double up = f(probe, nullptr);
      t[i] = orig - eps;
      const double down = f(probe, nullptr);
      t[i] = orig;
      const double num = (up - down) / (2.0 * eps);
      const double ana = analytic.at(p)[i];
      const double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
      ++res.checked;
      if (rel > res.max_rel_error || res.worst_param.empty()) {
        if (rel >= res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst_param = probe.name(p);
          res.worst_index = i;
          res.worst_analytic = ana;
          res.worst_numeric = num;
        }
      }
    }
  }
  return res;
}

}  // namespace stgdn
