#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Graph is a tape: nodes are appended in creation order, so index order is
// a topological order and backward() walks it once in reverse. Values are
// computed eagerly when an op is recorded. A node only stores a backward rule
// when at least one parent needs a gradient.

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "stgdn/tensor.hpp"

namespace stgdn {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph* graph() const { return graph_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

class Graph {
 public:
  // Called during backward with the node's finished adjoint.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_adjoint)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // A leaf whose gradient is wanted (a parameter or an input under test).
  Var leaf(Tensor value);

  // Appends an op node. `backward` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

  // Adjoint accumulator for v, zero-initialised on first access.
  Tensor& adjoint(Var v);

  // Seeds d(loss)/d(loss) = 1 and propagates. Loss must hold one value.
  void backward(Var loss);

  // Gradient of the last backward() with respect to v; zeros if unreachable.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    bool needs_grad = false;
    bool has_adjoint = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool needs_grad, BackwardFn backward);

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }

// ---- operations ----------------------------------------------------------

// a: [..., k], b: [k, m] -> [..., m]. Leading dims of a are treated as rows.
Var matmul(Var a, Var b);
// Batched product: a [B, n, k], b [B, k, m] -> [B, n, m].
Var bmm(Var a, Var b);
// Swaps the last two axes (rank 2 or 3).
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul_elem(Var a, Var b);
Var scale(Var a, double c);
// a: [..., m] plus bias b with m values, added to every row.
Var add_row_bias(Var a, Var b);
Var concat(Var a, Var b, std::size_t axis);
Var sum(Var a);
Var mean(Var a);
// Softmax over the last axis, max-subtracted.
Var softmax_rows(Var a);
// x for x >= 0, slope * x otherwise. Gradient at 0 is 1.
Var leaky_relu(Var a, double slope);
Var tanh(Var a);
// Rows of a (viewed as [rows, cols]) at the given indices -> [n, cols].
Var gather_rows(Var a, const std::vector<std::size_t>& indices);
// Repeats a single-row tensor n times -> [n, cols].
Var repeat_rows(Var a, std::size_t n);
Var reshape(Var a, Shape shape);

// ---- named parameters ----------------------------------------------------

// Ordered collection of named tensors. Order is insertion order and is the
// order used for serialization and for deterministic reductions.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& at(std::size_t i) { return values_[i]; }
  const Tensor& at(std::size_t i) const { return values_[i]; }
  std::size_t total_values() const;
  // Same names and shapes, all zeros.
  ParamSet zeros_like() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed on a graph as leaves.
class Bindings {
 public:
  // With `trainable` false the parameters become constants (inference).
  Bindings(Graph& g, const ParamSet& params, bool trainable = true);
  Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  // Gradients after g.backward(), shaped like `params`.
  ParamSet gradients(const Graph& g, const ParamSet& params) const;

 private:
  std::unordered_map<std::string, Var> vars_;
};

// ---- finite-difference oracle --------------------------------------------

// Scalar loss of the parameters. When `grads` is non-null the function also
// writes analytic gradients shaped like the parameters into it.
using ParamLossFn = std::function<double(const ParamSet& params, ParamSet* grads)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Central differences (f(p+eps) - f(p-eps)) / 2eps on every coordinate,
// compared by |a-n| / max(1e-8, |a|+|n|). eps must lie in [1e-7, 1e-3].
GradCheckResult grad_check(const ParamLossFn& f, const ParamSet& params, double eps);

}  // namespace stgdn
