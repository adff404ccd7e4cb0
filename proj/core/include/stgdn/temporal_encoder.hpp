#pragma once

// Resolution-aware temporal encoding: each region's window is lifted step by
// step into d dimensions and passed through scaled dot-product self-attention.

#include <span>

#include "stgdn/autodiff.hpp"
#include "stgdn/grid_data.hpp"

namespace stgdn {

enum class Pooling { last, mean };

std::string_view to_string(Pooling p);
Pooling parse_pooling(std::string_view s);

// Row k = values[k] * lift, with lift a [1 x d] vector. No bias, so a zero
// window lifts to zeros.
Tensor lift_window(std::span<const double> values, const Tensor& lift);

struct AttentionOutput {
  Tensor steps;    // [T_p x d]
  Tensor weights;  // [T_p x T_p], rows sum to 1
  Tensor pooled;   // [1 x d]
};

// softmax(Q K^T / sqrt(d)) V with Q = E Wq, K = E Wk, V = E Wv.
AttentionOutput self_attention(const Tensor& embedded, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                               Pooling pooling = Pooling::last);

// Differentiable single-region form of self_attention. Returns the pooled
// [1 x d] row; `steps` and `weights` receive the intermediates when given.
Var self_attention(Var embedded, Var wq, Var wk, Var wv, Pooling pooling, Var* steps = nullptr, Var* weights = nullptr);

struct TemporalVars {
  Var lift_in;   // [1 x d]
  Var lift_out;  // [1 x d]
  Var wq, wk, wv;  // [d x d]
};

struct TemporalEncoding {
  Var pooled;   // Y^p: [regions x d]
  Var steps;    // [regions x T_p x d]
  Var weights;  // [regions x T_p x T_p]
};

// All regions at once. Both flow windows are [regions x T_p]; a step's
// embedding is in * lift_in + out * lift_out.
TemporalEncoding encode_temporal(Var window_in, Var window_out, const TemporalVars& params, Pooling pooling);

}  // namespace stgdn
