#include "stgdn/temporal_encoder.hpp"

#include <cmath>

namespace stgdn {

std::string_view to_string(Pooling p) { return p == Pooling::last ? "last" : "mean"; }

Pooling parse_pooling(std::string_view s) {
  if (s == "last") return Pooling::last;
  if (s == "mean") return Pooling::mean;
  throw ValidationError("unknown pooling '" + std::string(s) + "' (expected last or mean)");
}

Tensor lift_window(std::span<const double> values, const Tensor& lift) {
  if (values.empty()) throw ValidationError("cannot lift an empty window");
  if (lift.rows() != 1) throw ValidationError("lift must be a [1 x d] vector, got " + lift.shape_str());
  const std::size_t d = lift.cols();
  Tensor e({values.size(), d});
  for (std::size_t k = 0; k < values.size(); ++k)
    for (std::size_t c = 0; c < d; ++c) e.at(k, c) = values[k] * lift[c];
  return e;
}

AttentionOutput self_attention(const Tensor& embedded, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                               Pooling pooling) {
  Graph g;
  Var steps, weights;
  Var pooled = self_attention(g.constant(embedded), g.constant(wq), g.constant(wk), g.constant(wv), pooling, &steps,
                              &weights);
  return {steps.value(), weights.value(), pooled.value()};
}

Var self_attention(Var embedded, Var wq, Var wk, Var wv, Pooling pooling, Var* steps, Var* weights) {
  const std::size_t t = embedded.value().rows();
  const std::size_t d = wq.value().cols();
  Var q = matmul(embedded, wq);
  Var k = matmul(embedded, wk);
  Var v = matmul(embedded, wv);
  Var att = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))));
  Var out = matmul(att, v);
  if (steps) *steps = out;
  if (weights) *weights = att;
  if (pooling == Pooling::last) return gather_rows(out, {t - 1});
  Var acc = gather_rows(out, {0});
  for (std::size_t s = 1; s < t; ++s) acc = add(acc, gather_rows(out, {s}));
  return scale(acc, 1.0 / static_cast<double>(t));
}

TemporalEncoding encode_temporal(Var window_in, Var window_out, const TemporalVars& params, Pooling pooling) {
  const Tensor& w = window_in.value();
  if (w.rank() != 2 || window_out.shape() != w.shape()) {
    throw ValidationError("temporal windows must share a [regions x T_p] shape, got " + w.shape_str() + " and " +
                          window_out.value().shape_str());
  }
  const std::size_t regions = w.dim(0), t = w.dim(1);
  const std::size_t d = params.wq.value().cols();

  // [regions*T_p x 1] * [1 x d] lifts every step of every region at once.
  Var e = add(matmul(reshape(window_in, {regions * t, 1}), params.lift_in),
              matmul(reshape(window_out, {regions * t, 1}), params.lift_out));
  Var q = reshape(matmul(e, params.wq), {regions, t, d});
  Var k = reshape(matmul(e, params.wk), {regions, t, d});
  Var v = reshape(matmul(e, params.wv), {regions, t, d});
  Var att = softmax_rows(scale(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))));
  Var out = bmm(att, v);
  Var flat = reshape(out, {regions * t, d});

  std::vector<std::size_t> idx(regions);
  Var pooled;
  if (pooling == Pooling::last) {
    for (std::size_t r = 0; r < regions; ++r) idx[r] = r * t + t - 1;
    pooled = gather_rows(flat, idx);
  } else {
    for (std::size_t s = 0; s < t; ++s) {
      for (std::size_t r = 0; r < regions; ++r) idx[r] = r * t + s;
      Var part = gather_rows(flat, idx);
      pooled = s == 0 ? part : add(pooled, part);
    }
    pooled = scale(pooled, 1.0 / static_cast<double>(t));
  }
  return {pooled, out, att};
}

}  // namespace stgdn
