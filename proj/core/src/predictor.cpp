#include "stgdn/predictor.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace stgdn {

Var encode_externals(Graph& g, const ExternalFeatures& features, const ExternalVars& vars, double slope) {
  const std::size_t rows = vars.embedding.value().rows();
  if (features.weather < 0 || static_cast<std::size_t>(features.weather) >= rows) {
    throw ValidationError("weather code " + std::to_string(features.weather) + " outside the embedding table");
  }
  Var embed = gather_rows(vars.embedding, {static_cast<std::size_t>(features.weather)});
  Var scalars = g.constant(Tensor({1, kExternalScalars}, {features.temperature, features.wind, features.holiday}));
  Var x = concat(embed, scalars, 1);
  Var h = leaky_relu(add_row_bias(matmul(x, vars.w1), vars.b1), slope);
  return add_row_bias(matmul(h, vars.w2), vars.b2);
}

Var predict_head(Var lambda, Var g, const HeadVars& head, double slope, bool bounded) {
  Var x = lambda;
  if (g.valid()) x = concat(lambda, repeat_rows(g, lambda.value().rows()), 1);
  Var h1 = leaky_relu(add_row_bias(matmul(x, head.w1), head.b1), slope);
  Var h2 = leaky_relu(add_row_bias(matmul(h1, head.w2), head.b2), slope);
  Var out = add_row_bias(matmul(h2, head.w3), head.b3);
  return bounded ? tanh(out) : out;
}

namespace {

void check_loss_inputs(const Tensor& pred, const Tensor& truth, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("lambda must lie in [0, 1]");
  if (pred.shape() != truth.shape() || pred.rank() != 2 || pred.cols() != 2) {
    throw ValidationError("loss: prediction " + pred.shape_str() + " vs truth " + truth.shape_str());
  }
  if (!pred.all_finite() || !truth.all_finite()) throw NumericalError("loss: non-finite input");
}

}  // namespace

Var joint_loss(Var pred, const Tensor& truth, double lambda) {
  check_loss_inputs(pred.value(), truth, lambda);
  Graph& g = *pred.graph();
  Tensor weights(truth.shape());
  for (std::size_t r = 0; r < weights.rows(); ++r) {
    weights.at(r, 0) = lambda;
    weights.at(r, 1) = 1.0 - lambda;
  }
  Var diff = sub(pred, g.constant(truth));
  return sum(mul_elem(mul_elem(diff, diff), g.constant(std::move(weights))));
}

double joint_loss(const Tensor& pred, const Tensor& truth, double lambda) {
  check_loss_inputs(pred, truth, lambda);
  double total = 0.0;
  for (std::size_t r = 0; r < pred.rows(); ++r) {
    const double ein = pred.at(r, 0) - truth.at(r, 0);
    const double eout = pred.at(r, 1) - truth.at(r, 1);
    total += lambda * ein * ein + (1.0 - lambda) * eout * eout;
  }
  return total;
}

double rmse(std::span<const double> preds, std::span<const double> truths) {
  if (preds.size() != truths.size() || preds.empty()) throw ValidationError("rmse: need equally sized, non-empty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = preds[i] - truths[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(preds.size()));
}

MapeResult mape(std::span<const double> preds, std::span<const double> truths, double floor) {
  if (preds.size() != truths.size() || preds.empty()) throw ValidationError("mape: need equally sized, non-empty inputs");
  double s = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (truths[i] < floor) continue;
    s += std::abs(preds[i] - truths[i]) / truths[i];
    ++used;
  }
  if (used == 0) throw ValidationError("mape: every truth value is below the floor");
  return {100.0 * s / static_cast<double>(used),
          static_cast<double>(preds.size() - used) / static_cast<double>(preds.size())};
}

Tensor Forecast::denormalized() const {
  if (!stats) throw ValidationError("forecast has no normalization statistics");
  Tensor out(normalized.shape());
  for (std::size_t r = 0; r < normalized.rows(); ++r) {
    out.at(r, 0) = std::max(0.0, stats->denormalize(Flow::in, normalized.at(r, 0)));
    out.at(r, 1) = std::max(0.0, stats->denormalize(Flow::out, normalized.at(r, 1)));
  }
  return out;
}

Tensor Forecast::grid() const { return denormalized().reshaped({rows, cols, 2}); }

double Metrics::rmse_combined() const { return std::sqrt(0.5 * (rmse_in * rmse_in + rmse_out * rmse_out)); }

Metrics compute_metrics(std::span<const Forecast> forecasts, double mape_floor) {
  if (forecasts.empty()) throw ValidationError("no forecasts to score");
  std::vector<double> p[2], t[2];
  for (const auto& f : forecasts) {
    if (f.truth.size() == 0) throw ValidationError("forecast for slot " + std::to_string(f.target) + " has no truth");
    const Tensor v = f.denormalized();
    for (std::size_t r = 0; r < v.rows(); ++r) {
      for (std::size_t k = 0; k < 2; ++k) {
        p[k].push_back(v.at(r, k));
        t[k].push_back(f.truth.at(r, k));
      }
    }
  }
  Metrics m;
  m.entries = p[0].size();
  m.rmse_in = rmse(p[0], t[0]);
  m.rmse_out = rmse(p[1], t[1]);
  const auto mi = mape(p[0], t[0], mape_floor);
  const auto mo = mape(p[1], t[1], mape_floor);
  m.mape_in = mi.percent;
  m.mape_out = mo.percent;
  m.mape_excluded_in = mi.excluded_fraction;
  m.mape_excluded_out = mo.excluded_fraction;
  return m;
}

std::string metrics_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["rmse_in"] = m.rmse_in;
  j["rmse_out"] = m.rmse_out;
  j["mape_in"] = m.mape_in;
  j["mape_out"] = m.mape_out;
  j["mape_excluded_in"] = m.mape_excluded_in;
  j["mape_excluded_out"] = m.mape_excluded_out;
  j["entries"] = m.entries;
  return j.dump();
}

Metrics parse_metrics_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Metrics m;
    m.rmse_in = j.at("rmse_in").get<double>();
    m.rmse_out = j.at("rmse_out").get<double>();
    m.mape_in = j.at("mape_in").get<double>();
    m.mape_out = j.at("mape_out").get<double>();
    m.mape_excluded_in = j.value("mape_excluded_in", 0.0);
    m.mape_excluded_out = j.value("mape_excluded_out", 0.0);
    m.entries = j.value("entries", std::size_t{0});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed metrics record: ") + e.what());
  }
}

std::string forecast_csv(std::span<const Forecast> forecasts) {
  std::ostringstream os;
  os.precision(10);
  os << "t,i,j,inflow_pred,outflow_pred,inflow_true,outflow_true\n";
  for (const auto& f : forecasts) {
    const Tensor v = f.denormalized();
    for (std::size_t r = 0; r < v.rows(); ++r) {
      os << f.target << ',' << r / f.cols << ',' << r % f.cols << ',' << v.at(r, 0) << ',' << v.at(r, 1) << ',';
      if (f.truth.size() != 0) os << f.truth.at(r, 0) << ',' << f.truth.at(r, 1);
      else os << ',';
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace stgdn
