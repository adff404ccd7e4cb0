#pragma once

// External-factor encoding, the prediction head, the joint loss and the
// evaluation metrics.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stgdn/autodiff.hpp"
#include "stgdn/grid_data.hpp"

namespace stgdn {

// Raw feature width besides the weather embedding: temperature, wind, holiday.
inline constexpr std::size_t kExternalScalars = 3;

struct ExternalVars {
  Var embedding;  // [vocab + 1 x d_e], last row is the unknown code
  Var w1, b1;     // [d_e + 3 x d_e], [1 x d_e]
  Var w2, b2;     // [d_e x d_e], [1 x d_e]
};

// g_t = [embedding[weather] || temperature || wind || holiday];
// returns MLP(g_t) as a [1 x d_e] row.
Var encode_externals(Graph& g, const ExternalFeatures& features, const ExternalVars& vars, double slope);

struct HeadVars {
  Var w1, b1;  // [in x hidden]
  Var w2, b2;  // [hidden x hidden]
  Var w3, b3;  // [hidden x 2]
};

// Per-region head input [lambda_r || g] through three layers; LeakyReLU
// between layers and tanh on the output when `bounded`. Returns [regions x 2]
// normalized (inflow, outflow). `g` may be invalid when externals are off.
Var predict_head(Var lambda, Var g, const HeadVars& head, double slope, bool bounded);

// sum_r lambda (p_in - t_in)^2 + (1 - lambda) (p_out - t_out)^2.
Var joint_loss(Var pred, const Tensor& truth, double lambda);
double joint_loss(const Tensor& pred, const Tensor& truth, double lambda);

double rmse(std::span<const double> preds, std::span<const double> truths);

struct MapeResult {
  double percent = 0.0;
  double excluded_fraction = 0.0;
};

// Entries with truth below `floor` are excluded; all excluded is an error.
MapeResult mape(std::span<const double> preds, std::span<const double> truths, double floor = 1.0);

struct Forecast {
  std::size_t target = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor normalized;               // [regions x 2]
  std::optional<NormStats> stats;  // needed for the volume view
  Tensor truth;                    // [regions x 2] volumes, may be empty

  // Volumes [regions x 2], clamped at 0.
  Tensor denormalized() const;
  // [I, J, 2] view of the volumes.
  Tensor grid() const;
};

struct Metrics {
  double rmse_in = 0.0;
  double rmse_out = 0.0;
  double mape_in = 0.0;
  double mape_out = 0.0;
  double mape_excluded_in = 0.0;
  double mape_excluded_out = 0.0;
  std::size_t entries = 0;

  double rmse_combined() const;
};

// Metrics over the volume views of forecasts carrying truths.
Metrics compute_metrics(std::span<const Forecast> forecasts, double mape_floor = 1.0);
// Single line: {"rmse_in":…,"rmse_out":…,"mape_in":…,"mape_out":…}
std::string metrics_json(const Metrics& m);
Metrics parse_metrics_json(const std::string& text);

// "t,i,j,inflow_pred,outflow_pred,inflow_true,outflow_true" rows.
std::string forecast_csv(std::span<const Forecast> forecasts);

}  // namespace stgdn
