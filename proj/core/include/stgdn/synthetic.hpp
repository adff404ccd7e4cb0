#pragma once

// Synthetic traffic worlds with known structure: per-region base rates,
// daily and weekly cycles, Gaussian noise and planted lagged couplings
// between distant regions. Also the reference predictors used as floors.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "stgdn/grid_data.hpp"
#include "stgdn/predictor.hpp"

namespace stgdn {

// inflow[dst, t] += gain * inflow[src, t - lag]
struct Coupling {
  std::size_t src = 0;
  std::size_t dst = 0;
  std::size_t lag = 1;
  double gain = 0.0;

  friend bool operator==(const Coupling&, const Coupling&) = default;
};

std::string format_couplings(const std::vector<Coupling>& couplings);  // "src:dst:lag:gain,..."
std::vector<Coupling> parse_couplings(std::string_view text);

struct SynthConfig {
  std::size_t rows = 8;
  std::size_t cols = 8;
  std::size_t days = 28;
  std::size_t slots_per_day = 48;
  double base_rate = 100.0;
  double base_spread = 0.2;  // region base = base_rate * (1 + spread * U[-1, 1])
  double daily_amplitude = 35.0;
  double weekly_amplitude = 20.0;
  double noise_std = 5.0;
  double phase_step = 0.3;    // daily phase grows by this per cell along i + j
  double phase_jitter = 0.5;  // plus U[-jitter, jitter]
  // Without an explicit list, `planted` couplings join seeded source regions
  // to their mirror image through the grid centre, lags alternating 1 and 2.
  std::size_t planted = 4;
  double planted_gain = 0.8;
  std::vector<Coupling> couplings;
  // Optional per-region overrides; empty means derived from the fields above.
  std::vector<double> base_rates;
  std::vector<double> amplitude_scale;  // multiplies both amplitudes
  std::uint64_t seed = 11;

  std::size_t regions() const { return rows * cols; }
  std::size_t slots() const { return days * slots_per_day; }
  // Per-region base rates after applying spread or the override.
  std::vector<double> region_base_rates() const;
  std::vector<Coupling> region_couplings() const;
  void validate() const;
};

struct SynthWorld {
  FlowTensorPair flows;
  std::vector<ExternalRecord> externals;
};

SynthWorld generate(const SynthConfig& config);

struct OracleMetrics {
  Metrics historical_average;
  Metrics persistence;
};

// Historical average per region and time of day over slots before the first
// test target, and persistence (slot t - 1), both scored on the test targets.
OracleMetrics oracle_metrics(const SynthConfig& config, const FlowTensorPair& flows, const Dataset& dataset);

}  // namespace stgdn
