#include "stgdn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "stgdn/io.hpp"

namespace stgdn {

std::string format_couplings(const std::vector<Coupling>& couplings) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < couplings.size(); ++i) {
    const auto& c = couplings[i];
    if (i) os << ',';
    os << c.src << ':' << c.dst << ':' << c.lag << ':' << c.gain;
  }
  return os.str();
}

std::vector<Coupling> parse_couplings(std::string_view text) {
  std::vector<Coupling> out;
  if (io::trim(text).empty()) return out;
  for (const auto& item : io::split(text, ',')) {
    const auto f = io::split(io::trim(item), ':');
    if (f.size() != 4) throw ValidationError("couplings: expected src:dst:lag:gain, got '" + std::string(item) + "'");
    const auto src = io::parse_int(f[0], "coupling src");
    const auto dst = io::parse_int(f[1], "coupling dst");
    const auto lag = io::parse_int(f[2], "coupling lag");
    if (src < 0 || dst < 0 || lag < 0) throw ValidationError("couplings: negative value in '" + std::string(item) + "'");
    out.push_back({static_cast<std::size_t>(src), static_cast<std::size_t>(dst), static_cast<std::size_t>(lag),
                   io::parse_double(f[3], "coupling gain")});
  }
  return out;
}

std::vector<double> SynthConfig::region_base_rates() const {
  if (!base_rates.empty()) return base_rates;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> out(regions());
  for (auto& b : out) b = std::round(base_rate * (1.0 + base_spread * u(rng)));
  return out;
}

std::vector<Coupling> SynthConfig::region_couplings() const {
  if (!couplings.empty()) return couplings;
  std::vector<std::size_t> candidates;
  for (std::size_t r = 0; r < regions(); ++r) {
    if (regions() - 1 - r > r) candidates.push_back(r);  // one side of the centre
  }
  std::mt19937_64 rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  std::vector<Coupling> out;
  for (std::size_t k = 0; k < std::min(planted, candidates.size()); ++k) {
    const std::size_t src = candidates[k];
    out.push_back({src, regions() - 1 - src, 1 + k % 2, planted_gain});
  }
  return out;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError("synth." + key + ": " + why); };
  if (rows == 0 || cols == 0) fail("grid", "rows and cols must be positive");
  if (days == 0) fail("days", "must be positive");
  if (slots_per_day == 0 || 1440 % slots_per_day != 0) fail("slots_per_day", "must divide 1440");
  if (!(daily_amplitude >= 0.0)) fail("daily_amplitude", "must be >= 0");
  if (!(weekly_amplitude >= 0.0)) fail("weekly_amplitude", "must be >= 0");
  if (!(noise_std >= 0.0)) fail("noise_std", "must be >= 0");
  if (!(base_spread >= 0.0 && base_spread < 1.0)) fail("base_spread", "must lie in [0, 1)");
  if (!base_rates.empty() && base_rates.size() != regions()) fail("base_rates", "needs one value per region");
  if (!amplitude_scale.empty() && amplitude_scale.size() != regions()) fail("amplitude_scale", "needs one value per region");
  const auto bases = region_base_rates();
  for (std::size_t r = 0; r < regions(); ++r) {
    const double s = amplitude_scale.empty() ? 1.0 : amplitude_scale[r];
    if (!(s >= 0.0)) fail("amplitude_scale", "must be >= 0");
    const double need = s * (daily_amplitude + weekly_amplitude) + 3.0 * noise_std;
    if (!(bases[r] > need)) {
      fail("base_rate", "region " + std::to_string(r) + " base " + std::to_string(bases[r]) +
                            " must exceed amplitudes + 3 * noise (" + std::to_string(need) + ")");
    }
  }
  if (!std::isfinite(planted_gain)) fail("planted_gain", "must be finite");
  for (const auto& c : region_couplings()) {
    if (c.src >= regions() || c.dst >= regions()) fail("couplings", "region index outside the grid");
    if (c.src == c.dst) fail("couplings", "a region cannot be coupled to itself");
    if (c.lag == 0 || c.lag >= slots()) fail("couplings", "lag must lie in [1, slots)");
    if (!std::isfinite(c.gain)) fail("couplings", "gain must be finite");
  }
}

SynthWorld generate(const SynthConfig& config) {
  config.validate();
  const std::size_t n = config.regions(), spd = config.slots_per_day, week = 7 * spd, total = config.slots();
  const auto bases = config.region_base_rates();
  const double two_pi = 2.0 * std::numbers::pi;

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> jitter(-config.phase_jitter, config.phase_jitter);
  std::vector<double> phase_in(n), phase_out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double i = static_cast<double>(r / config.cols), j = static_cast<double>(r % config.cols);
    phase_in[r] = config.phase_step * (i + j) + jitter(rng);
    phase_out[r] = config.phase_step * (i - j) + 0.5 * std::numbers::pi + jitter(rng);
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto couplings = config.region_couplings();
  std::vector<std::vector<const Coupling*>> incoming(n);
  for (const auto& c : couplings) incoming[c.dst].push_back(&c);

  SynthWorld w;
  w.flows = make_flows(config.rows, config.cols, total, static_cast<std::uint32_t>(1440 / spd));
  auto in = w.flows.inflow.values();
  auto out = w.flows.outflow.values();
  for (std::size_t t = 0; t < total; ++t) {
    const double day_angle = two_pi * static_cast<double>(t % spd) / static_cast<double>(spd);
    const double weekly = config.weekly_amplitude * std::sin(two_pi * static_cast<double>(t % week) / static_cast<double>(week));
    for (std::size_t r = 0; r < n; ++r) {
      const double s = config.amplitude_scale.empty() ? 1.0 : config.amplitude_scale[r];
      double vin = bases[r] + s * (config.daily_amplitude * std::sin(day_angle + phase_in[r]) + weekly);
      double vout = bases[r] + s * (config.daily_amplitude * std::sin(day_angle + phase_out[r]) + weekly);
      for (const Coupling* c : incoming[r]) {
        if (t >= c->lag) vin += c->gain * in[c->src * total + t - c->lag];
      }
      if (config.noise_std > 0.0) {
        vin += config.noise_std * noise(rng);
        vout += config.noise_std * noise(rng);
      }
      in[r * total + t] = std::round(std::max(0.0, vin));
      out[r * total + t] = std::round(std::max(0.0, vout));
    }
  }

  const auto& vocab = weather_vocabulary();
  w.externals.resize(total);
  for (std::size_t t = 0; t < total; ++t) {
    const std::size_t day = t / spd;
    const double angle = two_pi * static_cast<double>(t % spd) / static_cast<double>(spd);
    auto& e = w.externals[t];
    e.slot = t;
    e.weather = static_cast<int>((day * 5 / 3) % vocab.size());
    e.temperature_c = 12.0 - 7.0 * std::cos(angle);
    e.wind_mph = 9.0 + 4.0 * std::sin(angle + 1.0);
    e.holiday = day % 7 >= 5;
  }
  return w;
}

namespace {

Metrics score(const std::vector<double> (&pred)[2], const std::vector<double> (&truth)[2]) {
  Metrics m;
  m.entries = pred[0].size();
  m.rmse_in = rmse(pred[0], truth[0]);
  m.rmse_out = rmse(pred[1], truth[1]);
  const auto mi = mape(pred[0], truth[0]);
  const auto mo = mape(pred[1], truth[1]);
  m.mape_in = mi.percent;
  m.mape_out = mo.percent;
  m.mape_excluded_in = mi.excluded_fraction;
  m.mape_excluded_out = mo.excluded_fraction;
  return m;
}

}  // namespace

OracleMetrics oracle_metrics(const SynthConfig& config, const FlowTensorPair& flows, const Dataset& dataset) {
  if (dataset.test.empty()) throw ValidationError("oracle baselines need a non-empty test split");
  const std::size_t spd = config.slots_per_day, n = flows.regions();
  const std::size_t history = dataset.test.front().target;
  if (history < spd) throw ValidationError("oracle baselines need at least one day of history");

  // Historical average per (flow, region, time of day).
  std::vector<double> mean(2 * n * spd, 0.0);
  std::vector<std::size_t> count(spd, 0);
  for (std::size_t t = 0; t < history; ++t) ++count[t % spd];
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t t = 0; t < history; ++t) mean[(f * n + r) * spd + t % spd] += flows.at(Flow(f), r, t);
      for (std::size_t k = 0; k < spd; ++k) mean[(f * n + r) * spd + k] /= static_cast<double>(count[k]);
    }
  }

  std::vector<double> ha[2], pers[2], truth[2];
  for (const auto& ex : dataset.test) {
    const std::size_t t = ex.target;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t f = 0; f < 2; ++f) {
        truth[f].push_back(flows.at(Flow(f), r, t));
        ha[f].push_back(mean[(f * n + r) * spd + t % spd]);
        pers[f].push_back(flows.at(Flow(f), r, t - 1));
      }
    }
  }
  return {score(ha, truth), score(pers, truth)};
}

}  // namespace stgdn
