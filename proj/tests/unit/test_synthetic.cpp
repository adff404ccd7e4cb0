#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "stgdn/synthetic.hpp"

using namespace stgdn;

namespace {

SynthConfig quiet(std::size_t rows, std::size_t cols, std::size_t days, std::size_t spd) {
  SynthConfig c;
  c.rows = rows;
  c.cols = cols;
  c.days = days;
  c.slots_per_day = spd;
  c.noise_std = 0.0;
  c.weekly_amplitude = 0.0;
  c.planted = 0;
  return c;
}

std::vector<double> diffs(const FlowTensorPair& f, std::size_t r, std::size_t from, std::size_t to) {
  std::vector<double> out;
  for (std::size_t t = from; t < to; ++t) out.push_back(f.at(Flow::in, r, t) - f.at(Flow::in, r, t - 1));
  return out;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

Dataset dataset_for(const SynthWorld& w, std::vector<ResolutionSpec> res) {
  DatasetOptions o;
  o.resolutions = std::move(res);
  return make_dataset(w.flows, w.externals, o);
}

}  // namespace

TEST(Synthetic, DailyPeriodicWithoutNoiseOrWeeklyCycle) {
  const auto w = generate(quiet(3, 3, 4, 24));
  for (std::size_t r = 0; r < 9; ++r) {
    for (std::size_t t = 0; t + 24 < 96; ++t) {
      EXPECT_EQ(w.flows.at(Flow::in, r, t), w.flows.at(Flow::in, r, t + 24));
      EXPECT_EQ(w.flows.at(Flow::out, r, t), w.flows.at(Flow::out, r, t + 24));
    }
  }
}

TEST(Synthetic, CouplingShiftsSourceIntoFlatTarget) {
  SynthConfig c = quiet(2, 2, 3, 24);
  c.couplings = {{0, 3, 2, 1.0}};
  c.amplitude_scale = {1.0, 1.0, 1.0, 0.0};
  const auto w = generate(c);
  const double base = c.region_base_rates()[3];
  EXPECT_EQ(w.flows.at(Flow::in, 3, 0), base);
  EXPECT_EQ(w.flows.at(Flow::in, 3, 1), base);
  for (std::size_t t = 2; t < 72; ++t) EXPECT_EQ(w.flows.at(Flow::in, 3, t), base + w.flows.at(Flow::in, 0, t - 2));
}

TEST(Synthetic, DeterministicPerSeed) {
  SynthConfig c;
  c.rows = c.cols = 3;
  c.days = 2;
  const auto a = generate(c), b = generate(c);
  EXPECT_EQ(a.flows.inflow, b.flows.inflow);
  EXPECT_EQ(a.flows.outflow, b.flows.outflow);
  c.seed = 12;
  EXPECT_NE(generate(c).flows.inflow, a.flows.inflow);
}

TEST(Synthetic, VolumesAreNonNegativeCounts) {
  SynthConfig c;
  c.rows = c.cols = 4;
  c.days = 7;
  const auto w = generate(c);
  for (const auto* t : {&w.flows.inflow, &w.flows.outflow}) {
    for (double x : t->values()) {
      EXPECT_GE(x, 0.0);
      EXPECT_EQ(x, std::round(x));
    }
  }
  EXPECT_EQ(w.externals.size(), c.slots());
  EXPECT_EQ(w.flows.slot_minutes, 30u);
}

TEST(Synthetic, DefaultCouplingsJoinMirrorRegions) {
  SynthConfig c;
  const auto cs = c.region_couplings();
  ASSERT_EQ(cs.size(), 4u);
  for (std::size_t k = 0; k < cs.size(); ++k) {
    EXPECT_EQ(cs[k].src + cs[k].dst, 63u);
    EXPECT_EQ(cs[k].lag, 1 + k % 2);
    EXPECT_EQ(cs[k].gain, 0.8);
  }
  EXPECT_EQ(parse_couplings(format_couplings(cs)), cs);
  EXPECT_TRUE(parse_couplings(" ").empty());
  EXPECT_THROW(parse_couplings("1:2:3"), ValidationError);
  EXPECT_THROW(parse_couplings("1:-2:3:0.5"), ValidationError);
}

TEST(Synthetic, PlantedCouplingsAreDetectable) {
  SynthConfig c;
  const auto w = generate(c);
  const auto cs = c.region_couplings();
  const std::size_t from = 3, to = c.slots();
  double weakest = 1.0;
  for (const auto& k : cs) {
    const auto dst = diffs(w.flows, k.dst, from, to);
    const auto src = diffs(w.flows, k.src, from - k.lag, to - k.lag);
    weakest = std::min(weakest, correlation(dst, src));
  }
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, c.regions() - 1);
  double strongest = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t a = pick(rng), b = pick(rng);
    bool planted = a == b;
    for (const auto& k : cs) planted = planted || (k.src == b && k.dst == a) || (k.src == a && k.dst == b);
    if (planted) continue;
    const std::size_t lag = 1 + trial % 2;
    strongest = std::max(strongest,
                         std::abs(correlation(diffs(w.flows, a, from, to), diffs(w.flows, b, from - lag, to - lag))));
  }
  EXPECT_GT(weakest, 2.0 * strongest) << weakest << " vs " << strongest;
}

TEST(Oracles, HistoricalAverageExactOnDeterministicSignal) {
  const auto c = quiet(2, 2, 10, 24);
  const auto w = generate(c);
  const auto m = oracle_metrics(c, w.flows, dataset_for(w, {{Resolution::hour, 3}, {Resolution::day, 2}}));
  EXPECT_EQ(m.historical_average.rmse_in, 0.0);
  EXPECT_EQ(m.historical_average.rmse_out, 0.0);
  EXPECT_GT(m.persistence.rmse_in, 0.0);
}

TEST(Oracles, HistoricalAverageOnPureNoiseMatchesNoiseLevel) {
  SynthConfig c;
  c.daily_amplitude = c.weekly_amplitude = 0.0;
  c.planted = 0;
  const auto w = generate(c);
  const auto ds = dataset_for(w, {{Resolution::hour, 3}, {Resolution::day, 2}, {Resolution::week, 1}});
  const auto m = oracle_metrics(c, w.flows, ds);
  // Per-slot means over n past days add sigma^2 / n; rounding adds 1/12.
  const double n = static_cast<double>(ds.test.front().target) / static_cast<double>(c.slots_per_day);
  const double expected = std::sqrt(c.noise_std * c.noise_std * (1.0 + 1.0 / n) + 1.0 / 12.0);
  EXPECT_NEAR(m.historical_average.rmse_in, expected, 0.05 * expected);
  EXPECT_NEAR(m.historical_average.rmse_out, expected, 0.05 * expected);
  // Persistence sees the noise twice.
  EXPECT_NEAR(m.persistence.rmse_in, std::sqrt(2.0) * c.noise_std, 0.05 * std::sqrt(2.0) * c.noise_std);
}

TEST(Oracles, PersistenceTracksCycleSpeed) {
  auto persistence = [](std::size_t spd) {
    SynthConfig c = quiet(3, 3, 4, spd);
    const auto w = generate(c);
    const auto m = oracle_metrics(c, w.flows, dataset_for(w, {{Resolution::hour, 2}}));
    // A sin sampled at spd points per cycle changes by rms A * sqrt(2) * sin(pi / spd) per step.
    const double drift = c.daily_amplitude * std::sqrt(2.0) * std::sin(std::numbers::pi / static_cast<double>(spd));
    const double expected = std::sqrt(drift * drift + 1.0 / 6.0);
    EXPECT_NEAR(m.persistence.rmse_in, expected, 0.15 * expected) << spd;
    return m.persistence.rmse_in;
  };
  EXPECT_LT(persistence(96), persistence(12));
}

TEST(Synthetic, ValidationErrors) {
  SynthConfig c;
  c.base_rate = 40.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = SynthConfig{};
  c.slots_per_day = 7;
  EXPECT_THROW(c.validate(), ValidationError);
  c = SynthConfig{};
  c.couplings = {{3, 3, 1, 0.5}};
  EXPECT_THROW(c.validate(), ValidationError);
  c.couplings = {{3, 4, 0, 0.5}};
  EXPECT_THROW(c.validate(), ValidationError);
  c.couplings = {{3, 64, 1, 0.5}};
  EXPECT_THROW(c.validate(), ValidationError);
  c = SynthConfig{};
  c.amplitude_scale = {1.0};
  EXPECT_THROW(c.validate(), ValidationError);
  try {
    SynthConfig bad;
    bad.base_rates.assign(64, 100.0);
    bad.base_rates[5] = 50.0;
    bad.validate();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("region 5"), std::string::npos) << e.what();
  }
}
