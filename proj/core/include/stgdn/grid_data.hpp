#pragma once

// Grid partitioning, flow tensors, resolution-aware windows, normalization
// and training-example assembly.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stgdn/error.hpp"
#include "stgdn/tensor.hpp"

namespace stgdn {

enum class Flow : std::size_t { in = 0, out = 1 };

enum class Resolution { hour, day, week };

std::string_view to_string(Resolution p);
Resolution parse_resolution(std::string_view s);

struct LatLonBox {
  double lat_min = 0.0;
  double lat_max = 1.0;
  double lon_min = 0.0;
  double lon_max = 1.0;
};

// I x J partition of a bounding box. Row index grows with latitude, column
// index with longitude. Flat id r = i * J + j.
class RegionGrid {
 public:
  RegionGrid(std::size_t rows, std::size_t cols, LatLonBox bbox = {});

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return rows_ * cols_; }
  const LatLonBox& bbox() const { return bbox_; }

  std::size_t flat(std::size_t i, std::size_t j) const;
  std::pair<std::size_t, std::size_t> cell(std::size_t r) const;
  // Cell containing (lat, lon); nullopt outside the box. The max edges
  // belong to the last row/column.
  std::optional<std::size_t> locate(double lat, double lon) const;

 private:
  std::size_t rows_;
  std::size_t cols_;
  LatLonBox bbox_;
};

// Inflow and outflow counts, each [I, J, T] row-major over (i, j, t).
struct FlowTensorPair {
  Tensor inflow;
  Tensor outflow;
  std::uint32_t slot_minutes = 30;
  std::int64_t t0 = 0;

  std::size_t rows() const { return inflow.dim(0); }
  std::size_t cols() const { return inflow.dim(1); }
  std::size_t slots() const { return inflow.dim(2); }
  std::size_t regions() const { return rows() * cols(); }
  std::size_t slots_per_day() const;

  const Tensor& flow(Flow f) const { return f == Flow::in ? inflow : outflow; }
  double at(Flow f, std::size_t region, std::size_t t) const { return flow(f)[region * slots() + t]; }

  // Throws ValidationError unless shapes match, T >= 1 and entries >= 0.
  void validate(bool allow_negative = false) const;
};

FlowTensorPair make_flows(std::size_t rows, std::size_t cols, std::size_t slots, std::uint32_t slot_minutes);

// Elementwise sum of partial tensors over the same grid and time axis.
FlowTensorPair merge_flows(const FlowTensorPair& a, const FlowTensorPair& b);

// ---- trajectory ingestion ------------------------------------------------

struct TrajectoryRecord {
  std::string entity;
  std::int64_t timestamp = 0;  // seconds since the Unix epoch
  double lat = 0.0;
  double lon = 0.0;
};

struct IngestOptions {
  std::uint32_t slot_minutes = 30;
  // Epoch second of slot 0; defaults to the earliest timestamp floored to a
  // slot boundary.
  std::optional<std::int64_t> t0;
  // Number of slots; defaults to one past the last occupied slot.
  std::optional<std::size_t> slots;
};

struct IngestReport {
  FlowTensorPair flows;
  std::size_t records = 0;
  std::size_t dropped_out_of_bbox = 0;
  std::size_t dropped_out_of_range = 0;
  std::size_t stationary_pairs = 0;
  std::size_t transitions = 0;
};

// Each consecutive pair of one entity's points in cells a -> b (a != b) adds
// one to outflow[a, slot(first)] and one to inflow[b, slot(second)].
IngestReport aggregate_trajectories(std::span<const TrajectoryRecord> records, const RegionGrid& grid,
                                    const IngestOptions& options);

// "YYYY-MM-DD[T ]hh:mm[:ss[.fff]][Z|+hh:mm|-hh:mm]" -> epoch seconds.
std::int64_t parse_iso8601(std::string_view text);
std::vector<TrajectoryRecord> read_trajectory_csv(const std::string& path);

// ---- resolution windows --------------------------------------------------

std::size_t resolution_stride(Resolution p, std::size_t slots_per_day);

class InsufficientHistory : public ValidationError {
 public:
  InsufficientHistory(std::size_t requested, std::size_t earliest);
  std::size_t earliest() const { return earliest_; }

 private:
  std::size_t earliest_;
};

struct ResolutionWindow {
  std::size_t region = 0;
  Resolution resolution = Resolution::hour;
  std::size_t anchor = 0;
  std::vector<std::size_t> slots;  // sampled slot indices, oldest first
  std::vector<double> values;
};

struct WindowPair {
  ResolutionWindow inflow;
  ResolutionWindow outflow;
};

// values[k] = volume at t - (length - k) * stride(p), k in [0, length).
WindowPair sample_resolution_series(const FlowTensorPair& flows, std::size_t region, std::size_t t, Resolution p,
                                    std::size_t length);

// ---- normalization -------------------------------------------------------

enum class NormScheme { minmax, zscore };

std::string_view to_string(NormScheme s);
NormScheme parse_norm_scheme(std::string_view s);

// minmax: (lo, hi) = (min, max), maps to [-1, 1]. zscore: (lo, hi) = (mean, std).
struct NormStats {
  NormScheme scheme = NormScheme::minmax;
  double lo[2] = {0.0, 0.0};
  double hi[2] = {1.0, 1.0};

  double normalize(Flow f, double x) const;
  double denormalize(Flow f, double y) const;
};

// Statistics over slots [0, slot_end) of each flow direction.
NormStats fit_norm(const FlowTensorPair& flows, NormScheme scheme, std::size_t slot_end);
FlowTensorPair apply_norm(const FlowTensorPair& flows, const NormStats& stats);
FlowTensorPair invert_norm(const FlowTensorPair& flows, const NormStats& stats);
// Fits on the whole tensor.
std::pair<FlowTensorPair, NormStats> normalize(const FlowTensorPair& flows, NormScheme scheme);

// ---- external factors ----------------------------------------------------

// Declared weather vocabulary; index weather_vocabulary().size() is the
// reserved slot for codes outside it.
const std::vector<std::string>& weather_vocabulary();
int unknown_weather_index();
// Vocabulary index of `name`, or the reserved index (counted in *unknown).
int weather_index(std::string_view name, std::size_t* unknown = nullptr);

struct ExternalRecord {
  std::size_t slot = 0;
  int weather = 0;
  double temperature_c = 0.0;
  double wind_mph = 0.0;
  bool holiday = false;

  void validate() const;
};

std::vector<ExternalRecord> read_externals_csv(const std::string& path, std::size_t* unknown_weather = nullptr);
void write_externals_csv(const std::string& path, std::span<const ExternalRecord> records);

// Min-max scaling of temperature and wind to [-1, 1]. A constant feature
// scales to 0.
struct ExternalScaling {
  double temp_min = 0.0, temp_max = 0.0;
  double wind_min = 0.0, wind_max = 0.0;

  double scale_temperature(double c) const;
  double scale_wind(double mph) const;
};

struct ExternalFeatures {
  int weather = 0;
  double temperature = 0.0;  // scaled
  double wind = 0.0;         // scaled
  double holiday = 0.0;
};

// Per-region historical profile: mean inflow and outflow at each time of day
// over slots [0, slot_end). Shape [regions x 2*slots_per_day].
Tensor volume_profiles(const FlowTensorPair& flows, std::size_t slot_end);

// ---- dataset assembly ----------------------------------------------------

struct ResolutionSpec {
  Resolution resolution = Resolution::hour;
  std::size_t length = 1;
};

// Admissible lengths: hour 1..6, day 1..5, week 1..6.
void validate_resolutions(std::span<const ResolutionSpec> specs);
std::string format_resolutions(std::span<const ResolutionSpec> specs);
std::vector<ResolutionSpec> parse_resolutions(std::string_view text);  // "hour:3,day:2"

// Smallest target slot with enough history for every enabled resolution.
std::size_t first_admissible_slot(std::span<const ResolutionSpec> specs, std::size_t slots_per_day);

struct ExampleWindows {
  Tensor inflow;   // [regions x T_p], normalized
  Tensor outflow;  // [regions x T_p], normalized
};

struct TrainingExample {
  std::size_t target = 0;
  std::vector<ExampleWindows> windows;  // aligned with Dataset::resolutions
  ExternalRecord external;
  ExternalFeatures features;
  Tensor truth;  // [regions x 2] normalized (inflow, outflow)
};

struct DatasetOptions {
  std::vector<ResolutionSpec> resolutions = {{Resolution::hour, 3}, {Resolution::day, 2}, {Resolution::week, 1}};
  double split = 0.8;
  NormScheme scheme = NormScheme::minmax;
};

struct Dataset {
  std::vector<ResolutionSpec> resolutions;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::size_t slots_per_day = 0;
  NormStats norm;
  ExternalScaling external_scaling;
  Tensor profiles;  // volume_profiles over the statistics window
  std::vector<TrainingExample> train;
  std::vector<TrainingExample> test;

  std::size_t regions() const { return grid_rows * grid_cols; }
};

// One example per admissible target slot, split chronologically. Norm and
// external scaling statistics come from slots up to the last train target.
// `externals` may be empty (neutral factors) or must cover every target slot.
Dataset make_dataset(const FlowTensorPair& flows, std::span<const ExternalRecord> externals,
                     const DatasetOptions& options);

// ---- tensor files --------------------------------------------------------

// Little-endian: "STGDNTEN", u32 I, J, T, slot minutes, u8 float width (4|8),
// inflow (i, j, t) row-major, then outflow.
void save_tensor(const std::string& path, const FlowTensorPair& flows, int float_width = 8);
FlowTensorPair load_tensor(const std::string& path);

}  // namespace stgdn
