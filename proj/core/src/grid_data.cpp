#include "stgdn/grid_data.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "stgdn/io.hpp"

namespace stgdn {

std::string_view to_string(Resolution p) {
  switch (p) {
    case Resolution::hour: return "hour";
    case Resolution::day: return "day";
    case Resolution::week: return "week";
  }
  return "?";
}

Resolution parse_resolution(std::string_view s) {
  if (s == "hour" || s == "h") return Resolution::hour;
  if (s == "day" || s == "d") return Resolution::day;
  if (s == "week" || s == "w") return Resolution::week;
  throw ValidationError("unknown resolution '" + std::string(s) + "' (expected hour, day or week)");
}

// ---- RegionGrid ----------------------------------------------------------

RegionGrid::RegionGrid(std::size_t rows, std::size_t cols, LatLonBox bbox) : rows_(rows), cols_(cols), bbox_(bbox) {
  if (rows == 0 || cols == 0) throw ValidationError("grid dimensions must be positive");
  if (!(bbox.lat_max > bbox.lat_min) || !(bbox.lon_max > bbox.lon_min)) {
    throw ValidationError("bounding box must have positive extent");
  }
}

std::size_t RegionGrid::flat(std::size_t i, std::size_t j) const {
  if (i >= rows_ || j >= cols_) throw ValidationError("cell (" + std::to_string(i) + "," + std::to_string(j) + ") outside grid");
  return i * cols_ + j;
}

std::pair<std::size_t, std::size_t> RegionGrid::cell(std::size_t r) const {
  if (r >= size()) throw ValidationError("region id " + std::to_string(r) + " outside grid");
  return {r / cols_, r % cols_};
}

std::optional<std::size_t> RegionGrid::locate(double lat, double lon) const {
  if (!(lat >= bbox_.lat_min && lat <= bbox_.lat_max && lon >= bbox_.lon_min && lon <= bbox_.lon_max)) {
    return std::nullopt;
  }
  const double fi = (lat - bbox_.lat_min) / (bbox_.lat_max - bbox_.lat_min) * static_cast<double>(rows_);
  const double fj = (lon - bbox_.lon_min) / (bbox_.lon_max - bbox_.lon_min) * static_cast<double>(cols_);
  const auto i = std::min(static_cast<std::size_t>(fi), rows_ - 1);
  const auto j = std::min(static_cast<std::size_t>(fj), cols_ - 1);
  return i * cols_ + j;
}

// ---- FlowTensorPair ------------------------------------------------------

std::size_t FlowTensorPair::slots_per_day() const {
  if (slot_minutes == 0 || 1440 % slot_minutes != 0) {
    throw ValidationError("slot duration of " + std::to_string(slot_minutes) + " minutes does not divide a day");
  }
  return 1440 / slot_minutes;
}

void FlowTensorPair::validate(bool allow_negative) const {
  if (inflow.rank() != 3 || inflow.shape() != outflow.shape()) {
    throw ValidationError("flow tensors must share an [I, J, T] shape, got " + inflow.shape_str() + " and " +
                          outflow.shape_str());
  }
  if (rows() == 0 || cols() == 0 || slots() == 0) throw ValidationError("flow tensor has an empty axis");
  if (!allow_negative) {
    for (const Tensor* t : {&inflow, &outflow}) {
      for (double v : t->values()) {
        if (!(v >= 0.0)) throw ValidationError("flow tensor holds a negative or NaN count");
      }
    }
  }
}

FlowTensorPair make_flows(std::size_t rows, std::size_t cols, std::size_t slots, std::uint32_t slot_minutes) {
  FlowTensorPair f;
  f.inflow = Tensor({rows, cols, slots});
  f.outflow = Tensor({rows, cols, slots});
  f.slot_minutes = slot_minutes;
  return f;
}

FlowTensorPair merge_flows(const FlowTensorPair& a, const FlowTensorPair& b) {
  if (a.inflow.shape() != b.inflow.shape() || a.slot_minutes != b.slot_minutes || a.t0 != b.t0) {
    throw ValidationError("cannot merge flow tensors over different grids or time axes");
  }
  FlowTensorPair out = a;
  for (std::size_t i = 0; i < out.inflow.size(); ++i) {
    out.inflow[i] += b.inflow[i];
    out.outflow[i] += b.outflow[i];
  }
  return out;
}

// ---- trajectory ingestion ------------------------------------------------

IngestReport aggregate_trajectories(std::span<const TrajectoryRecord> records, const RegionGrid& grid,
                                    const IngestOptions& options) {
  if (records.empty()) throw ValidationError("no trajectory records");
  if (options.slot_minutes == 0) throw ValidationError("slot duration must be positive");
  const std::int64_t slot_seconds = static_cast<std::int64_t>(options.slot_minutes) * 60;

  IngestReport rep;
  rep.records = records.size();

  // Group by entity, keeping first-appearance order and per-entity record order.
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<const TrajectoryRecord*>> by_entity;
  std::int64_t min_ts = records.front().timestamp, max_ts = records.front().timestamp;
  for (const auto& r : records) {
    auto [it, inserted] = by_entity.try_emplace(r.entity);
    if (inserted) order.push_back(r.entity);
    if (!it->second.empty() && r.timestamp < it->second.back()->timestamp) {
      throw ValidationError("trajectory records of entity '" + r.entity + "' are not sorted by timestamp");
    }
    it->second.push_back(&r);
    min_ts = std::min(min_ts, r.timestamp);
    max_ts = std::max(max_ts, r.timestamp);
  }

  auto floor_div = [](std::int64_t a, std::int64_t b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); };
  const std::int64_t t0 = options.t0 ? *options.t0 : floor_div(min_ts, slot_seconds) * slot_seconds;
  const std::size_t slots =
      options.slots ? *options.slots : static_cast<std::size_t>(std::max<std::int64_t>(0, floor_div(max_ts - t0, slot_seconds) + 1));
  if (slots == 0) throw ValidationError("ingestion window holds no slots");

  rep.flows = make_flows(grid.rows(), grid.cols(), slots, options.slot_minutes);
  rep.flows.t0 = t0;

  struct Point {
    std::size_t cell;
    std::size_t slot;
  };
  std::vector<Point> pts;
  for (const auto& entity : order) {
    pts.clear();
    for (const auto* r : by_entity[entity]) {
      auto cell = grid.locate(r->lat, r->lon);
      if (!cell) {
        ++rep.dropped_out_of_bbox;
        continue;
      }
      const std::int64_t s = floor_div(r->timestamp - t0, slot_seconds);
      if (s < 0 || s >= static_cast<std::int64_t>(slots)) {
        ++rep.dropped_out_of_range;
        continue;
      }
      pts.push_back({*cell, static_cast<std::size_t>(s)});
    }
    for (std::size_t k = 1; k < pts.size(); ++k) {
      const auto& a = pts[k - 1];
      const auto& b = pts[k];
      if (a.cell == b.cell) {
        ++rep.stationary_pairs;
        continue;
      }
      rep.flows.outflow[a.cell * slots + a.slot] += 1.0;
      rep.flows.inflow[b.cell * slots + b.slot] += 1.0;
      ++rep.transitions;
    }
  }
  return rep;
}

std::int64_t parse_iso8601(std::string_view text) {
  const std::string s(io::trim(text));
  auto bad = [&]() -> ValidationError { return ValidationError("malformed ISO-8601 timestamp '" + s + "'"); };
  auto digits = [&](std::size_t pos, std::size_t n) {
    if (pos + n > s.size()) throw bad();
    int v = 0;
    for (std::size_t i = pos; i < pos + n; ++i) {
      if (s[i] < '0' || s[i] > '9') throw bad();
      v = v * 10 + (s[i] - '0');
    }
    return v;
  };
  if (s.size() < 16 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') || s[13] != ':') throw bad();
  const int y = digits(0, 4), mo = digits(5, 2), d = digits(8, 2), h = digits(11, 2), mi = digits(14, 2);
  int sec = 0;
  std::size_t pos = 16;
  if (pos < s.size() && s[pos] == ':') {
    sec = digits(pos + 1, 2);
    pos += 3;
    if (pos < s.size() && s[pos] == '.') {
      ++pos;
      while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
    }
  }
  long offset = 0;
  if (pos < s.size()) {
    if (s[pos] == 'Z' && pos + 1 == s.size()) {
      ++pos;
    } else if ((s[pos] == '+' || s[pos] == '-') && pos + 6 == s.size() && s[pos + 3] == ':') {
      const int sign = s[pos] == '+' ? 1 : -1;
      offset = sign * (digits(pos + 1, 2) * 3600L + digits(pos + 4, 2) * 60L);
      pos += 6;
    } else {
      throw bad();
    }
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 60) throw bad();
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + sec - offset;
}

std::vector<TrajectoryRecord> read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open trajectory file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || io::trim(line) != "entity,timestamp,lat,lon") {
    throw ValidationError(path + ": expected header 'entity,timestamp,lat,lon'");
  }
  std::vector<TrajectoryRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, ',');
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 4) throw ValidationError(where + ": expected 4 fields");
    TrajectoryRecord r;
    r.entity = std::string(io::trim(f[0]));
    try {
      r.timestamp = parse_iso8601(f[1]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    r.lat = io::parse_double(f[2], where + " lat");
    r.lon = io::parse_double(f[3], where + " lon");
    out.push_back(std::move(r));
  }
  return out;
}

// ---- resolution windows --------------------------------------------------

std::size_t resolution_stride(Resolution p, std::size_t slots_per_day) {
  switch (p) {
    case Resolution::hour: return 1;
    case Resolution::day: return slots_per_day;
    case Resolution::week: return 7 * slots_per_day;
  }
  return 1;
}

InsufficientHistory::InsufficientHistory(std::size_t requested, std::size_t earliest)
    : ValidationError("insufficient history for target slot " + std::to_string(requested) +
                      "; earliest admissible slot is " + std::to_string(earliest)),
      earliest_(earliest) {}

WindowPair sample_resolution_series(const FlowTensorPair& flows, std::size_t region, std::size_t t, Resolution p,
                                    std::size_t length) {
  if (length == 0) throw ValidationError("window length must be at least 1");
  if (region >= flows.regions()) throw ValidationError("region id " + std::to_string(region) + " outside grid");
  const std::size_t stride = resolution_stride(p, flows.slots_per_day());
  const std::size_t need = stride * length;
  if (t < need) throw InsufficientHistory(t, need);
  if (t > flows.slots()) throw ValidationError("anchor slot " + std::to_string(t) + " beyond tensor end");

  WindowPair w;
  for (auto* win : {&w.inflow, &w.outflow}) {
    win->region = region;
    win->resolution = p;
    win->anchor = t;
  }
  for (std::size_t k = 0; k < length; ++k) {
    const std::size_t s = t - (length - k) * stride;
    w.inflow.slots.push_back(s);
    w.outflow.slots.push_back(s);
    w.inflow.values.push_back(flows.at(Flow::in, region, s));
    w.outflow.values.push_back(flows.at(Flow::out, region, s));
  }
  return w;
}

// ---- normalization -------------------------------------------------------

std::string_view to_string(NormScheme s) { return s == NormScheme::minmax ? "minmax" : "zscore"; }

NormScheme parse_norm_scheme(std::string_view s) {
  if (s == "minmax") return NormScheme::minmax;
  if (s == "zscore") return NormScheme::zscore;
  throw ValidationError("unknown normalization scheme '" + std::string(s) + "' (expected minmax or zscore)");
}

double NormStats::normalize(Flow f, double x) const {
  const auto k = static_cast<std::size_t>(f);
  if (scheme == NormScheme::minmax) return 2.0 * (x - lo[k]) / (hi[k] - lo[k]) - 1.0;
  return (x - lo[k]) / hi[k];
}

double NormStats::denormalize(Flow f, double y) const {
  const auto k = static_cast<std::size_t>(f);
  if (scheme == NormScheme::minmax) return (y + 1.0) * 0.5 * (hi[k] - lo[k]) + lo[k];
  return y * hi[k] + lo[k];
}

NormStats fit_norm(const FlowTensorPair& flows, NormScheme scheme, std::size_t slot_end) {
  slot_end = std::min(slot_end, flows.slots());
  if (slot_end == 0) throw ValidationError("normalization statistics need at least one slot");
  NormStats st;
  st.scheme = scheme;
  const std::size_t T = flows.slots();
  for (Flow f : {Flow::in, Flow::out}) {
    const auto k = static_cast<std::size_t>(f);
    const Tensor& x = flows.flow(f);
    double mn = x[0], mx = x[0], sum = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < flows.regions(); ++r) {
      for (std::size_t t = 0; t < slot_end; ++t) {
        const double v = x[r * T + t];
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        sum += v;
        ++n;
      }
    }
    const char* name = f == Flow::in ? "inflow" : "outflow";
    if (scheme == NormScheme::minmax) {
      if (!(mx > mn)) throw ValidationError(std::string("cannot min-max normalize constant ") + name);
      st.lo[k] = mn;
      st.hi[k] = mx;
    } else {
      const double mu = sum / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t r = 0; r < flows.regions(); ++r)
        for (std::size_t t = 0; t < slot_end; ++t) ss += (x[r * T + t] - mu) * (x[r * T + t] - mu);
      const double sd = std::sqrt(ss / static_cast<double>(n));
      if (!(sd > 0.0)) throw ValidationError(std::string("cannot z-score normalize ") + name + ": zero variance");
      st.lo[k] = mu;
      st.hi[k] = sd;
    }
  }
  return st;
}

FlowTensorPair apply_norm(const FlowTensorPair& flows, const NormStats& stats) {
  FlowTensorPair out = flows;
  for (auto& v : out.inflow.values()) v = stats.normalize(Flow::in, v);
  for (auto& v : out.outflow.values()) v = stats.normalize(Flow::out, v);
  return out;
}

FlowTensorPair invert_norm(const FlowTensorPair& flows, const NormStats& stats) {
  FlowTensorPair out = flows;
  for (auto& v : out.inflow.values()) v = stats.denormalize(Flow::in, v);
  for (auto& v : out.outflow.values()) v = stats.denormalize(Flow::out, v);
  return out;
}

std::pair<FlowTensorPair, NormStats> normalize(const FlowTensorPair& flows, NormScheme scheme) {
  NormStats st = fit_norm(flows, scheme, flows.slots());
  return {apply_norm(flows, st), st};
}

// ---- external factors ----------------------------------------------------

const std::vector<std::string>& weather_vocabulary() {
  static const std::vector<std::string> vocab = {"sunny", "cloudy", "rainy", "snowy", "foggy", "stormy"};
  return vocab;
}

int unknown_weather_index() { return static_cast<int>(weather_vocabulary().size()); }

int weather_index(std::string_view name, std::size_t* unknown) {
  const auto& v = weather_vocabulary();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == name) return static_cast<int>(i);
  }
  if (unknown) ++*unknown;
  return unknown_weather_index();
}

void ExternalRecord::validate() const {
  if (!(temperature_c >= -60.0 && temperature_c <= 60.0)) {
    throw ValidationError("slot " + std::to_string(slot) + ": temperature outside [-60, 60] C");
  }
  if (!(wind_mph >= 0.0)) throw ValidationError("slot " + std::to_string(slot) + ": negative wind speed");
  if (weather < 0 || weather > unknown_weather_index()) {
    throw ValidationError("slot " + std::to_string(slot) + ": weather code outside vocabulary");
  }
}

std::vector<ExternalRecord> read_externals_csv(const std::string& path, std::size_t* unknown_weather) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open external-factor file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || io::trim(line) != "slot,weather,temp_c,wind_mph,holiday") {
    throw ValidationError(path + ": expected header 'slot,weather,temp_c,wind_mph,holiday'");
  }
  std::vector<ExternalRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, ',');
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 5) throw ValidationError(where + ": expected 5 fields");
    ExternalRecord r;
    const auto slot = io::parse_int(f[0], where + " slot");
    if (slot < 0) throw ValidationError(where + ": negative slot");
    r.slot = static_cast<std::size_t>(slot);
    r.weather = weather_index(io::trim(f[1]), unknown_weather);
    r.temperature_c = io::parse_double(f[2], where + " temp_c");
    r.wind_mph = io::parse_double(f[3], where + " wind_mph");
    const auto hol = io::parse_int(f[4], where + " holiday");
    if (hol != 0 && hol != 1) throw ValidationError(where + ": holiday must be 0 or 1");
    r.holiday = hol == 1;
    try {
      r.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    out.push_back(r);
  }
  return out;
}

void write_externals_csv(const std::string& path, std::span<const ExternalRecord> records) {
  std::ostringstream os;
  os.precision(17);
  os << "slot,weather,temp_c,wind_mph,holiday\n";
  const auto& vocab = weather_vocabulary();
  for (const auto& r : records) {
    const std::string name =
        r.weather >= 0 && r.weather < static_cast<int>(vocab.size()) ? vocab[static_cast<std::size_t>(r.weather)] : "unknown";
    os << r.slot << ',' << name << ',' << r.temperature_c << ',' << r.wind_mph << ',' << (r.holiday ? 1 : 0) << '\n';
  }
  io::write_file_atomic(path, os.str());
}

double ExternalScaling::scale_temperature(double c) const {
  if (!(temp_max > temp_min)) return 0.0;
  return 2.0 * (c - temp_min) / (temp_max - temp_min) - 1.0;
}

double ExternalScaling::scale_wind(double mph) const {
  if (!(wind_max > wind_min)) return 0.0;
  return 2.0 * (mph - wind_min) / (wind_max - wind_min) - 1.0;
}

Tensor volume_profiles(const FlowTensorPair& flows, std::size_t slot_end) {
  const std::size_t spd = flows.slots_per_day();
  const std::size_t T = flows.slots();
  slot_end = std::min(slot_end, T);
  Tensor prof({flows.regions(), 2 * spd});
  std::vector<double> count(spd, 0.0);
  for (std::size_t t = 0; t < slot_end; ++t) count[t % spd] += 1.0;
  for (std::size_t r = 0; r < flows.regions(); ++r) {
    for (std::size_t t = 0; t < slot_end; ++t) {
      prof.at(r, t % spd) += flows.inflow[r * T + t];
      prof.at(r, spd + t % spd) += flows.outflow[r * T + t];
    }
    for (std::size_t s = 0; s < spd; ++s) {
      if (count[s] > 0.0) {
        prof.at(r, s) /= count[s];
        prof.at(r, spd + s) /= count[s];
      }
    }
  }
  return prof;
}

// ---- dataset assembly ----------------------------------------------------

void validate_resolutions(std::span<const ResolutionSpec> specs) {
  if (specs.empty()) throw ValidationError("at least one resolution must be enabled");
  bool seen[3] = {false, false, false};
  for (const auto& s : specs) {
    const auto k = static_cast<std::size_t>(s.resolution);
    if (seen[k]) throw ValidationError("resolution '" + std::string(to_string(s.resolution)) + "' listed twice");
    seen[k] = true;
    const std::size_t max_len = s.resolution == Resolution::day ? 5 : 6;
    if (s.length < 1 || s.length > max_len) {
      throw ValidationError("length " + std::to_string(s.length) + " for resolution '" +
                            std::string(to_string(s.resolution)) + "' outside [1, " + std::to_string(max_len) + "]");
    }
  }
}

std::string format_resolutions(std::span<const ResolutionSpec> specs) {
  std::string out;
  for (const auto& s : specs) {
    if (!out.empty()) out += ',';
    out += std::string(to_string(s.resolution)) + ":" + std::to_string(s.length);
  }
  return out;
}

std::vector<ResolutionSpec> parse_resolutions(std::string_view text) {
  std::vector<ResolutionSpec> out;
  for (const auto& item : io::split(text, ',')) {
    const auto kv = io::split(io::trim(item), ':');
    if (kv.size() != 2) throw ValidationError("resolution entry '" + item + "' is not of the form name:length");
    const auto len = io::parse_int(kv[1], "resolution length");
    if (len < 0) throw ValidationError("negative resolution length");
    out.push_back({parse_resolution(io::trim(kv[0])), static_cast<std::size_t>(len)});
  }
  validate_resolutions(out);
  return out;
}

std::size_t first_admissible_slot(std::span<const ResolutionSpec> specs, std::size_t slots_per_day) {
  std::size_t t = 0;
  for (const auto& s : specs) t = std::max(t, resolution_stride(s.resolution, slots_per_day) * s.length);
  return t;
}

Dataset make_dataset(const FlowTensorPair& flows, std::span<const ExternalRecord> externals,
                     const DatasetOptions& options) {
  flows.validate();
  validate_resolutions(options.resolutions);
  if (!(options.split > 0.0 && options.split < 1.0)) throw ValidationError("split ratio must lie in (0, 1)");

  const std::size_t spd = flows.slots_per_day();
  const std::size_t first = first_admissible_slot(options.resolutions, spd);
  if (first >= flows.slots()) {
    throw ValidationError("no admissible target slot: history of " + std::to_string(first) + " slots needed, tensor has " +
                          std::to_string(flows.slots()));
  }
  const std::size_t n = flows.slots() - first;
  const auto n_train = static_cast<std::size_t>(std::floor(options.split * static_cast<double>(n)));

  std::map<std::size_t, const ExternalRecord*> ext_by_slot;
  for (const auto& r : externals) ext_by_slot[r.slot] = &r;
  auto external_at = [&](std::size_t t) {
    if (externals.empty()) {
      ExternalRecord neutral;
      neutral.slot = t;
      return neutral;
    }
    auto it = ext_by_slot.find(t);
    if (it == ext_by_slot.end()) throw ValidationError("no external record for target slot " + std::to_string(t));
    return *it->second;
  };

  Dataset ds;
  ds.resolutions = options.resolutions;
  ds.grid_rows = flows.rows();
  ds.grid_cols = flows.cols();
  ds.slots_per_day = spd;

  const std::size_t stats_end = n_train > 0 ? first + n_train : first;
  ds.norm = fit_norm(flows, options.scheme, stats_end);
  const FlowTensorPair normed = apply_norm(flows, ds.norm);
  ds.profiles = volume_profiles(flows, stats_end);

  if (!externals.empty()) {
    bool init = false;
    for (std::size_t t = first; t < stats_end; ++t) {
      const auto r = external_at(t);
      if (!init) {
        ds.external_scaling = {r.temperature_c, r.temperature_c, r.wind_mph, r.wind_mph};
        init = true;
      }
      auto& sc = ds.external_scaling;
      sc.temp_min = std::min(sc.temp_min, r.temperature_c);
      sc.temp_max = std::max(sc.temp_max, r.temperature_c);
      sc.wind_min = std::min(sc.wind_min, r.wind_mph);
      sc.wind_max = std::max(sc.wind_max, r.wind_mph);
    }
  }

  const std::size_t R = flows.regions();
  const std::size_t T = flows.slots();
  for (std::size_t t = first; t < T; ++t) {
    TrainingExample ex;
    ex.target = t;
    for (const auto& spec : options.resolutions) {
      const std::size_t stride = resolution_stride(spec.resolution, spd);
      ExampleWindows w{Tensor({R, spec.length}), Tensor({R, spec.length})};
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t k = 0; k < spec.length; ++k) {
          const std::size_t s = t - (spec.length - k) * stride;
          w.inflow.at(r, k) = normed.inflow[r * T + s];
          w.outflow.at(r, k) = normed.outflow[r * T + s];
        }
      }
      ex.windows.push_back(std::move(w));
    }
    ex.external = external_at(t);
    ex.external.validate();
    ex.features.weather = ex.external.weather;
    ex.features.temperature = ds.external_scaling.scale_temperature(ex.external.temperature_c);
    ex.features.wind = ds.external_scaling.scale_wind(ex.external.wind_mph);
    ex.features.holiday = ex.external.holiday ? 1.0 : 0.0;
    ex.truth = Tensor({R, 2});
    for (std::size_t r = 0; r < R; ++r) {
      ex.truth.at(r, 0) = normed.inflow[r * T + t];
      ex.truth.at(r, 1) = normed.outflow[r * T + t];
    }
    if (t - first < n_train) {
      ds.train.push_back(std::move(ex));
    } else {
      ds.test.push_back(std::move(ex));
    }
  }
  return ds;
}

// ---- tensor files --------------------------------------------------------

namespace {
constexpr std::string_view kTensorMagic = "STGDNTEN";
}

void save_tensor(const std::string& path, const FlowTensorPair& flows, int float_width) {
  if (float_width != 4 && float_width != 8) throw ValidationError("float width must be 4 or 8");
  flows.validate(true);
  io::ByteWriter w;
  w.bytes(kTensorMagic);
  w.u32(static_cast<std::uint32_t>(flows.rows()));
  w.u32(static_cast<std::uint32_t>(flows.cols()));
  w.u32(static_cast<std::uint32_t>(flows.slots()));
  w.u32(flows.slot_minutes);
  w.u8(static_cast<std::uint8_t>(float_width));
  for (const Tensor* t : {&flows.inflow, &flows.outflow}) {
    for (double v : t->values()) {
      if (float_width == 8) {
        w.f64(v);
      } else {
        w.f32(static_cast<float>(v));
      }
    }
  }
  io::write_file_atomic(path, w.str());
}

FlowTensorPair load_tensor(const std::string& path) {
  const std::string data = io::read_file(path);
  io::ByteReader r(data, path);
  if (data.size() < kTensorMagic.size() || r.bytes(kTensorMagic.size()) != kTensorMagic) {
    throw ValidationError(path + ": not a flow tensor file (bad magic)");
  }
  const std::size_t I = r.u32(), J = r.u32(), T = r.u32();
  const std::uint32_t minutes = r.u32();
  const int width = r.u8();
  if (width != 4 && width != 8) throw ValidationError(path + ": unsupported float width " + std::to_string(width));
  const std::size_t n = I * J * T;
  if (r.remaining() != 2 * n * static_cast<std::size_t>(width)) {
    throw ValidationError(path + ": shape mismatch: header declares " + shape_to_string({I, J, T}) + " x 2 values of " +
                          std::to_string(width) + " bytes, file holds " + std::to_string(r.remaining()) + " payload bytes");
  }
  FlowTensorPair f = make_flows(I, J, T, minutes);
  for (Tensor* t : {&f.inflow, &f.outflow}) {
    for (auto& v : t->values()) v = width == 8 ? r.f64() : static_cast<double>(r.f32());
  }
  return f;
}

}  // namespace stgdn
