#include "stgdn/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "stgdn/io.hpp"

namespace stgdn {

namespace {

std::string num(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string num(std::size_t x) { return std::to_string(x); }

std::size_t to_size(std::string_view v, const std::string& key) {
  const auto x = io::parse_int(v, key);
  if (x < 0) throw ValidationError(key + ": must be >= 0, got " + std::string(v));
  return static_cast<std::size_t>(x);
}

bool to_bool(std::string_view v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError(key + ": expected true or false, got '" + std::string(v) + "'");
}

std::string list(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + num(xs[i]);
  return s;
}

std::vector<double> to_list(std::string_view v, const std::string& key) {
  std::vector<double> out;
  if (io::trim(v).empty()) return out;
  for (const auto& f : io::split(v, ',')) out.push_back(io::parse_double(io::trim(f), key));
  return out;
}

template <class C>
struct Entry {
  std::string key;
  std::string help;
  std::function<std::string(const C&)> get;
  std::function<void(C&, std::string_view, const std::string&)> set;
};

template <class C, class T>
Entry<C> size_entry(std::string key, std::string help, T C::*member) {
  return {key, help, [member](const C& c) { return num(static_cast<std::size_t>(c.*member)); },
          [member](C& c, std::string_view v, const std::string& k) { c.*member = static_cast<T>(to_size(v, k)); }};
}

template <class C>
Entry<C> double_entry(std::string key, std::string help, double C::*member) {
  return {key, help, [member](const C& c) { return num(c.*member); },
          [member](C& c, std::string_view v, const std::string& k) { c.*member = io::parse_double(v, k); }};
}

template <class C>
Entry<C> bool_entry(std::string key, std::string help, bool C::*member) {
  return {key, help, [member](const C& c) { return std::string(c.*member ? "true" : "false"); },
          [member](C& c, std::string_view v, const std::string& k) { c.*member = to_bool(v, k); }};
}

const std::vector<Entry<SynthConfig>>& synth_entries() {
  using S = SynthConfig;
  static const std::vector<Entry<S>> entries = {
      size_entry("rows", "grid rows I", &S::rows),
      size_entry("cols", "grid columns J", &S::cols),
      size_entry("days", "length of the generated series in days", &S::days),
      size_entry("slots_per_day", "time slots per day", &S::slots_per_day),
      double_entry("base_rate", "mean base volume per slot", &S::base_rate),
      double_entry("base_spread", "relative spread of per-region base rates", &S::base_spread),
      double_entry("daily_amplitude", "amplitude of the daily cycle", &S::daily_amplitude),
      double_entry("weekly_amplitude", "amplitude of the weekly cycle", &S::weekly_amplitude),
      double_entry("noise_std", "Gaussian noise standard deviation", &S::noise_std),
      double_entry("phase_step", "daily phase increment per cell along i+j", &S::phase_step),
      double_entry("phase_jitter", "uniform jitter on the daily phase", &S::phase_jitter),
      size_entry("planted", "number of derived couplings when couplings is empty", &S::planted),
      double_entry("planted_gain", "gain of derived couplings", &S::planted_gain),
      {"couplings", "explicit couplings src:dst:lag:gain, comma separated",
       [](const S& s) { return format_couplings(s.couplings); },
       [](S& s, std::string_view v, const std::string&) { s.couplings = parse_couplings(v); }},
      {"base_rates", "explicit per-region base rates, comma separated",
       [](const S& s) { return list(s.base_rates); },
       [](S& s, std::string_view v, const std::string& k) { s.base_rates = to_list(v, k); }},
      {"amplitude_scale", "per-region multiplier on both amplitudes, comma separated",
       [](const S& s) { return list(s.amplitude_scale); },
       [](S& s, std::string_view v, const std::string& k) { s.amplitude_scale = to_list(v, k); }},
      size_entry("seed", "generator seed", &S::seed),
  };
  return entries;
}

template <class C, class Sub>
Entry<C> nest(const std::string& prefix, Sub C::*member, const Entry<Sub>& e) {
  return {prefix + e.key, e.help, [member, g = e.get](const C& c) { return g(c.*member); },
          [member, s = e.set](C& c, std::string_view v, const std::string& k) { s(c.*member, v, k); }};
}

const std::vector<Entry<RunConfig>>& run_entries() {
  using R = RunConfig;
  static const std::vector<Entry<R>> entries = [] {
    std::vector<Entry<R>> e;
    auto model = [&e](const Entry<ModelConfig>& x) { e.push_back(nest("", &R::model, x)); };
    auto train = [&e](const Entry<TrainConfig>& x) { e.push_back(nest("", &R::train, x)); };
    using M = ModelConfig;
    using T = TrainConfig;
    model({"resolutions", "enabled resolutions and window lengths",
           [](const M& m) { return format_resolutions(m.resolutions); },
           [](M& m, std::string_view v, const std::string&) { m.resolutions = parse_resolutions(v); }});
    model(size_entry("d", "embedding width", &M::d));
    model(size_entry("layers", "graph attention layers L", &M::layers));
    model(size_entry("heads", "attention heads H (must divide d)", &M::heads));
    model(size_entry("k_nbr", "geographic block size of the spatial graph (perfect square)", &M::k_nbr));
    model(size_entry("k_diff", "diffusion order", &M::k_diff));
    model(size_entry("q_out", "diffusion output channels", &M::q_out));
    model(size_entry("d_e", "external factor embedding width", &M::d_e));
    model(size_entry("head_hidden", "hidden width of the prediction head", &M::head_hidden));
    model(size_entry("m_dep", "attention partners added to the spatial graph per region", &M::m_dep));
    model(double_entry("slope", "LeakyReLU negative slope", &M::slope));
    model(double_entry("length_scale", "Gaussian kernel width of spatial edge weights, in cells", &M::length_scale));
    model({"pooling", "temporal pooling: last or mean", [](const M& m) { return std::string(to_string(m.pooling)); },
           [](M& m, std::string_view v, const std::string&) { m.pooling = parse_pooling(v); }});
    model({"edge_policy", "attention graph: auto, full or knn:M",
           [](const M& m) { return format_policy(m.edge_policy); },
           [](M& m, std::string_view v, const std::string&) { m.edge_policy = parse_policy(v); }});
    model(bool_entry("graph_attention", "enable the graph attention stage", &M::use_graph_attention));
    model(bool_entry("diffusion", "enable the diffusion stage", &M::use_diffusion));
    model(bool_entry("externals", "enable external factors", &M::use_externals));
    model(bool_entry("include_input", "add the attention input to the layer-sum readout", &M::include_input));
    model(size_entry("omega_sample", "examples averaged when ranking attention partners", &M::omega_sample));
    model({"norm", "normalization: minmax or zscore", [](const M& m) { return std::string(to_string(m.scheme)); },
           [](M& m, std::string_view v, const std::string&) { m.scheme = parse_norm_scheme(v); }});
    e.push_back(double_entry("split", "chronological train fraction", &R::split));
    train(size_entry("epochs", "maximum training epochs", &T::epochs));
    train(size_entry("batch", "mini-batch size", &T::batch));
    train(double_entry("lr", "Adam learning rate", &T::lr));
    train(double_entry("beta1", "Adam first-moment decay", &T::beta1));
    train(double_entry("beta2", "Adam second-moment decay", &T::beta2));
    train(double_entry("adam_eps", "Adam epsilon", &T::adam_eps));
    train(double_entry("lambda", "inflow weight of the joint loss", &T::lambda));
    train(size_entry("seed", "initialization and shuffling seed", &T::seed));
    train(size_entry("patience", "epochs without validation improvement before stopping", &T::patience));
    train(double_entry("clip_norm", "global gradient norm clip, 0 disables", &T::clip_norm));
    train(double_entry("val_fraction", "trailing fraction of the train split used for validation", &T::val_fraction));
    train(size_entry("threads", "worker threads per batch", &T::threads));
    e.push_back(double_entry("mape_floor", "truth values below this are excluded from MAPE", &R::mape_floor));
    e.push_back({"data", "data directory", [](const R& r) { return r.data; },
                 [](R& r, std::string_view v, const std::string&) { r.data = std::string(v); }});
    e.push_back({"checkpoint", "checkpoint path", [](const R& r) { return r.checkpoint; },
                 [](R& r, std::string_view v, const std::string&) { r.checkpoint = std::string(v); }});
    e.push_back({"spatial_edges", "src,dst,weight file used instead of the built spatial graph",
                 [](const R& r) { return r.spatial_edges; },
                 [](R& r, std::string_view v, const std::string&) { r.spatial_edges = std::string(v); }});
    for (const auto& s : synth_entries()) e.push_back(nest("synth.", &R::synth, s));
    return e;
  }();
  return entries;
}

template <class C>
std::string format_entries(const C& c, const std::vector<Entry<C>>& entries) {
  std::ostringstream os;
  for (const auto& e : entries) os << "# " << e.help << "\n" << e.key << " = " << e.get(c) << "\n";
  return os.str();
}

template <class C>
void set_entry(C& c, const std::vector<Entry<C>>& entries, std::string_view key, std::string_view value) {
  for (const auto& e : entries) {
    if (e.key == key) {
      e.set(c, io::trim(value), e.key);
      return;
    }
  }
  throw ValidationError("unknown config key '" + std::string(key) + "'");
}

template <class C>
C parse_entries(std::string_view text, const std::string& origin, const std::vector<Entry<C>>& entries) {
  C c;
  std::size_t lineno = 0;
  for (const auto& raw : io::split(text, '\n')) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = io::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string_view::npos) throw ValidationError(where + ": expected key = value");
    try {
      set_entry(c, entries, io::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return c;
}

}  // namespace

std::string format_config(const RunConfig& config) { return format_entries(config, run_entries()); }

RunConfig parse_config(std::string_view text, const std::string& origin) {
  return parse_entries(text, origin, run_entries());
}

RunConfig load_config(const std::string& path) { return parse_config(io::read_file(path), path); }

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  set_entry(config, run_entries(), key, value);
}

DatasetOptions dataset_options(const RunConfig& config) {
  DatasetOptions o;
  o.resolutions = config.model.resolutions;
  o.split = config.split;
  o.scheme = config.model.scheme;
  return o;
}

std::string format_synth_config(const SynthConfig& synth) { return format_entries(synth, synth_entries()); }

SynthConfig parse_synth_config(std::string_view text, const std::string& origin) {
  return parse_entries(text, origin, synth_entries());
}

}  // namespace stgdn
