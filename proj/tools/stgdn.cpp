// stgdn: synth / ingest / train / eval / predict / gradcheck.
//
// Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "stgdn/config.hpp"
#include "stgdn/io.hpp"

namespace fs = std::filesystem;
using namespace stgdn;

namespace {

constexpr const char* kFlowsFile = "flows.bin";
constexpr const char* kExternalsFile = "externals.csv";
constexpr const char* kSynthFile = "synth.cfg";

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  long long seed = -1;
  std::size_t threads = 0;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, io::trim(std::string_view(kv).substr(0, eq)), std::string_view(kv).substr(eq + 1));
  }
  if (c.seed >= 0) {
    cfg.train.seed = static_cast<std::uint64_t>(c.seed);
    cfg.synth.seed = static_cast<std::uint64_t>(c.seed);
  }
  if (const char* env = std::getenv("STGDN_THREADS"); env && *env) {
    cfg.train.threads = static_cast<std::size_t>(std::max(1LL, io::parse_int(env, "STGDN_THREADS")));
  }
  if (c.threads > 0) cfg.train.threads = c.threads;
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
}

struct LoadedData {
  FlowTensorPair flows;
  std::vector<ExternalRecord> externals;
  std::optional<SynthConfig> synth;
  Dataset dataset;
};

LoadedData load_data(const std::string& dir, const RunConfig& cfg) {
  if (dir.empty()) throw ValidationError("no data directory given (--data or data = ...)");
  LoadedData d;
  const fs::path root(dir);
  if (!fs::exists(root / kFlowsFile)) throw ValidationError("data directory '" + dir + "' has no " + kFlowsFile);
  d.flows = load_tensor((root / kFlowsFile).string());
  if (fs::exists(root / kExternalsFile)) {
    std::size_t unknown = 0;
    d.externals = read_externals_csv((root / kExternalsFile).string(), &unknown);
    if (unknown) std::cerr << "note: " << unknown << " unknown weather codes mapped to the reserved index\n";
  }
  if (fs::exists(root / kSynthFile)) {
    const auto p = (root / kSynthFile).string();
    d.synth = parse_synth_config(io::read_file(p), p);
  }
  d.dataset = make_dataset(d.flows, d.externals, dataset_options(cfg));
  return d;
}

ModelConfig model_config(const RunConfig& cfg, const Dataset& ds) {
  ModelConfig m = cfg.model;
  m.rows = ds.grid_rows;
  m.cols = ds.grid_cols;
  m.validate();
  return m;
}

void apply_spatial_edges(const RunConfig& cfg, Model& model) {
  if (cfg.spatial_edges.empty()) return;
  const std::size_t n = model.config().rows * model.config().cols;
  model.set_spatial_graph(SpatialGraph(n, read_spatial_edges(cfg.spatial_edges)));
}

// Model with the spatial graph rebuilt for the checkpoint's parameters.
Model restore_model(const RunConfig& cfg, const LoadedData& data, const Checkpoint& ckpt) {
  const ModelConfig mc = model_config(cfg, data.dataset);
  check_checkpoint(ckpt, mc);
  Model model(mc, data.dataset.profiles);
  apply_spatial_edges(cfg, model);
  auto [fit, val] = split_validation(data.dataset, cfg.train.val_fraction);
  model.refresh_spatial_graph(ckpt.params, fit);
  return model;
}

std::string error_grid(const std::vector<Forecast>& forecasts, std::size_t rows, std::size_t cols) {
  std::vector<double> sq(rows * cols, 0.0);
  for (const auto& f : forecasts) {
    const Tensor v = f.denormalized();
    for (std::size_t r = 0; r < rows * cols; ++r) {
      for (std::size_t k = 0; k < 2; ++k) {
        const double e = v.at(r, k) - f.truth.at(r, k);
        sq[r] += e * e;
      }
    }
  }
  std::ostringstream os;
  os << "# mean squared error per region (inflow and outflow), row i = 0 first\n";
  os << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      os << (j ? " " : "") << sq[i * cols + j] / static_cast<double>(2 * forecasts.size());
    }
    os << '\n';
  }
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- commands ------------------------------------------------------------

int cmd_synth(const Common& common, const std::string& out_dir) {
  const RunConfig cfg = resolve_config(common);
  const SynthWorld w = generate(cfg.synth);
  fs::create_directories(out_dir);
  const fs::path root(out_dir);
  save_tensor((root / kFlowsFile).string(), w.flows);
  write_externals_csv((root / kExternalsFile).string(), w.externals);
  io::write_file_atomic((root / kSynthFile).string(), format_synth_config(cfg.synth));
  std::cout << "wrote " << cfg.synth.rows << "x" << cfg.synth.cols << "x" << cfg.synth.slots() << " flows to "
            << out_dir << "\n";
  return 0;
}

int cmd_ingest(const std::string& input, std::size_t rows, std::size_t cols, const std::vector<double>& bbox,
               std::uint32_t slot_minutes, const std::string& externals, const std::string& out_dir) {
  if (bbox.size() != 4) throw ValidationError("--bbox expects lat_min,lat_max,lon_min,lon_max");
  const RegionGrid grid(rows, cols, LatLonBox{bbox[0], bbox[1], bbox[2], bbox[3]});
  const auto records = read_trajectory_csv(input);
  IngestOptions opt;
  opt.slot_minutes = slot_minutes;
  const IngestReport rep = aggregate_trajectories(records, grid, opt);
  fs::create_directories(out_dir);
  const fs::path root(out_dir);
  save_tensor((root / kFlowsFile).string(), rep.flows);
  if (!externals.empty()) {
    const auto ext = read_externals_csv(externals);
    write_externals_csv((root / kExternalsFile).string(), ext);
  }
  std::cout << "records " << rep.records << ", transitions " << rep.transitions << ", stationary "
            << rep.stationary_pairs << ", outside bbox " << rep.dropped_out_of_bbox << ", outside range "
            << rep.dropped_out_of_range << ", slots " << rep.flows.slots() << "\n";
  return 0;
}

int cmd_train(const Common& common, std::string data_dir, const std::string& out_dir) {
  RunConfig cfg = resolve_config(common);
  if (data_dir.empty()) data_dir = cfg.data;
  const LoadedData data = load_data(data_dir, cfg);
  const ModelConfig mc = model_config(cfg, data.dataset);
  Model model(mc, data.dataset.profiles);
  apply_spatial_edges(cfg, model);
  fs::create_directories(out_dir);
  const fs::path root(out_dir);
  TrainConfig tc = cfg.train;
  tc.checkpoint_path = (root / "model.ckpt").string();
  tc.log_path = (root / "train_log.jsonl").string();

  std::ostringstream timing;
  const auto t0 = std::chrono::steady_clock::now();
  const ParamSet init = init_parameters(mc, tc.seed);
  std::cerr << "params " << init.total_values() << ", train " << data.dataset.train.size() << ", test "
            << data.dataset.test.size() << "\n";
  const TrainResult res = train(model, data.dataset, init, tc, [&](const EpochRecord& r) {
    const double s = seconds_since(t0);
    timing << "epoch " << r.epoch << " " << s << "s\n";
    char line[160];
    std::snprintf(line, sizeof line, "epoch %zu loss %.6g val_rmse %.4f%s (%.1fs)\n", r.epoch, r.train_loss,
                  r.val_rmse, r.improved ? " *" : "", s);
    std::cerr << line;
  });
  io::write_file_atomic((root / "timing.log").string(), timing.str());
  write_spatial_edges((root / "spatial_edges.csv").string(), model.spatial_graph());
  const Metrics m = evaluate(model, res.best_params, data.dataset);
  io::write_file_atomic((root / "metrics.json").string(), metrics_json(m) + "\n");
  std::cout << metrics_json(m) << "\n";
  return 0;
}

int cmd_eval(const Common& common, std::string data_dir, std::string ckpt_path, const std::string& metrics_out,
             const std::string& grid_out, bool error_grid_flag) {
  RunConfig cfg = resolve_config(common);
  if (data_dir.empty()) data_dir = cfg.data;
  if (ckpt_path.empty()) ckpt_path = cfg.checkpoint;
  if (ckpt_path.empty()) throw ValidationError("no checkpoint given (--checkpoint or checkpoint = ...)");
  const LoadedData data = load_data(data_dir, cfg);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Model model = restore_model(cfg, data, ckpt);
  if (data.dataset.test.empty()) throw ValidationError("the test split is empty");
  const auto forecasts = forecast_examples(model, ckpt.params, data.dataset, data.dataset.test);
  const Metrics m = compute_metrics(forecasts, cfg.mape_floor);
  if (!metrics_out.empty()) io::write_file_atomic(metrics_out, metrics_json(m) + "\n");
  std::cout << metrics_json(m) << "\n";
  if (data.synth) {
    const OracleMetrics o = oracle_metrics(*data.synth, data.flows, data.dataset);
    const double ha = o.historical_average.rmse_combined();
    std::cout << "historical_average " << metrics_json(o.historical_average) << "\n";
    std::cout << "persistence " << metrics_json(o.persistence) << "\n";
    std::cout << "margin_vs_historical_average " << (ha - m.rmse_combined()) / ha << "\n";
  }
  if (error_grid_flag) {
    const std::string grid = error_grid(forecasts, data.dataset.grid_rows, data.dataset.grid_cols);
    if (grid_out.empty()) std::cout << grid;
    else io::write_file_atomic(grid_out, grid);
  }
  return 0;
}

int cmd_predict(const Common& common, std::string data_dir, std::string ckpt_path, std::size_t slot,
                const std::string& out) {
  RunConfig cfg = resolve_config(common);
  if (data_dir.empty()) data_dir = cfg.data;
  if (ckpt_path.empty()) ckpt_path = cfg.checkpoint;
  if (ckpt_path.empty()) throw ValidationError("no checkpoint given (--checkpoint or checkpoint = ...)");
  const LoadedData data = load_data(data_dir, cfg);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Model model = restore_model(cfg, data, ckpt);
  const TrainingExample* found = nullptr;
  for (const auto* split : {&data.dataset.train, &data.dataset.test})
    for (const auto& ex : *split)
      if (ex.target == slot) found = &ex;
  if (!found) {
    throw ValidationError("slot " + std::to_string(slot) + " is not an admissible target (first is " +
                          std::to_string(first_admissible_slot(cfg.model.resolutions, data.flows.slots_per_day())) +
                          ", last is " + std::to_string(data.flows.slots() - 1) + ")");
  }
  const auto forecasts = forecast_examples(model, ckpt.params, data.dataset, std::span(found, 1));
  const std::string csv = forecast_csv(forecasts);
  if (out.empty()) std::cout << csv;
  else io::write_file_atomic(out, csv);
  return 0;
}

int cmd_gradcheck(const Common& common, std::string data_dir, double eps, double tolerance) {
  RunConfig cfg = resolve_config(common);
  if (data_dir.empty()) data_dir = cfg.data;
  FlowTensorPair flows;
  std::vector<ExternalRecord> externals;
  if (data_dir.empty()) {
    const SynthWorld w = generate(cfg.synth);
    flows = w.flows;
    externals = w.externals;
  } else {
    const LoadedData d = load_data(data_dir, cfg);
    flows = d.flows;
    externals = d.externals;
  }
  const Dataset ds = make_dataset(flows, externals, dataset_options(cfg));
  const ModelConfig mc = model_config(cfg, ds);
  Model model(mc, ds.profiles);
  apply_spatial_edges(cfg, model);
  const ParamSet params = init_parameters(mc, cfg.train.seed);
  model.refresh_spatial_graph(params, ds.train);
  const TrainingExample& ex = ds.train.front();
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckResult r = grad_check(
      [&](const ParamSet& p, ParamSet* g) { return model.loss(p, ex, cfg.train.lambda, g); }, params, eps);
  std::cout << "checked " << r.checked << " coordinates in " << std::fixed << std::setprecision(1)
            << seconds_since(t0) << "s\n"
            << std::scientific << std::setprecision(3) << "max relative error " << r.max_rel_error << " at "
            << r.worst_param << "[" << r.worst_index << "] (analytic " << r.worst_analytic << ", numeric "
            << r.worst_numeric << ")\n";
  if (r.max_rel_error >= tolerance) {
    std::cout << "FAIL: exceeds " << tolerance << "\n";
    return 2;
  }
  std::cout << "PASS\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal graph diffusion traffic forecasting"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  bool print_defaults = false;
  Common common;
  app.add_flag("--print-defaults", print_defaults, "print the default config and exit");
  app.add_option("--seed", common.seed, "seed for generation, initialization and shuffling");
  app.add_option("--threads", common.threads, "worker thread cap (also STGDN_THREADS)");

  std::string out_dir, data_dir, ckpt, metrics_out, grid_out, input, externals;
  std::size_t rows = 0, cols = 0, slot = 0;
  std::vector<double> bbox;
  std::uint32_t slot_minutes = 30;
  bool error_grid_flag = false;
  double eps = 1e-6, tolerance = 1e-5;

  auto* synth = app.add_subcommand("synth", "generate a synthetic world");
  add_common(synth, common);
  synth->add_option("-o,--out", out_dir, "output directory")->required();

  auto* ingest = app.add_subcommand("ingest", "aggregate trajectories into flow tensors");
  ingest->add_option("-i,--input", input, "trajectory CSV (entity,timestamp,lat,lon)")->required()->check(CLI::ExistingFile);
  ingest->add_option("--rows", rows, "grid rows I")->required();
  ingest->add_option("--cols", cols, "grid columns J")->required();
  ingest->add_option("--bbox", bbox, "lat_min,lat_max,lon_min,lon_max")->required()->delimiter(',');
  ingest->add_option("--slot-minutes", slot_minutes, "slot length in minutes");
  ingest->add_option("--externals", externals, "external factor CSV to copy alongside")->check(CLI::ExistingFile);
  ingest->add_option("-o,--out", out_dir, "output directory")->required();

  auto* trn = app.add_subcommand("train", "train a model");
  add_common(trn, common);
  trn->add_option("-d,--data", data_dir, "data directory");
  trn->add_option("-o,--out", out_dir, "run directory for checkpoint and logs")->required();

  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(evl, common);
  evl->add_option("-d,--data", data_dir, "data directory");
  evl->add_option("-k,--checkpoint", ckpt, "checkpoint file");
  evl->add_option("-m,--metrics", metrics_out, "write the metrics record here");
  evl->add_flag("--error-grid", error_grid_flag, "print the per-region squared error grid");
  evl->add_option("--error-grid-out", grid_out, "write the error grid here instead of stdout");

  auto* pred = app.add_subcommand("predict", "forecast one target slot");
  add_common(pred, common);
  pred->add_option("-d,--data", data_dir, "data directory");
  pred->add_option("-k,--checkpoint", ckpt, "checkpoint file");
  pred->add_option("-t,--slot", slot, "target slot")->required();
  pred->add_option("-o,--out", out_dir, "forecast CSV (stdout when omitted)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of end-to-end gradients");
  add_common(gc, common);
  gc->add_option("-d,--data", data_dir, "data directory (synthetic world from the config when omitted)");
  gc->add_option("--eps", eps, "central difference step");
  gc->add_option("--tolerance", tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (print_defaults) {
      std::cout << format_config(RunConfig{});
      return 0;
    }
    if (*synth) return cmd_synth(common, out_dir);
    if (*ingest) return cmd_ingest(input, rows, cols, bbox, slot_minutes, externals, out_dir);
    if (*trn) return cmd_train(common, data_dir, out_dir);
    if (*evl) return cmd_eval(common, data_dir, ckpt, metrics_out, grid_out, error_grid_flag);
    if (*pred) return cmd_predict(common, data_dir, ckpt, slot, out_dir);
    if (*gc) return cmd_gradcheck(common, data_dir, eps, tolerance);
    std::cout << app.help();
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
