#include "stgdn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "stgdn/io.hpp"

namespace stgdn {

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError(key + ": " + why); };
  if (epochs == 0) fail("epochs", "must be at least 1");
  if (batch == 0) fail("batch", "must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr", "must be finite and >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda", "must lie in [0, 1]");
  if (!(clip_norm >= 0.0)) fail("clip_norm", "must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction", "must lie in [0, 1)");
  if (threads == 0) fail("threads", "must be at least 1");
}

AdamState make_adam_state(const ParamSet& params, const TrainConfig& config) {
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  s.lr = config.lr;
  s.beta1 = config.beta1;
  s.beta2 = config.beta2;
  s.eps = config.adam_eps;
  return s;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state) {
  if (grads.size() != params.size()) throw ValidationError("adam: gradient set does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads.at(i).shape() != params.at(i).shape()) {
      throw ValidationError("adam: gradient of '" + params.name(i) + "' has shape " + grads.at(i).shape_str());
    }
    if (!grads.at(i).all_finite()) throw NumericalError("non-finite gradient in parameter '" + params.name(i) + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.at(i).values();
    auto m = state.m.at(i).values();
    auto v = state.v.at(i).values();
    const auto g = grads.at(i).values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      p[k] -= state.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
  }
}

double clip_global_norm(ParamSet& grads, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (double x : grads.at(i).values()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (double& x : grads.at(i).values()) x *= s;
  }
  return norm;
}

std::string epoch_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_rmse"] = r.val_rmse;
  j["improved"] = r.improved;
  return j.dump();
}

std::pair<std::span<const TrainingExample>, std::span<const TrainingExample>> split_validation(
    const Dataset& dataset, double val_fraction) {
  const std::span<const TrainingExample> all(dataset.train);
  if (all.empty()) throw ValidationError("the train split is empty");
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(all.size())));
  if (n_val >= all.size()) throw ValidationError("validation fraction leaves no examples to fit");
  return {all.first(all.size() - n_val), all.last(n_val)};
}

double mean_loss(const Model& model, const ParamSet& params, std::span<const TrainingExample> examples, double lambda) {
  if (examples.empty()) throw ValidationError("mean loss over an empty example set");
  double s = 0.0;
  for (const auto& ex : examples) s += model.loss(params, ex, lambda);
  return s / static_cast<double>(examples.size());
}

std::vector<Forecast> forecast_examples(const Model& model, const ParamSet& params, const Dataset& dataset,
                                        std::span<const TrainingExample> examples) {
  std::vector<Forecast> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    Forecast f;
    f.target = ex.target;
    f.rows = dataset.grid_rows;
    f.cols = dataset.grid_cols;
    f.normalized = model.predict(params, ex);
    f.stats = dataset.norm;
    f.truth = Tensor(ex.truth.shape());
    for (std::size_t r = 0; r < ex.truth.rows(); ++r) {
      f.truth.at(r, 0) = dataset.norm.denormalize(Flow::in, ex.truth.at(r, 0));
      f.truth.at(r, 1) = dataset.norm.denormalize(Flow::out, ex.truth.at(r, 1));
    }
    out.push_back(std::move(f));
  }
  return out;
}

Metrics evaluate(const Model& model, const ParamSet& params, const Dataset& dataset) {
  if (dataset.test.empty()) throw ValidationError("the test split is empty");
  return compute_metrics(forecast_examples(model, params, dataset, dataset.test));
}

namespace {

// Per-example gradients of one batch, summed in example order.
double batch_gradient(const Model& model, const ParamSet& params, std::span<const TrainingExample> fit,
                      std::span<const std::size_t> batch, double lambda, std::size_t threads, ParamSet& sum) {
  std::vector<ParamSet> grads(batch.size());
  std::vector<double> losses(batch.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) losses[i] = model.loss(params, fit[batch[i]], lambda, &grads[i]);
  };
  const std::size_t nt = std::min(threads, batch.size());
  if (nt <= 1) {
    work(0, batch.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(nt);
    const std::size_t chunk = (batch.size() + nt - 1) / nt;
    for (std::size_t t = 0; t < nt; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t * chunk, std::min(batch.size(), (t + 1) * chunk));
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  sum = params.zeros_like();
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss += losses[i];
    for (std::size_t p = 0; p < sum.size(); ++p) {
      auto dst = sum.at(p).values();
      const auto src = grads[i].at(p).values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t p = 0; p < sum.size(); ++p)
    for (double& x : sum.at(p).values()) x *= inv;
  return loss * inv;
}

double combined_rmse(const Model& model, const ParamSet& params, const Dataset& dataset,
                     std::span<const TrainingExample> examples) {
  return compute_metrics(forecast_examples(model, params, dataset, examples)).rmse_combined();
}

}  // namespace

TrainResult train(Model& model, const Dataset& dataset, const ParamSet& init, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  check_parameters(model.config(), init);
  auto [fit, val] = split_validation(dataset, config.val_fraction);
  if (val.empty()) val = fit;

  TrainResult result;
  result.fit_examples = fit.size();
  result.val_examples = val.size();
  ParamSet params = init;
  AdamState adam = make_adam_state(params, config);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(fit.size());
  std::iota(order.begin(), order.end(), 0);

  model.refresh_spatial_graph(params, fit);
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::string log_text;
  ParamSet grads;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t lo = 0; lo < order.size(); lo += config.batch) {
        const std::size_t hi = std::min(order.size(), lo + config.batch);
        const double loss = batch_gradient(model, params, fit, std::span(order).subspan(lo, hi - lo), config.lambda,
                                           config.threads, grads);
        if (!std::isfinite(loss)) throw NumericalError("non-finite batch loss");
        if (config.clip_norm > 0.0) clip_global_norm(grads, config.clip_norm);
        adam_step(params, grads, adam);
      }
      model.refresh_spatial_graph(params, fit);
      rec.train_loss = mean_loss(model, params, fit, config.lambda);
      rec.val_loss = mean_loss(model, params, val, config.lambda);
      rec.val_rmse = combined_rmse(model, params, dataset, val);
      if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_rmse)) throw NumericalError("non-finite loss");
    } catch (const NumericalError& e) {
      std::string msg = "training diverged in epoch " + std::to_string(epoch) + ": " + e.what();
      if (!config.checkpoint_path.empty() && result.best_epoch > 0) {
        msg += " (checkpoint from epoch " + std::to_string(result.best_epoch) + " kept)";
      }
      throw NumericalError(msg);
    }

    rec.improved = rec.val_rmse < best;
    if (rec.improved) {
      best = rec.val_rmse;
      stale = 0;
      result.best_params = params;
      result.best_epoch = epoch;
      if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, model.config().digest(), params);
    } else {
      ++stale;
    }
    result.log.push_back(rec);
    if (!config.log_path.empty()) {
      log_text += epoch_json(rec) + "\n";
      io::write_file_atomic(config.log_path, log_text);
    }
    if (on_epoch) on_epoch(rec);
    if (stale > config.patience) {
      result.early_stopped = epoch < config.epochs;
      break;
    }
  }
  result.final_params = params;
  model.refresh_spatial_graph(result.best_params, fit);
  return result;
}

// ---- checkpoints ---------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "STGDNCKP";
}

std::string encode_checkpoint(std::uint64_t digest, const ParamSet& params) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u64(digest);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.at(i);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double x : t.values()) w.f64(x);
  }
  return w.str();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw ValidationError(what + ": not a checkpoint (bad magic)");
  }
  Checkpoint c;
  c.digest = r.u64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.bytes(r.u32()));
    const auto rank = r.u32();
    if (rank > 8) throw ValidationError(what + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<double> values(shape_numel(shape));
    if (values.size() * 8 > r.remaining()) throw ValidationError(what + ": truncated values for '" + name + "'");
    for (auto& x : values) x = r.f64();
    c.params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw ValidationError(what + ": trailing bytes after the last parameter");
  return c;
}

void save_checkpoint(const std::string& path, std::uint64_t digest, const ParamSet& params) {
  io::write_file_atomic(path, encode_checkpoint(digest, params));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path), path); }

void check_checkpoint(const Checkpoint& ckpt, const ModelConfig& config) {
  check_parameters(config, ckpt.params);
  if (ckpt.digest != config.digest()) {
    std::ostringstream os;
    os << "checkpoint was trained with a different model configuration (digest " << std::hex << ckpt.digest
       << ", expected " << config.digest() << ")";
    throw ValidationError(os.str());
  }
}

}  // namespace stgdn
