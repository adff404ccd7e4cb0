#pragma once

// Adam training loop with validation-based checkpointing and early stopping,
// evaluation, and the checkpoint file format.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stgdn/model.hpp"

namespace stgdn {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda = 0.5;
  std::uint64_t seed = 7;
  std::size_t patience = 20;
  double clip_norm = 0.0;  // global-norm clipping threshold, 0 = off
  double val_fraction = 0.1;
  std::size_t threads = 1;
  std::string checkpoint_path;  // best-validation checkpoint (optional)
  std::string log_path;         // one JSON line per epoch (optional)

  void validate() const;
};

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(const ParamSet& params, const TrainConfig& config);

// Bias-corrected Adam. A non-finite gradient aborts with NumericalError
// naming the parameter; params and state are left untouched then.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state);

// Scales grads so their global L2 norm is at most max_norm; returns the norm
// before scaling.
double clip_global_norm(ParamSet& grads, double max_norm);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_rmse = 0.0;
  bool improved = false;
};

std::string epoch_json(const EpochRecord& r);

struct TrainResult {
  ParamSet best_params;
  ParamSet final_params;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  std::size_t fit_examples = 0;
  std::size_t val_examples = 0;
};

// Chronological fit/validation split of the train examples.
std::pair<std::span<const TrainingExample>, std::span<const TrainingExample>> split_validation(
    const Dataset& dataset, double val_fraction);

// Trains from `init`. On return the model's spatial graph matches the best
// parameters. The spatial graph is rebuilt from the attention scores at the
// start and after every epoch.
TrainResult train(Model& model, const Dataset& dataset, const ParamSet& init, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// Mean joint loss over the examples.
double mean_loss(const Model& model, const ParamSet& params, std::span<const TrainingExample> examples, double lambda);

std::vector<Forecast> forecast_examples(const Model& model, const ParamSet& params, const Dataset& dataset,
                                        std::span<const TrainingExample> examples);

// RMSE/MAPE per flow over the test split.
Metrics evaluate(const Model& model, const ParamSet& params, const Dataset& dataset);

// ---- checkpoints ---------------------------------------------------------

struct Checkpoint {
  std::uint64_t digest = 0;
  ParamSet params;
};

std::string encode_checkpoint(std::uint64_t digest, const ParamSet& params);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint");
void save_checkpoint(const std::string& path, std::uint64_t digest, const ParamSet& params);
Checkpoint load_checkpoint(const std::string& path);

// Shape check against the configuration first, then the digest.
void check_checkpoint(const Checkpoint& ckpt, const ModelConfig& config);

}  // namespace stgdn
