#pragma once

// Flat key=value run configuration. Lines are `key = value`; `#` starts a
// comment. Unknown keys are rejected.

#include <string>
#include <string_view>

#include "stgdn/model.hpp"
#include "stgdn/synthetic.hpp"
#include "stgdn/trainer.hpp"

namespace stgdn {

struct RunConfig {
  ModelConfig model;  // rows and cols come from the data
  TrainConfig train;
  SynthConfig synth;
  double split = 0.8;
  double mape_floor = 1.0;
  std::string data;        // data directory
  std::string checkpoint;  // checkpoint path
  std::string spatial_edges;  // src,dst,weight file replacing the built spatial graph
};

// Every key with its value and a comment line; parses back to an equal config.
std::string format_config(const RunConfig& config);
RunConfig parse_config(std::string_view text, const std::string& origin = "config");
RunConfig load_config(const std::string& path);
// Sets one key; errors name the key.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

DatasetOptions dataset_options(const RunConfig& config);

// The synth section alone, as written next to generated data.
std::string format_synth_config(const SynthConfig& synth);
SynthConfig parse_synth_config(std::string_view text, const std::string& origin);

}  // namespace stgdn
