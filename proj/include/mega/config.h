#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "mega/model.h"
#include "mega/optim.h"
#include "mega/tasks.h"

namespace mega {

struct TrainConfig {
  AdamConfig adam;
  std::size_t steps = 5000;
  std::size_t batch = 32;
  double clip = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 250;
  std::size_t eval_count = 512;
  // Stop once an evaluation reaches this accuracy.
  std::optional<double> stop_at_accuracy;
};

struct IoConfig {
  std::string checkpoint;
  std::string metrics;
};

struct RunConfig {
  ModelConfig model;  // vocab, classes and mode are derived from the task
  TrainConfig train;
  TaskSpec task;
  IoConfig io;

  // Model config with the task-dependent fields filled in.
  ModelConfig model_config() const;
  void validate() const;
};

// Strict: unknown keys, wrong types and out-of-range values raise ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string to_json(const RunConfig& config, int indent = -1);

// Key reference with defaults, for --help.
std::string config_help();

}  // namespace mega
