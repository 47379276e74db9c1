#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mega/config.h"
#include "mega/model.h"
#include "mega/tasks.h"

namespace mega {

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> eval_accuracy;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  ModelParams params;
  std::size_t steps_run = 0;
  double final_accuracy = 0.0;
  bool stopped_early = false;
};

using ProgressFn = std::function<void(const MetricsRow&)>;

// Trains a classifier on config.task from config.train.seed. Deterministic.
TrainResult train(const RunConfig& config, const ProgressFn& progress = nullptr);

std::vector<ag::NamedParam> named_params(ModelParams& params);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;
};

// Scores `count` samples of the held-out split of `spec`.
EvalResult evaluate(const ModelConfig& cfg, const ModelParams& params, const TaskSpec& spec, std::size_t count);

// Accuracy and mean cross-entropy of precomputed logits rows.
EvalResult score_logits(const std::vector<Tensor>& logits, const std::vector<int>& labels);

std::string metrics_csv(const std::vector<MetricsRow>& history);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& history);

}  // namespace mega
