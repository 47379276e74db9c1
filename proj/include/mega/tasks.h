#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace mega {

enum class TaskKind { windowed_majority, key_value_recall };
TaskKind parse_task_kind(std::string_view name);
std::string_view to_string(TaskKind kind);

// windowed_majority: tokens are 0 (for -1) and 1 (for +1); the label is 1
// when the decayed sum of all inputs, weighted towards the final position,
// is positive. noise is the probability of flipping that label.
//
// key_value_recall: n = 2*pairs + 1 tokens k1 v1 ... kP vP q. Keys use ids
// [0, key_vocab), values [key_vocab, key_vocab + value_vocab). The label is
// the value index last paired with the query key.
struct TaskSpec {
  TaskKind kind = TaskKind::windowed_majority;
  std::size_t n = 64;
  std::size_t key_vocab = 16;
  std::size_t value_vocab = 16;
  double noise = 0.0;
  double decay = 0.9;
  std::uint64_t seed = 0;

  std::size_t vocab() const;
  std::size_t classes() const;
  void validate() const;
};

struct Sample {
  std::vector<int> tokens;
  int label = 0;
};

// Deterministic in (spec, index).
Sample generate_sample(const TaskSpec& spec, std::uint64_t index);
std::vector<Sample> generate_task(const TaskSpec& spec, std::size_t count, std::uint64_t first_index = 0);

// The held-out split: same task with the seed moved by a fixed offset.
TaskSpec eval_split(const TaskSpec& spec);

// Noise-free label of a windowed_majority token sequence.
int majority_label(const std::vector<int>& tokens, double decay);

}  // namespace mega
