// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>

#include "cast/lora.hpp"
#include "cast/rng.hpp"
#include "cast/transformer.hpp"

namespace cast {

enum class TaskKind { modular_addition, copy_pattern };

std::string_view task_kind_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

/// Synthetic downstream task over the shared vocabulary.
///
/// modular_addition: `a + b =` rendered as [a, m, b, m+1] with a, b in [0, m);
///   the answer token is (a + b) mod m.
/// copy_pattern: [p_1..p_k, SEP, p_1..p_{k-1}] with p_i in [0, vocab-1) and
///   SEP = vocab-1; the answer token is p_k.
/// Only the final position carries a target.
struct TaskSpec {
  TaskKind kind = TaskKind::modular_addition;
  int modulus = 17;
  int pattern_length = 4;
  int vocab_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t sequence_length() const;
};

class TaskGenerator final : public LabeledBatchSource {
 public:
  TaskGenerator(const TaskSpec& spec, std::uint64_t stream_seed);
  LabeledBatch next(std::size_t batch_size) override;

 private:
  TaskSpec spec_;
  Rng rng_;
};

/// Stream used for training on a task; disjoint from the evaluation stream.
TaskGenerator task_training_stream(const TaskSpec& spec, std::uint64_t salt);

/// The n evaluation examples of `spec`, identical for every caller.
LabeledBatch task_evaluation_set(const TaskSpec& spec, std::size_t n);

using LogitsFn = std::function<Tensor(const TokenBatch&)>;

/// Exact-match accuracy of the argmax at the answer position over the
/// evaluation set. `logits` returns [batch×seq×vocab].
double evaluate_predictor(const LogitsFn& logits, const TaskSpec& spec, std::size_t n);

/// evaluate_predictor over the model with whatever is currently attached.
double evaluate_task(const TransformerModel& model, const TaskSpec& spec, std::size_t n);

}  // namespace cast
