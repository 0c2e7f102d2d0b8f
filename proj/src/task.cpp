// SPDX-License-Identifier: Apache-2.0
#include "cast/task.hpp"

#include <algorithm>
#include <string>

#include "cast/error.hpp"

namespace cast {

namespace {

constexpr std::uint64_t kEvalTag = 0xe7a1;
constexpr std::uint64_t kTrainTag = 0x7a1;
constexpr std::size_t kEvalChunk = 256;

}  // namespace

std::string_view task_kind_name(TaskKind kind) {
  return kind == TaskKind::modular_addition ? "modular_addition" : "copy_pattern";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "modular_addition") return TaskKind::modular_addition;
  if (name == "copy_pattern") return TaskKind::copy_pattern;
  throw ParameterError("unknown task kind '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (kind == TaskKind::modular_addition) {
    if (modulus < 2) throw ParameterError("task: modulus must be >= 2");
    if (modulus + 2 > vocab_size) throw ParameterError("task: modulus + 2 operator tokens exceed the vocabulary");
  } else {
    if (pattern_length < 1) throw ParameterError("task: pattern_length must be >= 1");
    if (vocab_size < 3) throw ParameterError("task: vocabulary too small for copy_pattern");
  }
}

std::size_t TaskSpec::sequence_length() const {
  validate();
  return kind == TaskKind::modular_addition ? 4 : static_cast<std::size_t>(2 * pattern_length);
}

TaskGenerator::TaskGenerator(const TaskSpec& spec, std::uint64_t stream_seed) : spec_(spec), rng_(stream_seed) {
  spec_.validate();
}

LabeledBatch TaskGenerator::next(std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("task: batch_size must be positive");
  const std::size_t seq = spec_.sequence_length();
  LabeledBatch out;
  out.tokens = {batch_size, seq, std::vector<int>(batch_size * seq)};
  out.targets.assign(batch_size * seq, -1);
  for (std::size_t b = 0; b < batch_size; ++b) {
    int* row = out.tokens.ids.data() + b * seq;
    int answer = 0;
    if (spec_.kind == TaskKind::modular_addition) {
      const auto m = static_cast<std::size_t>(spec_.modulus);
      const int a = static_cast<int>(rng_.index(m));
      const int c = static_cast<int>(rng_.index(m));
      row[0] = a;
      row[1] = spec_.modulus;
      row[2] = c;
      row[3] = spec_.modulus + 1;
      answer = (a + c) % spec_.modulus;
    } else {
      const auto k = static_cast<std::size_t>(spec_.pattern_length);
      const auto alphabet = static_cast<std::size_t>(spec_.vocab_size - 1);
      for (std::size_t i = 0; i < k; ++i) row[i] = static_cast<int>(rng_.index(alphabet));
      row[k] = spec_.vocab_size - 1;
      for (std::size_t i = 0; i + 1 < k; ++i) row[k + 1 + i] = row[i];
      answer = row[k - 1];
    }
    out.targets[b * seq + seq - 1] = answer;
  }
  return out;
}

TaskGenerator task_training_stream(const TaskSpec& spec, std::uint64_t salt) {
  return TaskGenerator(spec, derive_seed(derive_seed(spec.seed, kTrainTag), salt));
}

LabeledBatch task_evaluation_set(const TaskSpec& spec, std::size_t n) {
  TaskGenerator gen(spec, derive_seed(spec.seed, kEvalTag));
  return gen.next(n);
}

double evaluate_predictor(const LogitsFn& logits, const TaskSpec& spec, std::size_t n) {
  if (n == 0) throw ParameterError("evaluate: n must be >= 1");
  const LabeledBatch data = task_evaluation_set(spec, n);
  const std::size_t seq = data.tokens.seq;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, n - begin);
    TokenBatch chunk{count, seq,
                     std::vector<int>(data.tokens.ids.begin() + static_cast<std::ptrdiff_t>(begin * seq),
                                      data.tokens.ids.begin() + static_cast<std::ptrdiff_t>((begin + count) * seq))};
    const Tensor out = logits(chunk);
    if (out.rank() != 3 || out.dim(0) != count || out.dim(1) != seq) throw ShapeError("evaluate: bad logits shape");
    const std::size_t vocab = out.dim(2);
    const auto v = out.values();
    for (std::size_t b = 0; b < count; ++b) {
      const double* row = v.data() + (b * seq + seq - 1) * vocab;
      const auto pred = static_cast<int>(std::max_element(row, row + vocab) - row);
      if (pred == data.targets[(begin + b) * seq + seq - 1]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate_task(const TransformerModel& model, const TaskSpec& spec, std::size_t n) {
  if (spec.vocab_size != model.config().vocab_size) throw ParameterError("evaluate_task: vocabulary mismatch");
  return evaluate_predictor([&model](const TokenBatch& t) { return model.forward(t).logits; }, spec, n);
}

}  // namespace cast
