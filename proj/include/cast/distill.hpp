// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cast/cast_mapper.hpp"
#include "cast/rng.hpp"
#include "cast/tensor.hpp"
#include "cast/transformer.hpp"

namespace cast {

enum class CorpusKind { uniform, markov };

std::string_view corpus_kind_name(CorpusKind kind);
CorpusKind parse_corpus_kind(std::string_view name);

/// Task-agnostic token stream. `markov` samples a fixed first-order transition
/// table whose rows are softmax(3·N(0,1)) draws seeded by `table_seed`; the
/// first token of each sequence is uniform. Token order is fully determined
/// by (table_seed, stream_seed).
class CorpusStream {
 public:
  CorpusStream(std::uint64_t table_seed, std::uint64_t stream_seed, int vocab_size, CorpusKind kind);

  TokenBatch next(std::size_t batch, std::size_t seq);

  CorpusKind kind() const { return kind_; }
  int vocab_size() const { return vocab_; }
  /// Row-major [vocab × vocab]; empty for the uniform kind.
  const std::vector<double>& transition_table() const { return table_; }
  /// CRC-32 over every token emitted so far.
  std::uint32_t emitted_checksum() const;

 private:
  int sample_row(int row);

  int vocab_;
  CorpusKind kind_;
  std::vector<double> table_;
  std::vector<double> cdf_;
  Rng rng_;
  std::uint32_t crc_state_ = 0;
  std::uint64_t emitted_ = 0;
};

/// Throws ParameterError when vocab_size < 4.
CorpusStream generate_corpus(std::uint64_t seed, int vocab_size, CorpusKind kind);

struct DistillConfig {
  double alpha = 1.0;
  double beta = 0.1;
  double temperature = 2.0;
  std::size_t steps = 1000;
  std::size_t batch_size = 64;
  std::size_t seq_len = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  /// Multiplies the KL term by T² when set. Off by default.
  bool kl_temperature_squared = false;

  void validate() const;
};

struct CompositeLoss {
  Tensor total;
  double kl = 0.0;
  double mse = 0.0;
};

/// α·m·KL(softmax(z_S/T) ‖ softmax(z_T/T)) + β·MSE(h_S, h_T·P_Hᵀ) with m = T²
/// if kl_temperature_squared else 1. Logits are [batch×seq×vocab], hidden
/// states [batch×seq×d]; rows are all (batch, seq) positions.
CompositeLoss composite_loss(const Tensor& teacher_logits, const Tensor& student_logits, const Tensor& teacher_hidden,
                             const Tensor& student_hidden, const HiddenProjector& projector, const DistillConfig& cfg);

struct LossRecord {
  double total = 0.0;
  double kl = 0.0;
  double mse = 0.0;
};

struct TrainReport {
  std::vector<LossRecord> trace;
  double wall_seconds = 0.0;
  std::uint32_t corpus_checksum = 0;
  std::uint32_t projector_checksum = 0;
  std::uint32_t kernel_checksum = 0;
  std::uint32_t source_checksum = 0;
  std::uint32_t target_checksum = 0;
  /// Teacher logits on the first batch, recomputed after training, are bit-identical.
  bool teacher_invariant = false;
};

/// Trains only the mapping's projectors and P_H.
///
/// `source` carries its frozen LoRA kernels as attachments; the mapping is
/// attached to `target` for the duration of the call. Both base models must be
/// non-trainable. A gradient on any base parameter or kernel is a
/// ContractError; a changed base or kernel checksum is an IntegrityError.
TrainReport train_mappings(const TransformerModel& source, TransformerModel& target, const CastMapping& mapping,
                           CorpusStream& corpus, const DistillConfig& cfg);

struct AlignmentProbe {
  double kl = 0.0;
  double mse = 0.0;
};

/// KL and hidden MSE of the CAST-adapted target against the teacher on
/// `batches` fresh corpus batches. The mapping must already be attached.
AlignmentProbe probe_alignment(const TransformerModel& source, const TransformerModel& target,
                               const CastMapping& mapping, CorpusStream& corpus, const DistillConfig& cfg,
                               std::size_t batches);

}  // namespace cast
