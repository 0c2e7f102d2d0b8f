// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "cast/adam.hpp"
#include "cast/rng.hpp"
#include "cast/tensor.hpp"
#include "cast/transformer.hpp"

namespace cast {

/// Low-rank update (lora_alpha / rank) · B · A with A [rank×d_in], B [d_out×rank].
///
/// Copies share the underlying tensors. Once frozen, A and B reject writes and
/// gradients for the rest of their lifetime.
class LoraAdapter {
 public:
  /// Throws ParameterError on inconsistent shapes, rank > min(d_in, d_out) or lora_alpha <= 0.
  LoraAdapter(Tensor a, Tensor b, double lora_alpha);

  /// A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0, so the initial delta is zero.
  static LoraAdapter init(std::size_t d_in, std::size_t d_out, std::size_t rank, double lora_alpha, Rng& rng);

  std::size_t rank() const { return a_.dim(0); }
  std::size_t d_in() const { return a_.dim(1); }
  std::size_t d_out() const { return b_.dim(0); }
  double lora_alpha() const { return lora_alpha_; }
  double scaling() const { return lora_alpha_ / static_cast<double>(rank()); }

  const Tensor& a_matrix() const { return a_; }
  const Tensor& b_matrix() const { return b_; }

  bool frozen() const { return a_.frozen() && b_.frozen(); }
  /// Idempotent.
  void freeze();
  void set_trainable(bool trainable);

  /// CRC-32 of the A and B bytes.
  std::uint32_t checksum() const;

 private:
  Tensor a_, b_;
  double lora_alpha_;
};

/// (lora_alpha / rank) · B(A x) for x [batch×d_in].
Tensor lora_delta(const LoraAdapter& adapter, const Tensor& x);

/// An adapter bound to one slot of a host model.
struct LoraAttachment {
  LoraAdapter adapter;
  SlotKey slot;
};

/// Slot attachment that contributes `lora_delta`.
class LoraSlot final : public SlotAttachment {
 public:
  explicit LoraSlot(LoraAdapter adapter) : adapter_(std::move(adapter)) {}
  std::size_t in_features() const override { return adapter_.d_in(); }
  std::size_t out_features() const override { return adapter_.d_out(); }
  Tensor delta(const Tensor& x) const override { return lora_delta(adapter_, x); }
  const LoraAdapter& adapter() const { return adapter_; }

 private:
  LoraAdapter adapter_;
};

/// Attaches every adapter to its (already registered) slot.
void attach_lora(TransformerModel& model, const std::vector<LoraAttachment>& attachments);
void detach_lora(TransformerModel& model, const std::vector<LoraAttachment>& attachments);

/// Produces labeled task batches; only task generators implement it.
class LabeledBatchSource {
 public:
  virtual ~LabeledBatchSource() = default;
  virtual LabeledBatch next(std::size_t batch_size) = 0;
};

struct LoraTrainOptions {
  std::size_t batch_size = 64;
  /// Inverted dropout on the adapter input during training only.
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

/// Trains the adapters on task batches with cross-entropy at labeled positions.
///
/// The base model must be non-trainable and its slots registered and empty;
/// the adapters are attached for the duration of the call only. Throws
/// ContractError for frozen adapters and IntegrityError if a base parameter
/// changed. Returns the per-step loss trace.
std::vector<double> train_lora(TransformerModel& model, const std::vector<LoraAttachment>& attachments,
                               LabeledBatchSource& task_data, std::size_t steps, AdamState& optimizer,
                               const LoraTrainOptions& options = {});

void freeze_adapter(LoraAdapter& adapter);

/// Fresh adapters on the given slots; draws A from one stream seeded by `seed` in slot order.
std::vector<LoraAttachment> init_adapters(const TransformerModel& model, const std::vector<SlotKey>& slots,
                                          std::size_t rank, double lora_alpha, std::uint64_t seed);

}  // namespace cast
