// SPDX-License-Identifier: Apache-2.0
#include "cast/lora.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "cast/error.hpp"
#include "cast/ops.hpp"
#include "cast/tape.hpp"

namespace cast {

namespace {

// LoRA with inverted dropout on its input. A fresh mask is drawn per call.
class DropoutLoraSlot final : public SlotAttachment {
 public:
  DropoutLoraSlot(LoraAdapter adapter, double p, std::uint64_t seed)
      : adapter_(std::move(adapter)), p_(p), rng_(std::make_shared<Rng>(seed)) {}
  std::size_t in_features() const override { return adapter_.d_in(); }
  std::size_t out_features() const override { return adapter_.d_out(); }
  Tensor delta(const Tensor& x) const override {
    if (p_ <= 0.0) return lora_delta(adapter_, x);
    std::vector<double> mask(x.numel());
    const double keep = 1.0 / (1.0 - p_);
    for (auto& m : mask) m = rng_->uniform(0.0, 1.0) >= p_ ? keep : 0.0;
    return lora_delta(adapter_, mul(x, Tensor(x.shape(), std::move(mask))));
  }

 private:
  LoraAdapter adapter_;
  double p_;
  std::shared_ptr<Rng> rng_;
};

// Detaches on scope exit so a failed run leaves the slots empty.
struct DetachGuard {
  TransformerModel& model;
  const std::vector<LoraAttachment>& attachments;
  ~DetachGuard() {
    for (const auto& a : attachments) model.detach(a.slot);
  }
};

}  // namespace

LoraAdapter::LoraAdapter(Tensor a, Tensor b, double lora_alpha)
    : a_(std::move(a)), b_(std::move(b)), lora_alpha_(lora_alpha) {
  if (!a_.defined() || !b_.defined() || a_.rank() != 2 || b_.rank() != 2) {
    throw ParameterError("lora: A and B must be matrices");
  }
  if (b_.dim(1) != a_.dim(0)) {
    throw ParameterError("lora: A " + shape_string(a_.shape()) + " and B " + shape_string(b_.shape()) +
                         " disagree on rank");
  }
  if (rank() == 0 || rank() > std::min(d_in(), d_out())) {
    throw ParameterError("lora: rank " + std::to_string(rank()) + " exceeds min(d_in, d_out)");
  }
  if (!(lora_alpha_ > 0.0) || !std::isfinite(lora_alpha_)) throw ParameterError("lora: lora_alpha must be positive");
}

LoraAdapter LoraAdapter::init(std::size_t d_in, std::size_t d_out, std::size_t rank, double lora_alpha, Rng& rng) {
  if (d_in == 0 || d_out == 0) throw ParameterError("lora: dimensions must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::vector<double> a(rank * d_in);
  for (auto& v : a) v = rng.uniform(-bound, bound);
  return LoraAdapter(Tensor({rank, d_in}, std::move(a)), Tensor::zeros({d_out, rank}), lora_alpha);
}

void LoraAdapter::freeze() {
  a_.freeze();
  b_.freeze();
}

void LoraAdapter::set_trainable(bool trainable) {
  a_.set_requires_grad(trainable);
  b_.set_requires_grad(trainable);
}

std::uint32_t LoraAdapter::checksum() const {
  const std::array<Tensor, 2> ts{a_, b_};
  return cast::checksum(ts);
}

Tensor lora_delta(const LoraAdapter& adapter, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != adapter.d_in()) {
    throw ShapeError("lora_delta: input " + shape_string(x.shape()) + " vs d_in " + std::to_string(adapter.d_in()));
  }
  return scale(linear(linear(x, adapter.a_matrix()), adapter.b_matrix()), adapter.scaling());
}

void attach_lora(TransformerModel& model, const std::vector<LoraAttachment>& attachments) {
  for (const auto& a : attachments) model.attach(a.slot, std::make_shared<LoraSlot>(a.adapter));
}

void detach_lora(TransformerModel& model, const std::vector<LoraAttachment>& attachments) {
  for (const auto& a : attachments) model.detach(a.slot);
}

std::vector<double> train_lora(TransformerModel& model, const std::vector<LoraAttachment>& attachments,
                               LabeledBatchSource& task_data, std::size_t steps, AdamState& optimizer,
                               const LoraTrainOptions& options) {
  if (model.trainable()) throw ContractError("train_lora: base model parameters must be non-trainable");
  if (!(options.dropout >= 0.0 && options.dropout < 1.0)) throw ParameterError("train_lora: dropout must be in [0, 1)");
  if (options.batch_size == 0) throw ParameterError("train_lora: batch_size must be positive");
  for (const auto& a : attachments) {
    if (a.adapter.frozen() || a.adapter.a_matrix().frozen() || a.adapter.b_matrix().frozen()) {
      throw ContractError("train_lora: adapter at " + slot_name(a.slot) + " is frozen");
    }
  }
  std::vector<double> trace;
  if (steps == 0) return trace;

  const std::uint32_t base_before = model_checksum(model);
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < attachments.size(); ++i) {
    const auto& a = attachments[i];
    model.attach(a.slot, std::make_shared<DropoutLoraSlot>(a.adapter, options.dropout, derive_seed(options.seed, i)));
  }
  DetachGuard guard{model, attachments};
  for (auto a : attachments) {
    a.adapter.set_trainable(true);
    params.push_back(a.adapter.a_matrix());
    params.push_back(a.adapter.b_matrix());
  }

  const auto vocab = static_cast<std::size_t>(model.config().vocab_size);
  trace.reserve(steps);
  try {
    for (std::size_t step = 0; step < steps; ++step) {
      const LabeledBatch batch = task_data.next(options.batch_size);
      Tape tape;
      {
        TapeScope scope(tape);
        const ForwardOutput out = model.forward(batch.tokens);
        const Tensor loss =
            cross_entropy(reshape(out.logits, {batch.tokens.batch * batch.tokens.seq, vocab}), batch.targets);
        trace.push_back(loss.item());
        backward_pass(loss, tape);
      }
      adam_step(params, optimizer);
    }
  } catch (...) {
    for (auto a : attachments) a.adapter.set_trainable(false);
    throw;
  }
  for (auto a : attachments) a.adapter.set_trainable(false);
  if (model_checksum(model) != base_before) throw IntegrityError("train_lora: base model parameters changed");
  return trace;
}

void freeze_adapter(LoraAdapter& adapter) { adapter.freeze(); }

std::vector<LoraAttachment> init_adapters(const TransformerModel& model, const std::vector<SlotKey>& slots,
                                          std::size_t rank, double lora_alpha, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LoraAttachment> out;
  for (const auto& slot : slots) {
    const auto [in, o] = model.slot_dims(slot);
    out.push_back({LoraAdapter::init(in, o, rank, lora_alpha, rng), slot});
  }
  return out;
}

}  // namespace cast
