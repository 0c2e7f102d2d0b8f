// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cast/adam.hpp"
#include "cast/tensor.hpp"

namespace cast {

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 16;
  std::uint64_t seed = 0;

  /// Throws ParameterError unless every field is positive and n_heads divides d_model.
  void validate() const;
  std::size_t head_dim() const;
  /// Stable hex digest of all fields, recorded in artifact provenance.
  std::string digest() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Named linear projections inside a block. Each one can host an adapter.
enum class Projection { attn_q, attn_k, attn_v, attn_o, mlp_up, mlp_down };

std::string_view projection_name(Projection p);
/// Throws ParameterError for unknown names.
Projection parse_projection(std::string_view name);

struct SlotKey {
  int layer = 0;
  Projection projection = Projection::attn_q;

  auto operator<=>(const SlotKey&) const = default;
};

std::string slot_name(const SlotKey& slot);

/// Something that adds a delta to a projection's output: a LoRA adapter or a
/// CAST layer. `delta` must be linear in its input and have no bias.
class SlotAttachment {
 public:
  virtual ~SlotAttachment() = default;
  virtual std::size_t in_features() const = 0;
  virtual std::size_t out_features() const = 0;
  virtual Tensor delta(const Tensor& x) const = 0;
};

/// Token ids laid out [batch × seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
};

/// Tokens plus one target per position (-1 = no loss at that position).
struct LabeledBatch {
  TokenBatch tokens;
  std::vector<int> targets;
};

/// Next-token targets within each sequence; the last position is ignored.
LabeledBatch next_token_targets(TokenBatch tokens);

struct ForwardOutput {
  Tensor logits;        // [batch × seq × vocab]
  Tensor final_hidden;  // [batch × seq × d_model], after the final norm, before the head
};

/// Pre-norm decoder-only transformer with learned absolute positions.
///
/// Parameters are grouped per block; `named_parameters()` fixes one canonical
/// order used by checkpoints and checksums. Adapter slots must be registered
/// before anything can be attached to them, and hold at most one attachment.
class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config);

  TransformerModel(TransformerModel&&) = default;
  TransformerModel& operator=(TransformerModel&&) = default;
  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  /// Deep copy of the parameters; slot registrations and attachments are not copied.
  TransformerModel clone() const;

  const ModelConfig& config() const { return config_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  /// Throws ParameterError for unknown names.
  Tensor parameter(std::string_view name) const;

  Tensor projection_weight(const SlotKey& slot) const;
  /// (in_features, out_features) of the base projection at `slot`.
  std::pair<std::size_t, std::size_t> slot_dims(const SlotKey& slot) const;

  void set_trainable(bool trainable);
  /// True if any base parameter requires a gradient.
  bool trainable() const;

  SlotKey register_adapter_slot(int layer, Projection projection);
  bool has_slot(const SlotKey& slot) const;
  std::vector<SlotKey> registered_slots() const;

  void attach(const SlotKey& slot, std::shared_ptr<const SlotAttachment> attachment);
  void detach(const SlotKey& slot);
  void detach_all();
  std::shared_ptr<const SlotAttachment> attachment(const SlotKey& slot) const;

  ForwardOutput forward(const TokenBatch& tokens) const;

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor attn_q, attn_k, attn_v, attn_o;
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_up, mlp_down;
  };

  const Tensor& weight(const SlotKey& slot) const;
  Tensor project(const Tensor& x, int layer, Projection p) const;

  ModelConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<Block> blocks_;
  Tensor final_gain_, final_bias_;
  Tensor head_;
  std::map<SlotKey, std::shared_ptr<const SlotAttachment>> slots_;
};

/// Deterministic initialization from config.seed.
TransformerModel init_model(const ModelConfig& config);

/// One next-token cross-entropy step over every base parameter. Returns the
/// loss measured before the update. The model must be trainable.
double pretrain_step(TransformerModel& model, const TokenBatch& batch, AdamState& optimizer);

std::uint32_t model_checksum(const TransformerModel& model);

}  // namespace cast
