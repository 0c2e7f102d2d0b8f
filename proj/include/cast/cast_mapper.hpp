// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cast/lora.hpp"
#include "cast/tensor.hpp"
#include "cast/transformer.hpp"

namespace cast {

/// Frozen LoRA kernel wrapped by two bias-free projectors:
///   Δy_T = P_{S→T} · kernel(P_{T→S} · x_T)
/// with P_{T→S} [kernel.d_in × d_T] and P_{S→T} [d_T' × kernel.d_out].
class CastLayer {
 public:
  /// Throws ContractError if the kernel is not frozen, ShapeError if a
  /// projector does not meet the kernel's widths.
  CastLayer(Tensor map_to_source, Tensor map_from_source, LoraAdapter kernel);

  const Tensor& map_to_source() const { return to_source_; }
  const Tensor& map_from_source() const { return from_source_; }
  const LoraAdapter& kernel() const { return kernel_; }

  std::size_t target_in() const { return to_source_.dim(1); }
  std::size_t target_out() const { return from_source_.dim(0); }

  std::vector<Tensor> projectors() const { return {to_source_, from_source_}; }

 private:
  Tensor to_source_, from_source_;
  LoraAdapter kernel_;
};

/// Gradients reach both projectors and never the kernel.
Tensor cast_forward(const CastLayer& layer, const Tensor& x_target);

/// rows × cols matrix with ones on the leading diagonal plus N(0, noise_std²) noise.
Tensor identity_padded(std::size_t rows, std::size_t cols, double noise_std, Rng& rng);

/// (P_{T→S} [d_S×d_T], P_{S→T} [d_T×d_S]), drawn in that order from one stream.
std::pair<Tensor, Tensor> init_projectors(std::size_t d_target, std::size_t d_source, double noise_std,
                                          std::uint64_t seed);

/// Target layer i maps to source layer floor(i · n_source / n_target).
std::vector<int> layer_correspondence(int n_source_layers, int n_target_layers);

/// P_H [d_S×d_T], applied to target final hidden states.
struct HiddenProjector {
  Tensor matrix;
};

struct CastSlotLayer {
  SlotKey target_slot;
  SlotKey source_slot;
  CastLayer layer;
  /// Kernel checksum recorded from the source adapter when the mapping was built.
  std::uint32_t kernel_checksum = 0;
};

struct CastMapping {
  std::vector<CastSlotLayer> layers;
  HiddenProjector hidden_projector;
  std::vector<int> correspondence;
  std::string source_digest;
  std::string target_digest;

  /// Projectors of every layer followed by P_H: the trainable set.
  std::vector<Tensor> trainable_tensors() const;
  std::uint32_t projector_checksum() const;
  /// CRC-32 over every layer's kernel A and B, in layer order.
  std::uint32_t kernel_checksum() const;
};

/// One CAST layer per target slot whose corresponding source slot carries an
/// adapter. The adapters are frozen by this call. Projectors start
/// identity-padded with `noise_std` noise; P_H starts identity-padded without noise.
CastMapping build_cast_mapping(const TransformerModel& source, const std::vector<LoraAttachment>& source_adapters,
                               const TransformerModel& target, double noise_std, std::uint64_t seed);

/// Slot attachment that contributes `cast_forward`.
class CastSlot final : public SlotAttachment {
 public:
  explicit CastSlot(CastLayer layer) : layer_(std::move(layer)) {}
  std::size_t in_features() const override { return layer_.target_in(); }
  std::size_t out_features() const override { return layer_.target_out(); }
  Tensor delta(const Tensor& x) const override { return cast_forward(layer_, x); }

 private:
  CastLayer layer_;
};

/// Throws IntegrityError when a kernel no longer matches its recorded
/// checksum, ContractError for unfrozen kernels, ShapeError when a layer does
/// not fit its slot. Slots must be registered and empty.
void attach_cast(TransformerModel& target, const CastMapping& mapping);
void detach_cast(TransformerModel& target, const CastMapping& mapping);

}  // namespace cast
