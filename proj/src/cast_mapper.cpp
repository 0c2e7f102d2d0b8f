// SPDX-License-Identifier: Apache-2.0
#include "cast/cast_mapper.hpp"

#include <algorithm>
#include <memory>

#include "cast/error.hpp"
#include "cast/ops.hpp"

namespace cast {

CastLayer::CastLayer(Tensor map_to_source, Tensor map_from_source, LoraAdapter kernel)
    : to_source_(std::move(map_to_source)), from_source_(std::move(map_from_source)), kernel_(std::move(kernel)) {
  if (!kernel_.frozen()) throw ContractError("cast layer: kernel must be frozen");
  if (to_source_.rank() != 2 || from_source_.rank() != 2) throw ShapeError("cast layer: projectors must be matrices");
  if (to_source_.dim(0) != kernel_.d_in()) {
    throw ShapeError("cast layer: P_T->S " + shape_string(to_source_.shape()) + " does not produce kernel width " +
                     std::to_string(kernel_.d_in()));
  }
  if (from_source_.dim(1) != kernel_.d_out()) {
    throw ShapeError("cast layer: P_S->T " + shape_string(from_source_.shape()) + " does not accept kernel width " +
                     std::to_string(kernel_.d_out()));
  }
}

Tensor cast_forward(const CastLayer& layer, const Tensor& x_target) {
  if (!layer.kernel().frozen()) throw ContractError("cast_forward: kernel must be frozen");
  if (x_target.rank() != 2 || x_target.dim(1) != layer.target_in()) {
    throw ShapeError("cast_forward: input " + shape_string(x_target.shape()) + " vs d_T " +
                     std::to_string(layer.target_in()));
  }
  const Tensor x_source = linear(x_target, layer.map_to_source());
  return linear(lora_delta(layer.kernel(), x_source), layer.map_from_source());
}

Tensor identity_padded(std::size_t rows, std::size_t cols, double noise_std, Rng& rng) {
  if (rows == 0 || cols == 0) throw ParameterError("identity_padded: dimensions must be positive");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ParameterError("noise_std must be >= 0");
  std::vector<double> v(rows * cols, 0.0);
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) v[i * cols + i] = 1.0;
  if (noise_std > 0.0) {
    for (auto& x : v) x += rng.normal(0.0, noise_std);
  }
  return Tensor({rows, cols}, std::move(v));
}

std::pair<Tensor, Tensor> init_projectors(std::size_t d_target, std::size_t d_source, double noise_std,
                                          std::uint64_t seed) {
  Rng rng(seed);
  Tensor to_source = identity_padded(d_source, d_target, noise_std, rng);
  Tensor from_source = identity_padded(d_target, d_source, noise_std, rng);
  return {std::move(to_source), std::move(from_source)};
}

std::vector<int> layer_correspondence(int n_source_layers, int n_target_layers) {
  if (n_source_layers <= 0 || n_target_layers <= 0) throw ParameterError("layer counts must be positive");
  std::vector<int> out(static_cast<std::size_t>(n_target_layers));
  for (int i = 0; i < n_target_layers; ++i) {
    out[static_cast<std::size_t>(i)] =
        static_cast<int>((static_cast<long long>(i) * n_source_layers) / n_target_layers);
  }
  return out;
}

std::vector<Tensor> CastMapping::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) {
    out.push_back(l.layer.map_to_source());
    out.push_back(l.layer.map_from_source());
  }
  out.push_back(hidden_projector.matrix);
  return out;
}

std::uint32_t CastMapping::projector_checksum() const {
  const auto ts = trainable_tensors();
  return checksum(ts);
}

std::uint32_t CastMapping::kernel_checksum() const {
  std::vector<Tensor> ts;
  for (const auto& l : layers) {
    ts.push_back(l.layer.kernel().a_matrix());
    ts.push_back(l.layer.kernel().b_matrix());
  }
  return checksum(ts);
}

CastMapping build_cast_mapping(const TransformerModel& source, const std::vector<LoraAttachment>& source_adapters,
                               const TransformerModel& target, double noise_std, std::uint64_t seed) {
  if (source.config().vocab_size != target.config().vocab_size) {
    throw ParameterError("source and target must share one vocabulary");
  }
  CastMapping mapping;
  mapping.correspondence = layer_correspondence(source.config().n_layers, target.config().n_layers);
  mapping.source_digest = source.config().digest();
  mapping.target_digest = target.config().digest();
  Rng rng(seed);
  for (int t = 0; t < target.config().n_layers; ++t) {
    const int s = mapping.correspondence[static_cast<std::size_t>(t)];
    for (const auto& a : source_adapters) {
      if (a.slot.layer != s) continue;
      LoraAdapter kernel = a.adapter;
      kernel.freeze();
      const SlotKey target_slot{t, a.slot.projection};
      const auto [in_t, out_t] = target.slot_dims(target_slot);
      Tensor to_source = identity_padded(kernel.d_in(), in_t, noise_std, rng);
      Tensor from_source = identity_padded(out_t, kernel.d_out(), noise_std, rng);
      const std::uint32_t crc = kernel.checksum();
      mapping.layers.push_back({target_slot, a.slot, CastLayer(std::move(to_source), std::move(from_source), kernel), crc});
    }
  }
  if (mapping.layers.empty()) throw ParameterError("build_cast_mapping: no source adapter lies on a corresponding layer");
  const auto d_s = static_cast<std::size_t>(source.config().d_model);
  const auto d_t = static_cast<std::size_t>(target.config().d_model);
  mapping.hidden_projector.matrix = identity_padded(d_s, d_t, 0.0, rng);
  return mapping;
}

void attach_cast(TransformerModel& target, const CastMapping& mapping) {
  for (const auto& l : mapping.layers) {
    if (!l.layer.kernel().frozen()) throw ContractError("attach_cast: kernel at " + slot_name(l.target_slot) + " is not frozen");
    if (l.layer.kernel().checksum() != l.kernel_checksum) {
      throw IntegrityError("attach_cast: kernel at " + slot_name(l.target_slot) +
                           " does not match the source adapter checksum");
    }
  }
  std::vector<SlotKey> attached;
  try {
    for (const auto& l : mapping.layers) {
      target.attach(l.target_slot, std::make_shared<CastSlot>(l.layer));
      attached.push_back(l.target_slot);
    }
  } catch (...) {
    for (const auto& s : attached) target.detach(s);
    throw;
  }
}

void detach_cast(TransformerModel& target, const CastMapping& mapping) {
  for (const auto& l : mapping.layers) target.detach(l.target_slot);
}

}  // namespace cast
