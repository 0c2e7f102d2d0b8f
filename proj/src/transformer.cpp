// SPDX-License-Identifier: Apache-2.0
#include "cast/transformer.hpp"

#include <array>
#include <cmath>
#include <cstdio>

#include <boost/crc.hpp>

#include "cast/error.hpp"
#include "cast/ops.hpp"
#include "cast/rng.hpp"
#include "cast/tape.hpp"

namespace cast {

namespace {

constexpr std::array<Projection, 6> kProjections = {Projection::attn_q, Projection::attn_k, Projection::attn_v,
                                                     Projection::attn_o, Projection::mlp_up, Projection::mlp_down};

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

Tensor filled(std::size_t n, double value) { return Tensor({n}, std::vector<double>(n, value)); }

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0) {
    throw ParameterError("model config: every size must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ParameterError("model config: n_heads=" + std::to_string(n_heads) + " does not divide d_model=" +
                         std::to_string(d_model));
  }
}

std::size_t ModelConfig::head_dim() const {
  validate();
  return static_cast<std::size_t>(d_model / n_heads);
}

std::string ModelConfig::digest() const {
  const std::string canonical = "vocab_size=" + std::to_string(vocab_size) + ";d_model=" + std::to_string(d_model) +
                                ";n_layers=" + std::to_string(n_layers) + ";n_heads=" + std::to_string(n_heads) +
                                ";d_ff=" + std::to_string(d_ff) + ";max_seq_len=" + std::to_string(max_seq_len) +
                                ";seed=" + std::to_string(seed);
  boost::crc_32_type crc;
  crc.process_bytes(canonical.data(), canonical.size());
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc.checksum());
  return buf;
}

std::string_view projection_name(Projection p) {
  switch (p) {
    case Projection::attn_q: return "attn_q";
    case Projection::attn_k: return "attn_k";
    case Projection::attn_v: return "attn_v";
    case Projection::attn_o: return "attn_o";
    case Projection::mlp_up: return "mlp_up";
    case Projection::mlp_down: return "mlp_down";
  }
  throw ParameterError("unknown projection");
}

Projection parse_projection(std::string_view name) {
  for (auto p : kProjections) {
    if (projection_name(p) == name) return p;
  }
  throw ParameterError("unknown projection '" + std::string(name) + "'");
}

std::string slot_name(const SlotKey& slot) {
  return "layers." + std::to_string(slot.layer) + "." + std::string(projection_name(slot.projection));
}

LabeledBatch next_token_targets(TokenBatch tokens) {
  LabeledBatch out;
  out.targets.assign(tokens.ids.size(), -1);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    for (std::size_t t = 0; t + 1 < tokens.seq; ++t) out.targets[b * tokens.seq + t] = tokens.ids[b * tokens.seq + t + 1];
  }
  out.tokens = std::move(tokens);
  return out;
}

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  token_embedding_ = Tensor::zeros({static_cast<std::size_t>(config_.vocab_size), d});
  position_embedding_ = Tensor::zeros({static_cast<std::size_t>(config_.max_seq_len), d});
  for (int l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1_gain = filled(d, 1.0);
    b.ln1_bias = filled(d, 0.0);
    b.attn_q = Tensor::zeros({d, d});
    b.attn_k = Tensor::zeros({d, d});
    b.attn_v = Tensor::zeros({d, d});
    b.attn_o = Tensor::zeros({d, d});
    b.ln2_gain = filled(d, 1.0);
    b.ln2_bias = filled(d, 0.0);
    b.mlp_up = Tensor::zeros({ff, d});
    b.mlp_down = Tensor::zeros({d, ff});
    blocks_.push_back(std::move(b));
  }
  final_gain_ = filled(d, 1.0);
  final_bias_ = filled(d, 0.0);
  head_ = Tensor::zeros({static_cast<std::size_t>(config_.vocab_size), d});
}

TransformerModel TransformerModel::clone() const {
  TransformerModel copy(config_);
  auto dst = copy.named_parameters();
  auto src = named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto out = dst[i].second.mutable_values();
    const auto in = src[i].second.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
  return copy;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding_);
  out.emplace_back("position_embedding", position_embedding_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    const Block& b = blocks_[l];
    out.emplace_back(p + "ln1.gain", b.ln1_gain);
    out.emplace_back(p + "ln1.bias", b.ln1_bias);
    out.emplace_back(p + "attn_q", b.attn_q);
    out.emplace_back(p + "attn_k", b.attn_k);
    out.emplace_back(p + "attn_v", b.attn_v);
    out.emplace_back(p + "attn_o", b.attn_o);
    out.emplace_back(p + "ln2.gain", b.ln2_gain);
    out.emplace_back(p + "ln2.bias", b.ln2_bias);
    out.emplace_back(p + "mlp_up", b.mlp_up);
    out.emplace_back(p + "mlp_down", b.mlp_down);
  }
  out.emplace_back("final_norm.gain", final_gain_);
  out.emplace_back("final_norm.bias", final_bias_);
  out.emplace_back("head", head_);
  return out;
}

std::vector<Tensor> TransformerModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

Tensor TransformerModel::parameter(std::string_view name) const {
  for (auto& [n, t] : named_parameters()) {
    if (n == name) return t;
  }
  throw ParameterError("unknown parameter '" + std::string(name) + "'");
}

const Tensor& TransformerModel::weight(const SlotKey& slot) const {
  if (slot.layer < 0 || slot.layer >= config_.n_layers) {
    throw ParameterError("layer " + std::to_string(slot.layer) + " outside [0, " + std::to_string(config_.n_layers) +
                         ")");
  }
  const Block& b = blocks_[static_cast<std::size_t>(slot.layer)];
  switch (slot.projection) {
    case Projection::attn_q: return b.attn_q;
    case Projection::attn_k: return b.attn_k;
    case Projection::attn_v: return b.attn_v;
    case Projection::attn_o: return b.attn_o;
    case Projection::mlp_up: return b.mlp_up;
    case Projection::mlp_down: return b.mlp_down;
  }
  throw ParameterError("unknown projection");
}

Tensor TransformerModel::projection_weight(const SlotKey& slot) const { return weight(slot); }

std::pair<std::size_t, std::size_t> TransformerModel::slot_dims(const SlotKey& slot) const {
  const Tensor& w = weight(slot);
  return {w.dim(1), w.dim(0)};
}

void TransformerModel::set_trainable(bool trainable) {
  for (auto& t : parameters()) t.set_requires_grad(trainable);
}

bool TransformerModel::trainable() const {
  for (const auto& t : parameters()) {
    if (t.requires_grad()) return true;
  }
  return false;
}

SlotKey TransformerModel::register_adapter_slot(int layer, Projection projection) {
  const SlotKey key{layer, projection};
  weight(key);  // bounds check
  if (slots_.contains(key)) throw ConflictError("slot " + slot_name(key) + " is already registered");
  slots_.emplace(key, nullptr);
  return key;
}

bool TransformerModel::has_slot(const SlotKey& slot) const { return slots_.contains(slot); }

std::vector<SlotKey> TransformerModel::registered_slots() const {
  std::vector<SlotKey> out;
  for (const auto& [k, v] : slots_) out.push_back(k);
  return out;
}

void TransformerModel::attach(const SlotKey& slot, std::shared_ptr<const SlotAttachment> attachment) {
  auto it = slots_.find(slot);
  if (it == slots_.end()) throw ParameterError("slot " + slot_name(slot) + " is not registered");
  if (!attachment) throw ParameterError("attach: null attachment");
  if (it->second) throw ConflictError("slot " + slot_name(slot) + " already holds an attachment");
  const auto [in, out] = slot_dims(slot);
  if (attachment->in_features() != in || attachment->out_features() != out) {
    throw ShapeError("attachment " + std::to_string(attachment->in_features()) + "->" +
                     std::to_string(attachment->out_features()) + " does not fit slot " + slot_name(slot) + " " +
                     std::to_string(in) + "->" + std::to_string(out));
  }
  it->second = std::move(attachment);
}

void TransformerModel::detach(const SlotKey& slot) {
  auto it = slots_.find(slot);
  if (it == slots_.end()) throw ParameterError("slot " + slot_name(slot) + " is not registered");
  it->second.reset();
}

void TransformerModel::detach_all() {
  for (auto& [k, v] : slots_) v.reset();
}

std::shared_ptr<const SlotAttachment> TransformerModel::attachment(const SlotKey& slot) const {
  auto it = slots_.find(slot);
  return it == slots_.end() ? nullptr : it->second;
}

Tensor TransformerModel::project(const Tensor& x, int layer, Projection p) const {
  const SlotKey key{layer, p};
  Tensor y = linear(x, weight(key));
  if (auto it = slots_.find(key); it != slots_.end() && it->second) y = add(y, it->second->delta(x));
  return y;
}

ForwardOutput TransformerModel::forward(const TokenBatch& tokens) const {
  if (tokens.batch == 0 || tokens.seq == 0) throw ShapeError("forward: empty batch");
  if (tokens.ids.size() != tokens.batch * tokens.seq) throw ShapeError("forward: ids do not match batch x seq");
  if (tokens.seq > static_cast<std::size_t>(config_.max_seq_len)) {
    throw InputError("forward: seq " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % tokens.seq);

  Tensor x = add(embedding(token_embedding_, tokens.ids), embedding(position_embedding_, positions));
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  for (int l = 0; l < config_.n_layers; ++l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    const Tensor h = layer_norm(x, b.ln1_gain, b.ln1_bias);
    const Tensor q = project(h, l, Projection::attn_q);
    const Tensor k = project(h, l, Projection::attn_k);
    const Tensor v = project(h, l, Projection::attn_v);
    const Tensor a = causal_self_attention(q, k, v, tokens.batch, tokens.seq, heads);
    x = add(x, project(a, l, Projection::attn_o));
    const Tensor h2 = layer_norm(x, b.ln2_gain, b.ln2_bias);
    x = add(x, project(gelu(project(h2, l, Projection::mlp_up)), l, Projection::mlp_down));
  }
  const Tensor f = layer_norm(x, final_gain_, final_bias_);
  const Tensor logits = linear(f, head_);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  return {reshape(logits, {tokens.batch, tokens.seq, vocab}), reshape(f, {tokens.batch, tokens.seq, d})};
}

TransformerModel init_model(const ModelConfig& config) {
  TransformerModel model(config);
  Rng rng(config.seed);
  const double d = config.d_model;
  const double ff = config.d_ff;
  for (auto& [name, t] : model.named_parameters()) {
    double stddev = 0.0;
    if (name == "token_embedding" || name == "position_embedding") {
      stddev = 0.1;
    } else if (name == "head") {
      stddev = 0.02;
    } else if (name.ends_with("mlp_down")) {
      stddev = 1.0 / std::sqrt(ff);
    } else if (name.ends_with("attn_q") || name.ends_with("attn_k") || name.ends_with("attn_v") ||
               name.ends_with("attn_o") || name.ends_with("mlp_up")) {
      stddev = 1.0 / std::sqrt(d);
    } else {
      continue;  // norms keep gain 1, bias 0
    }
    const Tensor draw = gaussian(rng, t.shape(), stddev);
    auto out = t.mutable_values();
    const auto in = draw.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
  return model;
}

double pretrain_step(TransformerModel& model, const TokenBatch& batch, AdamState& optimizer) {
  if (!model.trainable()) throw ContractError("pretrain_step: model parameters are not trainable");
  if (batch.seq < 2) throw ShapeError("pretrain_step: next-token loss needs seq >= 2");
  const LabeledBatch labeled = next_token_targets(batch);
  auto params = model.parameters();
  double loss_value = 0.0;
  {
    Tape tape;
    TapeScope scope(tape);
    const ForwardOutput out = model.forward(labeled.tokens);
    const auto vocab = static_cast<std::size_t>(model.config().vocab_size);
    const Tensor loss = cross_entropy(reshape(out.logits, {batch.batch * batch.seq, vocab}), labeled.targets);
    loss_value = loss.item();
    backward_pass(loss, tape);
  }
  adam_step(params, optimizer);
  return loss_value;
}

std::uint32_t model_checksum(const TransformerModel& model) {
  const auto params = model.parameters();
  return checksum(params);
}

}  // namespace cast
