// SPDX-License-Identifier: Apache-2.0
#include "cast/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "cast/error.hpp"

namespace cast {

namespace {

using nlohmann::json;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    if (n > b_.size() - pos_) throw TruncatedError(std::string("artifact truncated while reading ") + what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T uint(const char* what) {
    const auto s = bytes(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(s[i]) << (8 * i));
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

json slot_json(const SlotKey& s) { return {{"layer", s.layer}, {"projection", projection_name(s.projection)}}; }

SlotKey slot_from_json(const json& j) {
  return {j.at("layer").get<int>(), parse_projection(j.at("projection").get<std::string>())};
}

// Metadata field access errors become ValidationError.
template <typename F>
auto validated(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("artifact metadata: ") + e.what());
  } catch (const ParameterError& e) {
    throw ValidationError(std::string("artifact metadata: ") + e.what());
  }
}

const Tensor& find_tensor(const Artifact& a, const std::string& name, const Shape& shape) {
  for (const auto& t : a.tensors) {
    if (t.name != name) continue;
    if (t.tensor.shape() != shape) {
      throw ValidationError("tensor '" + name + "' has shape " + shape_string(t.tensor.shape()) + ", expected " +
                            shape_string(shape));
    }
    return t.tensor;
  }
  throw ValidationError("artifact lacks tensor '" + name + "'");
}

}  // namespace

std::string_view artifact_magic(ArtifactKind kind) {
  switch (kind) {
    case ArtifactKind::checkpoint: return "CASTCKPT";
    case ArtifactKind::adapter: return "CASTADPT";
    case ArtifactKind::mapping: return "CASTMAPR";
  }
  return "";
}

std::vector<std::uint8_t> encode_artifact(const Artifact& artifact) {
  Writer w;
  const auto magic = artifact_magic(artifact.kind);
  w.bytes(magic.data(), magic.size());
  w.uint<std::uint32_t>(kFormatVersion);
  const std::string meta = artifact.metadata.dump();
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(artifact.tensors.size()));
  for (const auto& [name, t] : artifact.tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ParameterError("tensor name too long");
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw ParameterError("tensor rank too large");
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.uint<std::uint64_t>(static_cast<std::uint64_t>(d));
    for (double v : t.values()) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) throw NumericError("tensor '" + name + "' holds a value outside float32 range");
      w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(f));
    }
  }
  return w.take();
}

Artifact decode_artifact(std::span<const std::uint8_t> bytes, ArtifactKind expected) {
  Reader r(bytes);
  const auto magic = artifact_magic(expected);
  if (bytes.size() < magic.size()) throw TruncatedError("artifact shorter than its magic");
  const auto got = r.bytes(magic.size(), "magic");
  if (!std::equal(got.begin(), got.end(), magic.begin())) {
    throw BadMagicError("bad magic: expected " + std::string(magic));
  }
  const auto version = r.uint<std::uint32_t>("format version");
  if (version != kFormatVersion) {
    throw UnsupportedVersionError("unsupported format version " + std::to_string(version) + " (reader supports " +
                                  std::to_string(kFormatVersion) + ")");
  }
  Artifact a;
  a.kind = expected;
  const auto meta_len = r.uint<std::uint32_t>("metadata length");
  const auto meta = r.bytes(meta_len, "metadata");
  try {
    a.metadata = json::parse(meta.begin(), meta.end());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("artifact metadata is not valid JSON: ") + e.what());
  }
  if (!a.metadata.is_object()) throw ValidationError("artifact metadata must be an object");
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.uint<std::uint16_t>("tensor name length");
    const auto name_bytes = r.bytes(name_len, "tensor name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.uint<std::uint8_t>("tensor rank");
    if (rank == 0) throw ValidationError("tensor '" + name + "' has rank 0");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto dim = r.uint<std::uint64_t>("tensor dims");
      if (dim == 0) throw ValidationError("tensor '" + name + "' has a zero dimension");
      if (numel > (bytes.size() / 4) / dim) throw TruncatedError("tensor '" + name + "' is larger than the file");
      numel *= dim;
      shape.push_back(static_cast<std::size_t>(dim));
    }
    const auto payload = r.bytes(static_cast<std::size_t>(numel) * 4, "tensor payload");
    std::vector<double> values(static_cast<std::size_t>(numel));
    for (std::size_t k = 0; k < values.size(); ++k) {
      std::uint32_t u = 0;
      for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(payload[k * 4 + b]) << (8 * b);
      const auto f = std::bit_cast<float>(u);
      if (!std::isfinite(f)) throw ValidationError("tensor '" + name + "' holds a non-finite value");
      values[k] = static_cast<double>(f);
    }
    for (const auto& t : a.tensors) {
      if (t.name == name) throw ValidationError("duplicate tensor '" + name + "'");
    }
    a.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (!r.done()) throw ValidationError("trailing bytes after the tensor table");
  return a;
}

void quantize_to_storage(Tensor& t) {
  for (auto& v : t.mutable_values()) v = static_cast<double>(static_cast<float>(v));
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path, std::string_view producing_stage) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string(), std::string(producing_stage));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const TransformerModel& model) {
  Artifact a;
  a.kind = ArtifactKind::checkpoint;
  a.metadata = {{"config", config_to_json(model.config())}, {"config_digest", model.config().digest()}};
  for (auto& [name, t] : model.named_parameters()) a.tensors.push_back({name, t});
  return encode_artifact(a);
}

TransformerModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const Artifact a = decode_artifact(bytes, ArtifactKind::checkpoint);
  const ModelConfig config = validated([&] {
    ModelConfig c = config_from_json(a.metadata.at("config"));
    c.validate();
    if (a.metadata.at("config_digest").get<std::string>() != c.digest()) {
      throw ValidationError("checkpoint config digest does not match its config");
    }
    return c;
  });
  TransformerModel model(config);
  const auto params = model.named_parameters();
  if (a.tensors.size() != params.size()) throw ValidationError("checkpoint tensor count does not match its config");
  for (auto [name, t] : params) {
    const Tensor& src = find_tensor(a, name, t.shape());
    const auto in = src.values();
    std::copy(in.begin(), in.end(), t.mutable_values().begin());
  }
  return model;
}

std::vector<std::uint8_t> encode_adapters(const AdapterSet& set) {
  Artifact a;
  a.kind = ArtifactKind::adapter;
  json list = json::array();
  for (const auto& att : set.adapters) {
    const auto& ad = att.adapter;
    list.push_back({{"slot", slot_json(att.slot)},
                    {"rank", ad.rank()},
                    {"lora_alpha", ad.lora_alpha()},
                    {"d_in", ad.d_in()},
                    {"d_out", ad.d_out()},
                    {"frozen", ad.frozen()}});
    a.tensors.push_back({slot_name(att.slot) + ".A", ad.a_matrix()});
    a.tensors.push_back({slot_name(att.slot) + ".B", ad.b_matrix()});
  }
  a.metadata = {{"adapters", list}, {"model_digest", set.model_digest}};
  return encode_artifact(a);
}

AdapterSet decode_adapters(std::span<const std::uint8_t> bytes) {
  const Artifact a = decode_artifact(bytes, ArtifactKind::adapter);
  AdapterSet set;
  const json& list = validated([&]() -> const json& {
    set.model_digest = a.metadata.at("model_digest").get<std::string>();
    return a.metadata.at("adapters");
  });
  if (!list.is_array()) throw ValidationError("adapter metadata: 'adapters' must be a list");
  if (a.tensors.size() != 2 * list.size()) throw ValidationError("adapter tensor count does not match its metadata");
  for (const auto& entry : list) {
    struct Declared {
      SlotKey slot;
      std::size_t rank, d_in, d_out;
      double alpha;
      bool frozen;
    };
    const Declared d = validated([&] {
      return Declared{slot_from_json(entry.at("slot")),     entry.at("rank").get<std::size_t>(),
                      entry.at("d_in").get<std::size_t>(),  entry.at("d_out").get<std::size_t>(),
                      entry.at("lora_alpha").get<double>(), entry.at("frozen").get<bool>()};
    });
    const Tensor& a_m = find_tensor(a, slot_name(d.slot) + ".A", {d.rank, d.d_in});
    const Tensor& b_m = find_tensor(a, slot_name(d.slot) + ".B", {d.d_out, d.rank});
    LoraAdapter adapter = validated([&] { return LoraAdapter(a_m, b_m, d.alpha); });
    if (d.frozen) adapter.freeze();
    set.adapters.push_back({adapter, d.slot});
  }
  return set;
}

std::vector<std::uint8_t> encode_mapping(const CastMapping& mapping) {
  Artifact a;
  a.kind = ArtifactKind::mapping;
  json layers = json::array();
  for (const auto& l : mapping.layers) {
    layers.push_back({{"target_slot", slot_json(l.target_slot)},
                      {"source_slot", slot_json(l.source_slot)},
                      {"kernel_checksum", l.kernel_checksum}});
    a.tensors.push_back({slot_name(l.target_slot) + ".map_to_source", l.layer.map_to_source()});
    a.tensors.push_back({slot_name(l.target_slot) + ".map_from_source", l.layer.map_from_source()});
  }
  a.tensors.push_back({"hidden_projector", mapping.hidden_projector.matrix});
  a.metadata = {{"layers", layers},
                {"correspondence", mapping.correspondence},
                {"source_digest", mapping.source_digest},
                {"target_digest", mapping.target_digest}};
  return encode_artifact(a);
}

CastMapping decode_mapping(std::span<const std::uint8_t> bytes, const std::vector<LoraAttachment>& source_adapters) {
  const Artifact a = decode_artifact(bytes, ArtifactKind::mapping);
  CastMapping m;
  const json& layers = validated([&]() -> const json& {
    m.correspondence = a.metadata.at("correspondence").get<std::vector<int>>();
    m.source_digest = a.metadata.at("source_digest").get<std::string>();
    m.target_digest = a.metadata.at("target_digest").get<std::string>();
    return a.metadata.at("layers");
  });
  if (!layers.is_array()) throw ValidationError("mapping metadata: 'layers' must be a list");
  if (a.tensors.size() != 2 * layers.size() + 1) throw ValidationError("mapping tensor count does not match its metadata");
  if (!std::is_sorted(m.correspondence.begin(), m.correspondence.end())) {
    throw ValidationError("mapping correspondence is not monotone");
  }
  for (const auto& entry : layers) {
    const SlotKey target_slot = validated([&] { return slot_from_json(entry.at("target_slot")); });
    const SlotKey source_slot = validated([&] { return slot_from_json(entry.at("source_slot")); });
    const auto crc = validated([&] { return entry.at("kernel_checksum").get<std::uint32_t>(); });
    const auto it = std::find_if(source_adapters.begin(), source_adapters.end(),
                                 [&](const LoraAttachment& s) { return s.slot == source_slot; });
    if (it == source_adapters.end()) {
      throw ValidationError("mapping refers to source slot " + slot_name(source_slot) + " with no adapter");
    }
    LoraAdapter kernel = it->adapter;
    kernel.freeze();
    if (kernel.checksum() != crc) {
      throw IntegrityError("kernel at " + slot_name(source_slot) + " does not match the checksum recorded in the mapping");
    }
    const auto find_any = [&](const std::string& name) -> const Tensor& {
      for (const auto& t : a.tensors) {
        if (t.name == name) return t.tensor;
      }
      throw ValidationError("mapping lacks tensor '" + name + "'");
    };
    const Tensor& to_source = find_any(slot_name(target_slot) + ".map_to_source");
    const Tensor& from_source = find_any(slot_name(target_slot) + ".map_from_source");
    try {
      m.layers.push_back({target_slot, source_slot, CastLayer(to_source, from_source, kernel), crc});
    } catch (const ShapeError& e) {
      throw ValidationError(std::string("mapping projector shapes: ") + e.what());
    }
  }
  for (const auto& t : a.tensors) {
    if (t.name == "hidden_projector") m.hidden_projector.matrix = t.tensor;
  }
  if (!m.hidden_projector.matrix.defined() || m.hidden_projector.matrix.rank() != 2) {
    throw ValidationError("mapping lacks a matrix 'hidden_projector'");
  }
  return m;
}

json eval_report_to_json(const EvalReport& report) {
  json scores = json::object();
  for (const auto& [k, v] : report.scores) scores[k] = v;
  json ratios = json::object();
  for (const auto& [k, r] : report.ratios) ratios[k] = {{"value", r.value}, {"raw", r.raw}, {"out_of_range", r.out_of_range}};
  return {{"scores", scores},
          {"ratios", ratios},
          {"performance_ratio", report.performance_ratio},
          {"n_examples", report.n_examples},
          {"seed", report.seed},
          {"notes", report.notes}};
}

json train_report_to_json(const TrainReport& report, const DistillConfig& cfg) {
  json trace = json::array();
  for (const auto& r : report.trace) trace.push_back({r.total, r.kl, r.mse});
  return {{"config",
           {{"alpha", cfg.alpha},
            {"beta", cfg.beta},
            {"temperature", cfg.temperature},
            {"steps", cfg.steps},
            {"batch_size", cfg.batch_size},
            {"seq_len", cfg.seq_len},
            {"learning_rate", cfg.learning_rate},
            {"kl_temperature_squared", cfg.kl_temperature_squared},
            {"seed", cfg.seed}}},
          {"trace_columns", {"total", "kl", "mse"}},
          {"trace", trace},
          {"corpus_checksum", report.corpus_checksum},
          {"projector_checksum", report.projector_checksum},
          {"kernel_checksum", report.kernel_checksum},
          {"source_checksum", report.source_checksum},
          {"target_checksum", report.target_checksum},
          {"teacher_invariant", report.teacher_invariant},
          {"wall_seconds", report.wall_seconds}};
}

std::string report_text(const json& j) { return j.dump(2) + "\n"; }

}  // namespace cast
