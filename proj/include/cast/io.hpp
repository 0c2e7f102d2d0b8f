// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cast/baselines.hpp"
#include "cast/cast_mapper.hpp"
#include "cast/distill.hpp"
#include "cast/lora.hpp"
#include "cast/tensor.hpp"
#include "cast/transformer.hpp"

// Binary artifact layout, all integers little-endian:
//   magic[8] | u32 format_version | u32 metadata_length | metadata (compact JSON)
//   | u32 tensor_count | tensor*
//   tensor = u16 name_length | name | u8 rank | u64 dims[rank] | f32 values[numel]
// Values are computed in float64 and stored as float32; loading widens them
// back, so a value that went through one save/load cycle round-trips exactly.
namespace cast {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class ArtifactKind { checkpoint, adapter, mapping };

std::string_view artifact_magic(ArtifactKind kind);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Artifact {
  ArtifactKind kind = ArtifactKind::checkpoint;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

/// Throws NumericError for values that do not fit float32.
std::vector<std::uint8_t> encode_artifact(const Artifact& artifact);

/// Throws BadMagicError, UnsupportedVersionError, TruncatedError or
/// ValidationError (malformed metadata, trailing bytes, non-finite values).
Artifact decode_artifact(std::span<const std::uint8_t> bytes, ArtifactKind expected);

/// Rounds every value through float32, in place. Applied to anything whose
/// in-memory copy must equal what a reload would produce.
void quantize_to_storage(Tensor& t);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
/// Throws MissingArtifactError naming `producing_stage` when the file is absent.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path, std::string_view producing_stage);
void write_text(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> encode_checkpoint(const TransformerModel& model);
TransformerModel decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Adapters plus the digest of the model they were trained on.
struct AdapterSet {
  std::vector<LoraAttachment> adapters;
  std::string model_digest;
};

std::vector<std::uint8_t> encode_adapters(const AdapterSet& set);
/// Frozen adapters come back frozen.
AdapterSet decode_adapters(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_mapping(const CastMapping& mapping);
/// Kernels are looked up by source slot in `source_adapters`; a kernel whose
/// checksum differs from the recorded one is an IntegrityError.
CastMapping decode_mapping(std::span<const std::uint8_t> bytes, const std::vector<LoraAttachment>& source_adapters);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json eval_report_to_json(const EvalReport& report);
nlohmann::json train_report_to_json(const TrainReport& report, const DistillConfig& cfg);
/// Pretty-printed with sorted keys and a trailing newline.
std::string report_text(const nlohmann::json& j);

}  // namespace cast
