// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

#include "cast/baselines.hpp"
#include "cast/distill.hpp"
#include "cast/task.hpp"
#include "cast/transformer.hpp"

namespace cast {

/// Architecture of one model; the vocabulary is shared and set globally.
struct ArchConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 16;
};

struct PretrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 16;
  double learning_rate = 3e-3;
};

struct LoraConfig {
  std::size_t rank = 4;
  double lora_alpha = 8.0;
  std::vector<Projection> slots = {Projection::attn_q, Projection::attn_v};
  std::size_t steps = 1000;
  std::size_t batch_size = 64;
  double learning_rate = 3e-3;
  double dropout = 0.0;
};

struct CastConfig {
  DistillConfig distill;
  CorpusKind corpus_kind = CorpusKind::markov;
  double projector_noise_std = 0.0;
};

/// Everything one end-to-end run needs. Per-stage seeds are derived from `seed`.
struct PipelineConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "runs/default";
  int vocab_size = 64;
  CorpusKind pretrain_corpus = CorpusKind::markov;
  ArchConfig source;
  ArchConfig target{48, 2, 4, 192, 16};
  PretrainConfig pretrain;
  LoraConfig lora;
  CastConfig cast;
  TaskSpec task;
  std::size_t eval_examples = 1000;
  std::size_t svd_rank_budget = 32;
  std::size_t ablation_probe_batches = 8;

  /// Throws ConfigError.
  void validate() const;

  ModelConfig source_model() const;
  ModelConfig target_model() const;
  LoraSettings source_lora() const;
  LoraSettings ceiling_lora() const;
  TaskSpec task_spec() const;
  DistillConfig distill() const;
  std::uint64_t stage_seed(std::uint64_t tag) const;
};

// Seed tags passed to PipelineConfig::stage_seed.
namespace seed_tag {
inline constexpr std::uint64_t source_init = 1;
inline constexpr std::uint64_t target_init = 2;
inline constexpr std::uint64_t corpus_table = 3;
inline constexpr std::uint64_t source_pretrain_stream = 4;
inline constexpr std::uint64_t target_pretrain_stream = 5;
inline constexpr std::uint64_t source_lora = 6;
inline constexpr std::uint64_t ceiling_lora = 7;
inline constexpr std::uint64_t task = 8;
inline constexpr std::uint64_t distill_stream = 9;
inline constexpr std::uint64_t mapping_init = 10;
inline constexpr std::uint64_t probe_stream = 11;
}  // namespace seed_tag

nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg);
/// Rejects unknown keys and ill-typed values with ConfigError. Missing keys keep defaults.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Applies `dotted.key=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise; the key must already exist.
void apply_override(nlohmann::json& j, std::string_view assignment);

}  // namespace cast
