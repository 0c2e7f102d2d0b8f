// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cast/adam.hpp"
#include "cast/distill.hpp"
#include "cast/lora.hpp"
#include "cast/task.hpp"
#include "cast/transformer.hpp"

namespace cast {

struct LoraSettings {
  std::size_t rank = 4;
  double lora_alpha = 8.0;
  std::vector<Projection> projections = {Projection::attn_q, Projection::attn_v};
  std::size_t steps = 1000;
  double learning_rate = 3e-3;
  LoraTrainOptions train;

  void validate() const;
  /// One slot per (layer, projection) over every layer of `config`.
  std::vector<SlotKey> slots(const ModelConfig& config) const;
};

/// Registers any missing slot of `slots` on `model`.
void ensure_slots(TransformerModel& model, const std::vector<SlotKey>& slots);

struct CeilingResult {
  std::vector<LoraAttachment> adapters;
  double accuracy = 0.0;
};

/// Trains fresh adapters directly on the target with task data and evaluates
/// them. Adapters are seeded from `settings.train.seed`; the target is left
/// without attachments.
CeilingResult retrain_ceiling(TransformerModel& target, const TaskSpec& task, const LoraSettings& settings,
                              std::size_t eval_examples);

struct SvdSlotReport {
  SlotKey slot;
  std::size_t k = 0;
  /// ‖R·Σ_S − Σ_T‖_F / ‖Σ_T‖_F after the Procrustes rotation R.
  double alignment_residual = 0.0;
  std::string note;
};

struct SvdTransferResult {
  std::vector<LoraAttachment> adapters;
  std::vector<SvdSlotReport> slots;
};

/// Weight-space baseline: per corresponding slot, truncated SVDs W = U Σ Vᵀ of
/// the source and target base weights (top k = min(rank_budget, dims)), an
/// orthogonal Procrustes rotation R between the singular frames, and
///   A_T = A_S · V_S · Rᵀ · V_Tᵀ,   B_T = U_T · R · U_Sᵀ · B_S.
/// Singular vectors are sign-canonicalized (largest-magnitude entry of each
/// input vector positive). Uses no data and no gradients.
SvdTransferResult svd_weight_transfer(const TransformerModel& source, const std::vector<LoraAttachment>& source_adapters,
                                      const TransformerModel& target, std::size_t rank_budget);

/// Zero-pads or truncates A's columns to d_in and B's rows to d_out.
LoraAdapter naive_dim_match(const LoraAdapter& adapter, std::size_t d_in, std::size_t d_out);

/// naive_dim_match on every corresponding slot of the target.
std::vector<LoraAttachment> naive_transfer(const std::vector<LoraAttachment>& source_adapters,
                                           const TransformerModel& source, const TransformerModel& target);

struct RatioResult {
  double value = 0.0;
  double raw = 0.0;
  bool out_of_range = false;
};

/// (transferred − base) / (ceiling − base), clamped to [0, 1.5]. Throws
/// UndefinedRatioError when ceiling <= base.
RatioResult performance_ratio(double base, double ceiling, double transferred);

/// Condition names in report order.
inline const std::vector<std::string>& condition_names() {
  static const std::vector<std::string> names = {"base_target",    "retrained_ceiling", "cast",
                                                 "svd_baseline",   "naive_baseline",    "source_with_lora"};
  return names;
}

struct EvalReport {
  std::map<std::string, double> scores;
  /// Ratio of each transferred condition (cast, svd_baseline, naive_baseline).
  std::map<std::string, RatioResult> ratios;
  double performance_ratio = 0.0;
  std::size_t n_examples = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  /// Fills `ratios` and `performance_ratio` from `scores`.
  void compute_ratios();
};

enum class AblationVariant { kl_only, mse_only, combined };

std::string_view ablation_variant_name(AblationVariant v);

struct AblationRun {
  AblationVariant variant = AblationVariant::combined;
  double alpha = 0.0;
  double beta = 0.0;
  double accuracy = 0.0;
  /// Mean KL and hidden MSE on held-out corpus batches after training.
  double final_kl = 0.0;
  double final_mse = 0.0;
  std::uint32_t corpus_checksum = 0;
  std::uint32_t projector_checksum = 0;
  std::vector<LossRecord> trace;
};

struct AblationPair {
  const TransformerModel* source = nullptr;  // with frozen LoRA attached
  TransformerModel* target = nullptr;
  std::vector<LoraAttachment> source_adapters;
};

struct AblationSetup {
  DistillConfig distill;
  CorpusKind corpus_kind = CorpusKind::markov;
  std::uint64_t corpus_table_seed = 0;
  std::uint64_t corpus_stream_seed = 0;
  std::uint64_t probe_stream_seed = 1;
  std::size_t probe_batches = 8;
  double projector_noise_std = 0.0;
  std::uint64_t mapping_seed = 0;
  std::size_t eval_examples = 1000;
};

/// Trains one mapping per variant with (α, β) ∈ {(1, 0), (0, 1), (1, β_default)}
/// and everything else identical, including the corpus stream.
std::vector<AblationRun> run_ablation(const AblationPair& pair, const TaskSpec& task, const AblationSetup& setup,
                                      const std::vector<AblationVariant>& variants);

}  // namespace cast
