// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cast/baselines.hpp"
#include "cast/config.hpp"
#include "cast/distill.hpp"

// Stages of the end-to-end run. Each stage reads its inputs from artifact
// files in the output directory and writes its own, so any stage can be
// rerun on its own once its producers have run.
namespace cast {

namespace artifact_file {
inline constexpr std::string_view source_checkpoint = "source.ckpt";
inline constexpr std::string_view target_checkpoint = "target.ckpt";
inline constexpr std::string_view source_lora = "source_lora.adpt";
inline constexpr std::string_view ceiling_lora = "ceiling_lora.adpt";
inline constexpr std::string_view cast_mapping = "cast_mapping.mapr";
inline constexpr std::string_view svd_lora = "svd_lora.adpt";
inline constexpr std::string_view naive_lora = "naive_lora.adpt";
inline constexpr std::string_view pretrain_report = "pretrain_report.json";
inline constexpr std::string_view lora_report = "lora_report.json";
inline constexpr std::string_view cast_report = "train_cast_report.json";
inline constexpr std::string_view svd_report = "svd_report.json";
inline constexpr std::string_view eval_report = "eval_report.json";
inline constexpr std::string_view ablation_report = "ablation_report.json";
}  // namespace artifact_file

using StageLog = std::function<void(const std::string&)>;

void stage_pretrain(const PipelineConfig& cfg, const StageLog& log);
void stage_train_lora(const PipelineConfig& cfg, const StageLog& log);
TrainReport stage_train_cast(const PipelineConfig& cfg, const StageLog& log);
void stage_transfer_svd(const PipelineConfig& cfg, const StageLog& log);
void stage_transfer_naive(const PipelineConfig& cfg, const StageLog& log);
EvalReport stage_eval(const PipelineConfig& cfg, const StageLog& log);
std::vector<AblationRun> stage_ablate(const PipelineConfig& cfg, const StageLog& log);

/// pretrain, train-lora, train-cast, transfer-svd, transfer-naive, eval.
EvalReport run_pipeline(const PipelineConfig& cfg, const StageLog& log);

/// Stage names accepted by the CLI, in pipeline order.
const std::vector<std::string>& stage_names();

nlohmann::json ablation_report_to_json(const std::vector<AblationRun>& runs);

}  // namespace cast
