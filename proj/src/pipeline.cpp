// SPDX-License-Identifier: Apache-2.0
#include "cast/pipeline.hpp"

#include <chrono>
#include <cstdio>

#include "cast/error.hpp"
#include "cast/io.hpp"

namespace cast {

namespace {

using nlohmann::json;

std::filesystem::path out_path(const PipelineConfig& cfg, std::string_view name) {
  return std::filesystem::path(cfg.output_dir) / name;
}

TransformerModel load_model(const PipelineConfig& cfg, std::string_view name, const ModelConfig& expected) {
  TransformerModel model = decode_checkpoint(read_file(out_path(cfg, name), "pretrain"));
  if (model.config() != expected) {
    throw ConfigError("checkpoint '" + std::string(name) + "' was produced by a different config; rerun 'pretrain'");
  }
  return model;
}

AdapterSet load_adapters(const PipelineConfig& cfg, std::string_view name, std::string_view stage) {
  return decode_adapters(read_file(out_path(cfg, name), stage));
}

void save_adapters(const PipelineConfig& cfg, std::string_view name, const std::vector<LoraAttachment>& adapters,
                   const ModelConfig& model) {
  const auto bytes = encode_adapters({adapters, model.digest()});
  write_file(out_path(cfg, name), bytes);
}

std::string hex(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

json pretrain_model(const PipelineConfig& cfg, const ModelConfig& mc, std::uint64_t stream_tag, std::string_view file,
                    const StageLog& log) {
  TransformerModel model = init_model(mc);
  model.set_trainable(true);
  CorpusStream corpus(cfg.stage_seed(seed_tag::corpus_table), cfg.stage_seed(stream_tag), cfg.vocab_size,
                      cfg.pretrain_corpus);
  AdamState opt = AdamState::with_learning_rate(cfg.pretrain.learning_rate);
  std::vector<double> trace;
  for (std::size_t step = 0; step < cfg.pretrain.steps; ++step) {
    trace.push_back(pretrain_step(model, corpus.next(cfg.pretrain.batch_size, cfg.pretrain.seq_len), opt));
    if (step % 500 == 0 || step + 1 == cfg.pretrain.steps) {
      log(std::string(file) + " pretrain step " + std::to_string(step) + " loss " + std::to_string(trace.back()));
    }
  }
  model.set_trainable(false);
  write_file(out_path(cfg, file), encode_checkpoint(model));
  return {{"config_digest", mc.digest()}, {"loss_trace", trace}, {"corpus_checksum", corpus.emitted_checksum()}};
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"pretrain",       "train-lora", "train-cast", "transfer-svd",
                                                 "transfer-naive", "eval",       "ablate",     "pipeline"};
  return names;
}

void stage_pretrain(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  json report;
  report["source"] = pretrain_model(cfg, cfg.source_model(), seed_tag::source_pretrain_stream,
                                    artifact_file::source_checkpoint, log);
  report["target"] = pretrain_model(cfg, cfg.target_model(), seed_tag::target_pretrain_stream,
                                    artifact_file::target_checkpoint, log);
  write_text(out_path(cfg, artifact_file::pretrain_report), report_text(report));
}

void stage_train_lora(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  TransformerModel source = load_model(cfg, artifact_file::source_checkpoint, cfg.source_model());
  TransformerModel target = load_model(cfg, artifact_file::target_checkpoint, cfg.target_model());
  const TaskSpec task = cfg.task_spec();

  const LoraSettings s = cfg.source_lora();
  const auto slots = s.slots(source.config());
  ensure_slots(source, slots);
  auto adapters = init_adapters(source, slots, s.rank, s.lora_alpha, s.train.seed);
  TaskGenerator data = task_training_stream(task, s.train.seed);
  AdamState opt = AdamState::with_learning_rate(s.learning_rate);
  log("train-lora: source adapters on " + std::to_string(slots.size()) + " slots");
  const auto trace = train_lora(source, adapters, data, s.steps, opt, s.train);
  for (auto& a : adapters) freeze_adapter(a.adapter);
  save_adapters(cfg, artifact_file::source_lora, adapters, source.config());

  log("train-lora: ceiling adapters on the target");
  const CeilingResult ceiling = retrain_ceiling(target, task, cfg.ceiling_lora(), cfg.eval_examples);
  save_adapters(cfg, artifact_file::ceiling_lora, ceiling.adapters, target.config());

  json report = {{"source_loss_first", trace.empty() ? 0.0 : trace.front()},
                 {"source_loss_last", trace.empty() ? 0.0 : trace.back()},
                 {"source_loss_trace", trace}};
  write_text(out_path(cfg, artifact_file::lora_report), report_text(report));
}

TrainReport stage_train_cast(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  TransformerModel source = load_model(cfg, artifact_file::source_checkpoint, cfg.source_model());
  TransformerModel target = load_model(cfg, artifact_file::target_checkpoint, cfg.target_model());
  const AdapterSet kernels = load_adapters(cfg, artifact_file::source_lora, "train-lora");
  for (const auto& a : kernels.adapters) {
    if (!a.adapter.frozen()) throw ContractError("train-cast: source adapters must be stored frozen");
  }
  std::vector<SlotKey> source_slots;
  for (const auto& a : kernels.adapters) source_slots.push_back(a.slot);
  ensure_slots(source, source_slots);
  attach_lora(source, kernels.adapters);

  const CastMapping mapping = build_cast_mapping(source, kernels.adapters, target, cfg.cast.projector_noise_std,
                                                 cfg.stage_seed(seed_tag::mapping_init));
  std::vector<SlotKey> target_slots;
  for (const auto& l : mapping.layers) target_slots.push_back(l.target_slot);
  ensure_slots(target, target_slots);

  CorpusStream corpus(cfg.stage_seed(seed_tag::corpus_table), cfg.stage_seed(seed_tag::distill_stream), cfg.vocab_size,
                      cfg.cast.corpus_kind);
  const DistillConfig dc = cfg.distill();
  log("train-cast: " + std::to_string(mapping.layers.size()) + " CAST layers, " + std::to_string(dc.steps) + " steps");
  const TrainReport report = train_mappings(source, target, mapping, corpus, dc);
  log("train-cast: final loss " + std::to_string(report.trace.back().total));
  write_file(out_path(cfg, artifact_file::cast_mapping), encode_mapping(mapping));
  write_text(out_path(cfg, artifact_file::cast_report), report_text(train_report_to_json(report, dc)));
  return report;
}

void stage_transfer_svd(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  const TransformerModel source = load_model(cfg, artifact_file::source_checkpoint, cfg.source_model());
  const TransformerModel target = load_model(cfg, artifact_file::target_checkpoint, cfg.target_model());
  const AdapterSet kernels = load_adapters(cfg, artifact_file::source_lora, "train-lora");
  const SvdTransferResult result = svd_weight_transfer(source, kernels.adapters, target, cfg.svd_rank_budget);
  save_adapters(cfg, artifact_file::svd_lora, result.adapters, target.config());
  json slots = json::array();
  for (const auto& s : result.slots) {
    slots.push_back({{"slot", slot_name(s.slot)}, {"k", s.k}, {"alignment_residual", s.alignment_residual},
                     {"note", s.note}});
  }
  write_text(out_path(cfg, artifact_file::svd_report),
             report_text({{"method", "simplified SVD subspace alignment (weight-space baseline)"}, {"slots", slots}}));
  log("transfer-svd: " + std::to_string(result.adapters.size()) + " adapters");
}

void stage_transfer_naive(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  const TransformerModel source = load_model(cfg, artifact_file::source_checkpoint, cfg.source_model());
  const TransformerModel target = load_model(cfg, artifact_file::target_checkpoint, cfg.target_model());
  const AdapterSet kernels = load_adapters(cfg, artifact_file::source_lora, "train-lora");
  const auto adapters = naive_transfer(kernels.adapters, source, target);
  save_adapters(cfg, artifact_file::naive_lora, adapters, target.config());
  log("transfer-naive: " + std::to_string(adapters.size()) + " adapters");
}

EvalReport stage_eval(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  // Inputs are checked in pipeline order so the message names the earliest missing stage.
  TransformerModel source = load_model(cfg, artifact_file::source_checkpoint, cfg.source_model());
  TransformerModel target = load_model(cfg, artifact_file::target_checkpoint, cfg.target_model());
  const AdapterSet kernels = load_adapters(cfg, artifact_file::source_lora, "train-lora");
  const AdapterSet ceiling = load_adapters(cfg, artifact_file::ceiling_lora, "train-lora");
  const auto mapping_bytes = read_file(out_path(cfg, artifact_file::cast_mapping), "train-cast");
  const AdapterSet svd = load_adapters(cfg, artifact_file::svd_lora, "transfer-svd");
  const AdapterSet naive = load_adapters(cfg, artifact_file::naive_lora, "transfer-naive");
  const CastMapping mapping = decode_mapping(mapping_bytes, kernels.adapters);
  if (mapping.source_digest != source.config().digest() || mapping.target_digest != target.config().digest()) {
    throw IntegrityError("eval: mapping was trained for a different model pair; rerun 'train-cast'");
  }

  const TaskSpec task = cfg.task_spec();
  const std::size_t n = cfg.eval_examples;
  EvalReport report;
  report.n_examples = n;
  report.seed = cfg.seed;

  const auto score_with = [&](TransformerModel& model, const std::vector<LoraAttachment>& adapters) {
    std::vector<SlotKey> slots;
    for (const auto& a : adapters) slots.push_back(a.slot);
    ensure_slots(model, slots);
    attach_lora(model, adapters);
    const double acc = evaluate_task(model, task, n);
    detach_lora(model, adapters);
    return acc;
  };

  report.scores["base_target"] = evaluate_task(target, task, n);
  report.scores["retrained_ceiling"] = score_with(target, ceiling.adapters);
  {
    std::vector<SlotKey> slots;
    for (const auto& l : mapping.layers) slots.push_back(l.target_slot);
    ensure_slots(target, slots);
    attach_cast(target, mapping);
    report.scores["cast"] = evaluate_task(target, task, n);
    detach_cast(target, mapping);
  }
  report.scores["svd_baseline"] = score_with(target, svd.adapters);
  report.scores["naive_baseline"] = score_with(target, naive.adapters);
  report.scores["source_with_lora"] = score_with(source, kernels.adapters);
  report.notes.push_back("svd_baseline is a simplified per-slot weight-space SVD alignment");
  try {
    report.compute_ratios();
  } catch (const UndefinedRatioError& e) {
    report.notes.push_back(std::string("performance ratio undefined: ") + e.what());
  }
  for (const auto& [k, v] : report.scores) log("eval: " + k + " = " + std::to_string(v));
  write_text(out_path(cfg, artifact_file::eval_report), report_text(eval_report_to_json(report)));
  return report;
}

json ablation_report_to_json(const std::vector<AblationRun>& runs) {
  json out = json::object();
  for (const auto& r : runs) {
    json trace = json::array();
    for (const auto& t : r.trace) trace.push_back({t.total, t.kl, t.mse});
    out[std::string(ablation_variant_name(r.variant))] = {{"alpha", r.alpha},
                                                          {"beta", r.beta},
                                                          {"accuracy", r.accuracy},
                                                          {"final_kl", r.final_kl},
                                                          {"final_mse", r.final_mse},
                                                          {"corpus_checksum", hex(r.corpus_checksum)},
                                                          {"projector_checksum", hex(r.projector_checksum)},
                                                          {"trace", trace}};
  }
  return out;
}

std::vector<AblationRun> stage_ablate(const PipelineConfig& cfg, const StageLog& log) {
  cfg.validate();
  TransformerModel source = load_model(cfg, artifact_file::source_checkpoint, cfg.source_model());
  TransformerModel target = load_model(cfg, artifact_file::target_checkpoint, cfg.target_model());
  const AdapterSet kernels = load_adapters(cfg, artifact_file::source_lora, "train-lora");
  std::vector<SlotKey> source_slots;
  for (const auto& a : kernels.adapters) source_slots.push_back(a.slot);
  ensure_slots(source, source_slots);
  attach_lora(source, kernels.adapters);
  std::vector<SlotKey> target_slots;
  const auto corr = layer_correspondence(source.config().n_layers, target.config().n_layers);
  for (int t = 0; t < target.config().n_layers; ++t) {
    for (const auto& a : kernels.adapters) {
      if (a.slot.layer == corr[static_cast<std::size_t>(t)]) target_slots.push_back({t, a.slot.projection});
    }
  }
  ensure_slots(target, target_slots);

  AblationSetup setup;
  setup.distill = cfg.distill();
  setup.corpus_kind = cfg.cast.corpus_kind;
  setup.corpus_table_seed = cfg.stage_seed(seed_tag::corpus_table);
  setup.corpus_stream_seed = cfg.stage_seed(seed_tag::distill_stream);
  setup.probe_stream_seed = cfg.stage_seed(seed_tag::probe_stream);
  setup.probe_batches = cfg.ablation_probe_batches;
  setup.projector_noise_std = cfg.cast.projector_noise_std;
  setup.mapping_seed = cfg.stage_seed(seed_tag::mapping_init);
  setup.eval_examples = cfg.eval_examples;
  log("ablate: kl_only, mse_only, combined");
  const auto runs = run_ablation({&source, &target, kernels.adapters}, cfg.task_spec(), setup,
                                 {AblationVariant::kl_only, AblationVariant::mse_only, AblationVariant::combined});
  write_text(out_path(cfg, artifact_file::ablation_report), report_text(ablation_report_to_json(runs)));
  return runs;
}

EvalReport run_pipeline(const PipelineConfig& cfg, const StageLog& log) {
  stage_pretrain(cfg, log);
  stage_train_lora(cfg, log);
  stage_train_cast(cfg, log);
  stage_transfer_svd(cfg, log);
  stage_transfer_naive(cfg, log);
  return stage_eval(cfg, log);
}

}  // namespace cast
