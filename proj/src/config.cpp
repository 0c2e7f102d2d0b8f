// SPDX-License-Identifier: Apache-2.0
#include "cast/config.hpp"

#include <fstream>

#include "cast/error.hpp"
#include "cast/rng.hpp"

namespace cast {

namespace {

using nlohmann::json;

// Overlays `patch` onto `base`; every key of `patch` must exist in `base`.
void merge_strict(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

std::size_t get_size(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
    throw ConfigError(std::string("config: '") + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

int get_int(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError(std::string("config: '") + key + "' must be an integer");
  return v.get<int>();
}

double get_real(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError(std::string("config: '") + key + "' must be a number");
  return v.get<double>();
}

json arch_json(const ArchConfig& a) {
  return {{"d_model", a.d_model}, {"n_layers", a.n_layers}, {"n_heads", a.n_heads}, {"d_ff", a.d_ff},
          {"max_seq_len", a.max_seq_len}};
}

ArchConfig arch_from(const json& j) {
  return {get_int(j, "d_model"), get_int(j, "n_layers"), get_int(j, "n_heads"), get_int(j, "d_ff"),
          get_int(j, "max_seq_len")};
}

template <typename F>
auto as_config_error(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace

void PipelineConfig::validate() const {
  as_config_error([&] {
    source_model().validate();
    target_model().validate();
    source_lora().validate();
    task_spec().validate();
    distill().validate();
    if (pretrain.batch_size == 0 || pretrain.seq_len < 2) throw ConfigError("config: pretrain needs batch_size >= 1, seq_len >= 2");
    if (pretrain.seq_len > static_cast<std::size_t>(std::min(source.max_seq_len, target.max_seq_len))) {
      throw ConfigError("config: pretrain.seq_len exceeds max_seq_len");
    }
    if (cast.distill.seq_len > static_cast<std::size_t>(std::min(source.max_seq_len, target.max_seq_len))) {
      throw ConfigError("config: distill.seq_len exceeds max_seq_len");
    }
    if (task_spec().sequence_length() > static_cast<std::size_t>(std::min(source.max_seq_len, target.max_seq_len))) {
      throw ConfigError("config: task sequences exceed max_seq_len");
    }
    if (!(lora.dropout >= 0.0 && lora.dropout < 1.0)) throw ConfigError("config: lora.dropout must be in [0, 1)");
    if (lora.batch_size == 0) throw ConfigError("config: lora.batch_size must be positive");
    if (eval_examples == 0) throw ConfigError("config: eval_examples must be positive");
    if (svd_rank_budget == 0) throw ConfigError("config: svd_rank_budget must be positive");
    if (ablation_probe_batches == 0) throw ConfigError("config: ablation_probe_batches must be positive");
    if (!(cast.projector_noise_std >= 0.0)) throw ConfigError("config: projector_noise_std must be >= 0");
    if (vocab_size < 4) throw ConfigError("config: vocab_size must be >= 4");
    return 0;
  });
}

std::uint64_t PipelineConfig::stage_seed(std::uint64_t tag) const { return derive_seed(seed, tag); }

ModelConfig PipelineConfig::source_model() const {
  return {vocab_size, source.d_model, source.n_layers, source.n_heads, source.d_ff, source.max_seq_len,
          stage_seed(seed_tag::source_init)};
}

ModelConfig PipelineConfig::target_model() const {
  return {vocab_size, target.d_model, target.n_layers, target.n_heads, target.d_ff, target.max_seq_len,
          stage_seed(seed_tag::target_init)};
}

LoraSettings PipelineConfig::source_lora() const {
  LoraSettings s;
  s.rank = lora.rank;
  s.lora_alpha = lora.lora_alpha;
  s.projections = lora.slots;
  s.steps = lora.steps;
  s.learning_rate = lora.learning_rate;
  s.train.batch_size = lora.batch_size;
  s.train.dropout = lora.dropout;
  s.train.seed = stage_seed(seed_tag::source_lora);
  return s;
}

LoraSettings PipelineConfig::ceiling_lora() const {
  LoraSettings s = source_lora();
  s.train.seed = stage_seed(seed_tag::ceiling_lora);
  return s;
}

TaskSpec PipelineConfig::task_spec() const {
  TaskSpec t = task;
  t.vocab_size = vocab_size;
  t.seed = stage_seed(seed_tag::task);
  return t;
}

DistillConfig PipelineConfig::distill() const {
  DistillConfig d = cast.distill;
  d.seed = stage_seed(seed_tag::distill_stream);
  return d;
}

json pipeline_config_to_json(const PipelineConfig& c) {
  json slots = json::array();
  for (auto p : c.lora.slots) slots.push_back(projection_name(p));
  const auto& d = c.cast.distill;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"vocab_size", c.vocab_size},
      {"source", arch_json(c.source)},
      {"target", arch_json(c.target)},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"batch_size", c.pretrain.batch_size},
        {"seq_len", c.pretrain.seq_len},
        {"learning_rate", c.pretrain.learning_rate},
        {"corpus_kind", corpus_kind_name(c.pretrain_corpus)}}},
      {"lora",
       {{"rank", c.lora.rank},
        {"lora_alpha", c.lora.lora_alpha},
        {"slots", slots},
        {"steps", c.lora.steps},
        {"batch_size", c.lora.batch_size},
        {"learning_rate", c.lora.learning_rate},
        {"dropout", c.lora.dropout}}},
      {"distill",
       {{"alpha", d.alpha},
        {"beta", d.beta},
        {"temperature", d.temperature},
        {"steps", d.steps},
        {"batch_size", d.batch_size},
        {"seq_len", d.seq_len},
        {"learning_rate", d.learning_rate},
        {"kl_temperature_squared", d.kl_temperature_squared},
        {"corpus_kind", corpus_kind_name(c.cast.corpus_kind)},
        {"projector_noise_std", c.cast.projector_noise_std}}},
      {"task",
       {{"kind", task_kind_name(c.task.kind)},
        {"modulus", c.task.modulus},
        {"pattern_length", c.task.pattern_length},
        {"eval_examples", c.eval_examples}}},
      {"baselines", {{"svd_rank_budget", c.svd_rank_budget}}},
      {"ablation", {{"probe_batches", c.ablation_probe_batches}}},
  };
}

PipelineConfig pipeline_config_from_json(const json& input) {
  json j = pipeline_config_to_json(PipelineConfig{});
  merge_strict(j, input, "");
  return as_config_error([&] {
    PipelineConfig c;
    const json& seed = j.at("seed");
    if (!seed.is_number_unsigned()) throw ConfigError("config: 'seed' must be a non-negative integer");
    c.seed = seed.get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.vocab_size = get_int(j, "vocab_size");
    c.source = arch_from(j.at("source"));
    c.target = arch_from(j.at("target"));
    const json& p = j.at("pretrain");
    c.pretrain = {get_size(p, "steps"), get_size(p, "batch_size"), get_size(p, "seq_len"), get_real(p, "learning_rate")};
    c.pretrain_corpus = parse_corpus_kind(p.at("corpus_kind").get<std::string>());
    const json& l = j.at("lora");
    c.lora.rank = get_size(l, "rank");
    c.lora.lora_alpha = get_real(l, "lora_alpha");
    c.lora.slots.clear();
    for (const auto& s : l.at("slots")) c.lora.slots.push_back(parse_projection(s.get<std::string>()));
    c.lora.steps = get_size(l, "steps");
    c.lora.batch_size = get_size(l, "batch_size");
    c.lora.learning_rate = get_real(l, "learning_rate");
    c.lora.dropout = get_real(l, "dropout");
    const json& d = j.at("distill");
    auto& dc = c.cast.distill;
    dc.alpha = get_real(d, "alpha");
    dc.beta = get_real(d, "beta");
    dc.temperature = get_real(d, "temperature");
    dc.steps = get_size(d, "steps");
    dc.batch_size = get_size(d, "batch_size");
    dc.seq_len = get_size(d, "seq_len");
    dc.learning_rate = get_real(d, "learning_rate");
    dc.kl_temperature_squared = d.at("kl_temperature_squared").get<bool>();
    c.cast.corpus_kind = parse_corpus_kind(d.at("corpus_kind").get<std::string>());
    c.cast.projector_noise_std = get_real(d, "projector_noise_std");
    const json& t = j.at("task");
    c.task.kind = parse_task_kind(t.at("kind").get<std::string>());
    c.task.modulus = get_int(t, "modulus");
    c.task.pattern_length = get_int(t, "pattern_length");
    c.eval_examples = get_size(t, "eval_examples");
    c.svd_rank_budget = get_size(j.at("baselines"), "svd_rank_budget");
    c.ablation_probe_batches = get_size(j.at("ablation"), "probe_batches");
    c.validate();
    return c;
  });
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return pipeline_config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("config: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config: '" + key + "' is a section, not a value");
  *node = std::move(value);
}

}  // namespace cast
