// SPDX-License-Identifier: Apache-2.0
// castctl: drives the transfer pipeline stage by stage.
//
// Exit status: 0 success, 1 other failure, 2 configuration error, 3 artifact
// format error, 4 contract or integrity violation, 5 missing input artifact.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cast/config.hpp"
#include "cast/error.hpp"
#include "cast/io.hpp"
#include "cast/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> steps;
  std::optional<double> alpha, beta, temperature;
  std::vector<std::string> overrides;
};

cast::PipelineConfig resolve(const Options& o) {
  std::ifstream in(o.config);
  if (!in) throw cast::ConfigError("cannot open config '" + o.config + "'");
  nlohmann::json file;
  try {
    file = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw cast::ConfigError("config '" + o.config + "' is not valid JSON: " + e.what());
  }
  nlohmann::json j = cast::pipeline_config_to_json(cast::pipeline_config_from_json(file));
  for (const auto& s : o.overrides) cast::apply_override(j, s);
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) j["output_dir"] = *o.out;
  if (o.steps) j["distill"]["steps"] = *o.steps;
  if (o.alpha) j["distill"]["alpha"] = *o.alpha;
  if (o.beta) j["distill"]["beta"] = *o.beta;
  if (o.temperature) j["distill"]["temperature"] = *o.temperature;
  return cast::pipeline_config_from_json(j);
}

void print_eval(const cast::EvalReport& r) {
  for (const auto& name : cast::condition_names()) std::printf("%-18s %.4f\n", name.c_str(), r.scores.at(name));
  for (const auto& [name, ratio] : r.ratios) {
    std::printf("ratio[%s] %.4f%s\n", name.c_str(), ratio.value, ratio.out_of_range ? " (clamped)" : "");
  }
  for (const auto& n : r.notes) std::printf("note: %s\n", n.c_str());
}

int run(const std::string& command, const Options& o) {
  const cast::PipelineConfig cfg = resolve(o);
  const cast::StageLog log = [](const std::string& m) { std::cerr << m << '\n'; };
  std::filesystem::create_directories(cfg.output_dir);
  cast::write_text(std::filesystem::path(cfg.output_dir) / "resolved_config.json",
                   cast::report_text(cast::pipeline_config_to_json(cfg)));
  if (command == "pretrain") {
    cast::stage_pretrain(cfg, log);
  } else if (command == "train-lora") {
    cast::stage_train_lora(cfg, log);
  } else if (command == "train-cast") {
    cast::stage_train_cast(cfg, log);
  } else if (command == "transfer-svd") {
    cast::stage_transfer_svd(cfg, log);
  } else if (command == "transfer-naive") {
    cast::stage_transfer_naive(cfg, log);
  } else if (command == "eval") {
    print_eval(cast::stage_eval(cfg, log));
  } else if (command == "ablate") {
    for (const auto& r : cast::stage_ablate(cfg, log)) {
      std::printf("%-9s accuracy %.4f final_kl %.6f final_mse %.6f\n",
                  std::string(cast::ablation_variant_name(r.variant)).c_str(), r.accuracy, r.final_kl, r.final_mse);
    }
  } else {
    print_eval(cast::run_pipeline(cfg, log));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"castctl: train, transfer and evaluate LoRA adapters across mismatched transformers"};
  app.require_subcommand(1, 1);
  Options o;
  std::vector<CLI::App*> subs;
  for (const auto& name : cast::stage_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", o.config, "pipeline config (JSON)")->required();
    sub->add_option("--seed", o.seed, "global seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--steps", o.steps, "mapping training steps");
    sub->add_option("--alpha", o.alpha, "KL weight");
    sub->add_option("--beta", o.beta, "hidden-state MSE weight");
    sub->add_option("--temperature", o.temperature, "distillation temperature");
    sub->add_option("--set", o.overrides, "generic override key=value (repeatable)");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  std::string command;
  for (auto* s : subs) {
    if (s->parsed()) command = s->get_name();
  }
  try {
    return run(command, o);
  } catch (const cast::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 5;
  } catch (const cast::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const cast::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const cast::ContractError& e) {
    std::cerr << "contract error: " << e.what() << '\n';
    return 4;
  } catch (const cast::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
