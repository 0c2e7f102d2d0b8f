// SPDX-License-Identifier: Apache-2.0
#include "cast/baselines.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "cast/cast_mapper.hpp"
#include "cast/error.hpp"

namespace cast {

namespace {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_eigen(const Tensor& t) {
  return Eigen::Map<const RowMatrix>(t.values().data(), static_cast<Eigen::Index>(t.dim(0)),
                                     static_cast<Eigen::Index>(t.dim(1)));
}

Tensor from_eigen(const Matrix& m) {
  const RowMatrix r = m;
  return Tensor({static_cast<std::size_t>(r.rows()), static_cast<std::size_t>(r.cols())},
                std::vector<double>(r.data(), r.data() + r.size()));
}

struct Factorization {
  Matrix u;  // [out × m]
  Eigen::VectorXd sigma;
  Matrix v;  // [in × m]
};

// Thin SVD with each input singular vector's largest-magnitude entry made
// positive; the paired output vector flips with it.
Factorization canonical_svd(const Matrix& w) {
  Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Factorization f{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  for (Eigen::Index j = 0; j < f.v.cols(); ++j) {
    Eigen::Index arg = 0;
    f.v.col(j).cwiseAbs().maxCoeff(&arg);
    if (f.v(arg, j) < 0.0) {
      f.v.col(j) *= -1.0;
      f.u.col(j) *= -1.0;
    }
  }
  return f;
}

// Largest k' <= k whose k'-th singular value is not negligible.
std::size_t usable_rank(const Eigen::VectorXd& sigma, std::size_t k) {
  const double tol = 1e-10 * (sigma.size() > 0 ? sigma(0) : 0.0);
  while (k > 0 && !(sigma(static_cast<Eigen::Index>(k - 1)) > tol)) --k;
  return k;
}

std::vector<LoraAttachment> adapters_for_layer(const std::vector<LoraAttachment>& adapters, int layer) {
  std::vector<LoraAttachment> out;
  for (const auto& a : adapters) {
    if (a.slot.layer == layer) out.push_back(a);
  }
  return out;
}

}  // namespace

void LoraSettings::validate() const {
  if (rank == 0) throw ParameterError("lora: rank must be positive");
  if (!(lora_alpha > 0.0)) throw ParameterError("lora: lora_alpha must be positive");
  if (projections.empty()) throw ParameterError("lora: at least one projection is required");
  if (!(learning_rate >= 0.0)) throw ParameterError("lora: learning_rate must be >= 0");
}

std::vector<SlotKey> LoraSettings::slots(const ModelConfig& config) const {
  std::vector<SlotKey> out;
  for (int l = 0; l < config.n_layers; ++l) {
    for (auto p : projections) out.push_back({l, p});
  }
  return out;
}

void ensure_slots(TransformerModel& model, const std::vector<SlotKey>& slots) {
  for (const auto& s : slots) {
    if (!model.has_slot(s)) model.register_adapter_slot(s.layer, s.projection);
  }
}

CeilingResult retrain_ceiling(TransformerModel& target, const TaskSpec& task, const LoraSettings& settings,
                              std::size_t eval_examples) {
  settings.validate();
  const auto slots = settings.slots(target.config());
  ensure_slots(target, slots);
  CeilingResult result;
  result.adapters = init_adapters(target, slots, settings.rank, settings.lora_alpha, settings.train.seed);
  TaskGenerator data = task_training_stream(task, settings.train.seed);
  AdamState optimizer = AdamState::with_learning_rate(settings.learning_rate);
  train_lora(target, result.adapters, data, settings.steps, optimizer, settings.train);
  attach_lora(target, result.adapters);
  result.accuracy = evaluate_task(target, task, eval_examples);
  detach_lora(target, result.adapters);
  return result;
}

SvdTransferResult svd_weight_transfer(const TransformerModel& source, const std::vector<LoraAttachment>& source_adapters,
                                      const TransformerModel& target, std::size_t rank_budget) {
  if (rank_budget == 0) throw ParameterError("svd_weight_transfer: rank budget must be positive");
  const auto corr = layer_correspondence(source.config().n_layers, target.config().n_layers);
  SvdTransferResult result;
  for (int t = 0; t < target.config().n_layers; ++t) {
    for (const auto& a : adapters_for_layer(source_adapters, corr[static_cast<std::size_t>(t)])) {
      const SlotKey target_slot{t, a.slot.projection};
      const Factorization fs = canonical_svd(to_eigen(source.projection_weight(a.slot)));
      const Factorization ft = canonical_svd(to_eigen(target.projection_weight(target_slot)));
      const auto full = static_cast<std::size_t>(std::min(fs.sigma.size(), ft.sigma.size()));
      const std::size_t wanted = std::min(rank_budget, full);
      SvdSlotReport rep{target_slot, std::min(usable_rank(fs.sigma, wanted), usable_rank(ft.sigma, wanted)), 0.0, {}};
      if (rep.k < wanted) {
        rep.note = "rank-deficient weights: k reduced from " + std::to_string(wanted) + " to " + std::to_string(rep.k);
      }
      if (rep.k == 0) throw NumericError("svd_weight_transfer: zero weight matrix at " + slot_name(target_slot));
      const auto k = static_cast<Eigen::Index>(rep.k);

      // Orthogonal Procrustes between the singular frames: R = argmin ‖R Σ_S − Σ_T‖_F.
      const Matrix sigma_s = fs.sigma.head(k).asDiagonal();
      const Matrix sigma_t = ft.sigma.head(k).asDiagonal();
      Eigen::JacobiSVD<Matrix> polar(sigma_t * sigma_s.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
      const Matrix r = polar.matrixU() * polar.matrixV().transpose();
      rep.alignment_residual = (r * sigma_s - sigma_t).norm() / sigma_t.norm();

      const Matrix a_t = to_eigen(a.adapter.a_matrix()) * fs.v.leftCols(k) * r.transpose() * ft.v.leftCols(k).transpose();
      const Matrix b_t = ft.u.leftCols(k) * r * fs.u.leftCols(k).transpose() * to_eigen(a.adapter.b_matrix());
      result.adapters.push_back({LoraAdapter(from_eigen(a_t), from_eigen(b_t), a.adapter.lora_alpha()), target_slot});
      result.slots.push_back(std::move(rep));
    }
  }
  return result;
}

LoraAdapter naive_dim_match(const LoraAdapter& adapter, std::size_t d_in, std::size_t d_out) {
  const std::size_t r = adapter.rank();
  std::vector<double> a(r * d_in, 0.0), b(d_out * r, 0.0);
  const auto av = adapter.a_matrix().values();
  const auto bv = adapter.b_matrix().values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < std::min(d_in, adapter.d_in()); ++j) a[i * d_in + j] = av[i * adapter.d_in() + j];
  }
  for (std::size_t i = 0; i < std::min(d_out, adapter.d_out()); ++i) {
    for (std::size_t j = 0; j < r; ++j) b[i * r + j] = bv[i * r + j];
  }
  return LoraAdapter(Tensor({r, d_in}, std::move(a)), Tensor({d_out, r}, std::move(b)), adapter.lora_alpha());
}

std::vector<LoraAttachment> naive_transfer(const std::vector<LoraAttachment>& source_adapters,
                                           const TransformerModel& source, const TransformerModel& target) {
  const auto corr = layer_correspondence(source.config().n_layers, target.config().n_layers);
  std::vector<LoraAttachment> out;
  for (int t = 0; t < target.config().n_layers; ++t) {
    for (const auto& a : adapters_for_layer(source_adapters, corr[static_cast<std::size_t>(t)])) {
      const SlotKey slot{t, a.slot.projection};
      const auto [in, o] = target.slot_dims(slot);
      out.push_back({naive_dim_match(a.adapter, in, o), slot});
    }
  }
  return out;
}

RatioResult performance_ratio(double base, double ceiling, double transferred) {
  if (!(ceiling > base)) {
    throw UndefinedRatioError("performance ratio undefined: ceiling " + std::to_string(ceiling) + " <= base " +
                              std::to_string(base));
  }
  RatioResult r;
  r.raw = (transferred - base) / (ceiling - base);
  r.value = std::clamp(r.raw, 0.0, 1.5);
  r.out_of_range = r.value != r.raw;
  return r;
}

void EvalReport::compute_ratios() {
  ratios.clear();
  const double base = scores.at("base_target");
  const double ceiling = scores.at("retrained_ceiling");
  for (const char* name : {"cast", "svd_baseline", "naive_baseline"}) {
    ratios[name] = cast::performance_ratio(base, ceiling, scores.at(name));
  }
  performance_ratio = ratios.at("cast").value;
}

std::string_view ablation_variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kl_only: return "kl_only";
    case AblationVariant::mse_only: return "mse_only";
    case AblationVariant::combined: return "combined";
  }
  return "unknown";
}

std::vector<AblationRun> run_ablation(const AblationPair& pair, const TaskSpec& task, const AblationSetup& setup,
                                      const std::vector<AblationVariant>& variants) {
  if (pair.source == nullptr || pair.target == nullptr) throw ParameterError("run_ablation: missing model");
  std::vector<AblationRun> runs;
  for (auto variant : variants) {
    AblationRun run;
    run.variant = variant;
    DistillConfig cfg = setup.distill;
    switch (variant) {
      case AblationVariant::kl_only: cfg.alpha = 1.0; cfg.beta = 0.0; break;
      case AblationVariant::mse_only: cfg.alpha = 0.0; cfg.beta = 1.0; break;
      case AblationVariant::combined: cfg.alpha = 1.0; cfg.beta = setup.distill.beta; break;
    }
    run.alpha = cfg.alpha;
    run.beta = cfg.beta;
    const CastMapping mapping =
        build_cast_mapping(*pair.source, pair.source_adapters, *pair.target, setup.projector_noise_std, setup.mapping_seed);
    CorpusStream corpus(setup.corpus_table_seed, setup.corpus_stream_seed, pair.target->config().vocab_size,
                        setup.corpus_kind);
    const TrainReport report = train_mappings(*pair.source, *pair.target, mapping, corpus, cfg);
    run.trace = report.trace;
    run.corpus_checksum = report.corpus_checksum;
    run.projector_checksum = report.projector_checksum;

    attach_cast(*pair.target, mapping);
    run.accuracy = evaluate_task(*pair.target, task, setup.eval_examples);
    CorpusStream probe(setup.corpus_table_seed, setup.probe_stream_seed, pair.target->config().vocab_size,
                       setup.corpus_kind);
    const AlignmentProbe p = probe_alignment(*pair.source, *pair.target, mapping, probe, setup.distill, setup.probe_batches);
    detach_cast(*pair.target, mapping);
    run.final_kl = p.kl;
    run.final_mse = p.mse;
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace cast
