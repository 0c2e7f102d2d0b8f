// SPDX-License-Identifier: Apache-2.0
#include "cast/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <boost/crc.hpp>

#include "cast/error.hpp"
#include "cast/ops.hpp"
#include "cast/tape.hpp"

namespace cast {

std::string_view corpus_kind_name(CorpusKind kind) { return kind == CorpusKind::uniform ? "uniform" : "markov"; }

CorpusKind parse_corpus_kind(std::string_view name) {
  if (name == "uniform") return CorpusKind::uniform;
  if (name == "markov") return CorpusKind::markov;
  throw ParameterError("unknown corpus kind '" + std::string(name) + "'");
}

CorpusStream::CorpusStream(std::uint64_t table_seed, std::uint64_t stream_seed, int vocab_size, CorpusKind kind)
    : vocab_(vocab_size), kind_(kind), rng_(stream_seed) {
  if (vocab_size < 4) throw ParameterError("corpus: vocab_size must be >= 4");
  if (kind_ != CorpusKind::markov) return;
  const auto v = static_cast<std::size_t>(vocab_);
  Rng table_rng(table_seed);
  table_.resize(v * v);
  cdf_.resize(v * v);
  for (std::size_t r = 0; r < v; ++r) {
    double* row = table_.data() + r * v;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < v; ++c) {
      row[c] = 3.0 * table_rng.normal(0.0, 1.0);
      mx = std::max(mx, row[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += (row[c] = std::exp(row[c] - mx));
    double acc = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      row[c] /= z;
      acc += row[c];
      cdf_[r * v + c] = acc;
    }
  }
}

int CorpusStream::sample_row(int row) {
  const auto v = static_cast<std::size_t>(vocab_);
  const double* cdf = cdf_.data() + static_cast<std::size_t>(row) * v;
  const double u = rng_.uniform(0.0, 1.0) * cdf[v - 1];
  const auto idx = static_cast<std::size_t>(std::upper_bound(cdf, cdf + v, u) - cdf);
  return static_cast<int>(std::min(idx, v - 1));
}

TokenBatch CorpusStream::next(std::size_t batch, std::size_t seq) {
  if (batch == 0 || seq == 0) throw ParameterError("corpus: batch and seq must be positive");
  TokenBatch out{batch, seq, std::vector<int>(batch * seq)};
  const auto v = static_cast<std::size_t>(vocab_);
  for (std::size_t b = 0; b < batch; ++b) {
    int cur = static_cast<int>(rng_.index(v));
    out.ids[b * seq] = cur;
    for (std::size_t t = 1; t < seq; ++t) {
      cur = kind_ == CorpusKind::markov ? sample_row(cur) : static_cast<int>(rng_.index(v));
      out.ids[b * seq + t] = cur;
    }
  }
  boost::crc_32_type crc;
  crc.process_bytes(&crc_state_, sizeof crc_state_);
  crc.process_bytes(out.ids.data(), out.ids.size() * sizeof(int));
  crc_state_ = crc.checksum();
  emitted_ += out.ids.size();
  return out;
}

std::uint32_t CorpusStream::emitted_checksum() const { return crc_state_; }

CorpusStream generate_corpus(std::uint64_t seed, int vocab_size, CorpusKind kind) {
  return CorpusStream(seed, seed, vocab_size, kind);
}

void DistillConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
    throw ParameterError("distill: alpha and beta must be non-negative");
  }
  if (!(alpha + beta > 0.0)) throw ParameterError("distill: alpha + beta must be positive");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ParameterError("distill: temperature must be positive");
  if (steps == 0 || batch_size == 0 || seq_len == 0) throw ParameterError("distill: steps, batch_size, seq_len must be positive");
  if (!(learning_rate > 0.0) && learning_rate != 0.0) throw ParameterError("distill: learning_rate must be >= 0");
}

CompositeLoss composite_loss(const Tensor& teacher_logits, const Tensor& student_logits, const Tensor& teacher_hidden,
                             const Tensor& student_hidden, const HiddenProjector& projector, const DistillConfig& cfg) {
  cfg.validate();
  if (teacher_logits.shape() != student_logits.shape()) throw ShapeError("composite_loss: logit shapes differ");
  const Shape& hs = teacher_hidden.shape();
  const Shape& ht = student_hidden.shape();
  if (hs.size() < 2 || ht.size() != hs.size() || !std::equal(hs.begin(), hs.end() - 1, ht.begin())) {
    throw ShapeError("composite_loss: hidden states disagree on leading axes");
  }
  const Tensor& ph = projector.matrix;
  if (ph.rank() != 2 || ph.dim(0) != hs.back() || ph.dim(1) != ht.back()) {
    throw ShapeError("composite_loss: P_H " + shape_string(ph.shape()) + " does not map " + std::to_string(ht.back()) +
                     " to " + std::to_string(hs.back()));
  }
  const std::size_t rows = teacher_hidden.numel() / hs.back();
  const Tensor kl = kl_divergence_loss(teacher_logits, student_logits, cfg.temperature);
  const Tensor projected = linear(reshape(student_hidden, {rows, ht.back()}), ph);
  const Tensor mse = mse_loss(reshape(teacher_hidden, {rows, hs.back()}), projected);
  const double m = cfg.kl_temperature_squared ? cfg.temperature * cfg.temperature : 1.0;
  CompositeLoss out;
  out.kl = kl.item();
  out.mse = mse.item();
  out.total = add(scale(kl, cfg.alpha * m), scale(mse, cfg.beta));
  return out;
}

namespace {

void require_no_grad(const std::vector<Tensor>& tensors, const char* what) {
  for (const auto& t : tensors) {
    if (t.has_grad()) throw ContractError(std::string("train_mappings: a gradient reached ") + what);
  }
}

// Detaches the mapping and drops requires_grad on exit.
struct MappingSession {
  TransformerModel& target;
  const CastMapping& mapping;
  std::vector<Tensor> params;
  ~MappingSession() {
    for (auto& p : params) p.set_requires_grad(false);
    detach_cast(target, mapping);
  }
};

}  // namespace

TrainReport train_mappings(const TransformerModel& source, TransformerModel& target, const CastMapping& mapping,
                           CorpusStream& corpus, const DistillConfig& cfg) {
  cfg.validate();
  if (source.trainable() || target.trainable()) throw ContractError("train_mappings: base models must be non-trainable");
  for (const auto& l : mapping.layers) {
    if (!l.layer.kernel().frozen()) throw ContractError("train_mappings: every kernel must be frozen");
  }
  if (corpus.vocab_size() != target.config().vocab_size) throw ParameterError("train_mappings: corpus vocabulary differs");

  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  const std::uint32_t source_before = model_checksum(source);
  const std::uint32_t target_before = model_checksum(target);
  const std::uint32_t kernel_before = mapping.kernel_checksum();
  const auto source_params = source.parameters();
  const auto target_params = target.parameters();
  std::vector<Tensor> kernels;
  for (const auto& l : mapping.layers) {
    kernels.push_back(l.layer.kernel().a_matrix());
    kernels.push_back(l.layer.kernel().b_matrix());
  }

  attach_cast(target, mapping);
  MappingSession session{target, mapping, mapping.trainable_tensors()};
  for (auto& p : session.params) p.set_requires_grad(true);
  AdamState optimizer = AdamState::with_learning_rate(cfg.learning_rate);

  Tensor first_teacher;
  TokenBatch first_batch;
  report.trace.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const TokenBatch batch = corpus.next(cfg.batch_size, cfg.seq_len);
    // No tape is active here, so the teacher pass records nothing.
    const ForwardOutput teacher = source.forward(batch);
    if (step == 0) {
      first_teacher = teacher.logits;
      first_batch = batch;
    }
    Tape tape;
    {
      TapeScope scope(tape);
      const ForwardOutput student = target.forward(batch);
      const CompositeLoss loss =
          composite_loss(teacher.logits, student.logits, teacher.final_hidden, student.final_hidden,
                         mapping.hidden_projector, cfg);
      report.trace.push_back({loss.total.item(), loss.kl, loss.mse});
      backward_pass(loss.total, tape);
    }
    require_no_grad(source_params, "a source parameter");
    require_no_grad(target_params, "a target parameter");
    require_no_grad(kernels, "a frozen kernel");
    adam_step(session.params, optimizer);
  }

  report.teacher_invariant = bit_equal(source.forward(first_batch).logits, first_teacher);
  report.corpus_checksum = corpus.emitted_checksum();
  report.projector_checksum = mapping.projector_checksum();
  report.kernel_checksum = mapping.kernel_checksum();
  report.source_checksum = model_checksum(source);
  report.target_checksum = model_checksum(target);
  if (report.kernel_checksum != kernel_before) throw IntegrityError("train_mappings: kernel bytes changed");
  if (report.source_checksum != source_before || report.target_checksum != target_before) {
    throw IntegrityError("train_mappings: base model bytes changed");
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

AlignmentProbe probe_alignment(const TransformerModel& source, const TransformerModel& target,
                               const CastMapping& mapping, CorpusStream& corpus, const DistillConfig& cfg,
                               std::size_t batches) {
  if (batches == 0) throw ParameterError("probe_alignment: batches must be positive");
  AlignmentProbe probe;
  for (std::size_t i = 0; i < batches; ++i) {
    const TokenBatch batch = corpus.next(cfg.batch_size, cfg.seq_len);
    const ForwardOutput teacher = source.forward(batch);
    const ForwardOutput student = target.forward(batch);
    const CompositeLoss loss = composite_loss(teacher.logits, student.logits, teacher.final_hidden,
                                              student.final_hidden, mapping.hidden_projector, cfg);
    probe.kl += loss.kl;
    probe.mse += loss.mse;
  }
  probe.kl /= static_cast<double>(batches);
  probe.mse /= static_cast<double>(batches);
  return probe;
}

}  // namespace cast
