// SPDX-License-Identifier: Apache-2.0
#include "cast/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cast/error.hpp"

namespace cast {

namespace {

// Row-major Eigen views over flat buffers.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<RowMatrix> as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<RowMatrix> as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return as_matrix(std::span<double>(v), rows, cols);
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

// Writable gradient buffer behind a (shared) handle.
std::span<double> grad_of(Tensor t) { return t.grad_accumulator(); }

Tensor finish(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
              Tape::BackwardFn backward) {
  check_finite(values, op);
  Tensor out(std::move(shape), std::move(values));
  Tape* tape = active_tape();
  if (tape == nullptr) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) tape->record(std::move(inputs), out, std::move(backward));
  return out;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive, got " + std::to_string(temperature));
  }
}

// Row-wise log-softmax of logits/temperature; rows of width `width`.
std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t width, double temperature) {
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < logits.size() / width; ++r) {
    const double* x = logits.data() + r * width;
    double* y = out.data() + r * width;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < width; ++j) mx = std::max(mx, x[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += std::exp(x[j] / temperature - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < width; ++j) y[j] = x[j] / temperature - lz;
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> c(m * n);
  as_matrix(c, m, n).noalias() = as_matrix(a.values(), m, k) * as_matrix(b.values(), k, n);
  return finish("matmul", {m, n}, std::move(c), {a, b}, [a, b, m, k, n](const Tensor& out) {
    const auto g = as_matrix(out.grad(), m, n);
    if (a.requires_grad()) as_matrix(grad_of(a), m, k).noalias() += g * as_matrix(b.values(), k, n).transpose();
    if (b.requires_grad()) as_matrix(grad_of(b), k, n).noalias() += as_matrix(a.values(), m, k).transpose() * g;
  });
}

Tensor linear(const Tensor& x, const Tensor& weight) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " + shape_string(weight.shape()));
  }
  std::vector<double> y(rows * out_dim);
  as_matrix(y, rows, out_dim).noalias() = as_matrix(x.values(), rows, in) * as_matrix(weight.values(), out_dim, in).transpose();
  return finish("linear", {rows, out_dim}, std::move(y), {x, weight},
                [x, weight, rows, in, out_dim](const Tensor& out) {
                  const auto g = as_matrix(out.grad(), rows, out_dim);
                  if (x.requires_grad()) {
                    as_matrix(grad_of(x), rows, in).noalias() += g * as_matrix(weight.values(), out_dim, in);
                  }
                  if (weight.requires_grad()) {
                    as_matrix(grad_of(weight), out_dim, in).noalias() += g.transpose() * as_matrix(x.values(), rows, in);
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> c(av.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] + bv[i];
  return finish("add", a.shape(), std::move(c), {a, b}, [a, b](const Tensor& out) {
    const auto g = out.grad();
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = grad_of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> c(av.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * bv[i];
  return finish("mul", a.shape(), std::move(c), {a, b}, [a, b](const Tensor& out) {
    const auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      const auto bv = b.values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      const auto av = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto av = a.values();
  std::vector<double> c(av.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * factor;
  return finish("scale", a.shape(), std::move(c), {a}, [a, factor](const Tensor& out) {
    const auto g = out.grad();
    auto ga = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  const auto av = a.values();
  double s = 0.0;
  for (double x : av) s += x;
  return finish("sum", {1}, {s}, {a}, [a](const Tensor& out) {
    const double g = out.grad()[0];
    auto ga = grad_of(a);
    for (auto& x : ga) x += g;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const auto av = a.values();
  return finish("reshape", std::move(shape), std::vector<double>(av.begin(), av.end()), {a},
                [a](const Tensor& out) {
                  const auto g = out.grad();
                  auto ga = grad_of(a);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
}

Tensor softmax_temperature(const Tensor& logits, double temperature) {
  require_temperature(temperature);
  const std::size_t width = logits.shape().back();
  auto y = log_softmax_rows(logits.values(), width, temperature);
  for (auto& v : y) v = std::exp(v);
  // Copy of the probabilities for the backward rule.
  std::vector<double> probs = y;
  return finish("softmax_temperature", logits.shape(), std::move(y), {logits},
                [logits, width, temperature, probs = std::move(probs)](const Tensor& out) {
                  const auto g = out.grad();
                  auto gl = grad_of(logits);
                  for (std::size_t r = 0; r < probs.size() / width; ++r) {
                    const double* p = probs.data() + r * width;
                    const double* gr = g.data() + r * width;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < width; ++j) dot += gr[j] * p[j];
                    for (std::size_t j = 0; j < width; ++j) gl[r * width + j] += p[j] * (gr[j] - dot) / temperature;
                  }
                });
}

Tensor kl_divergence_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  require_same_shape(teacher_logits, student_logits, "kl_divergence_loss");
  require_temperature(temperature);
  const std::size_t width = teacher_logits.shape().back();
  const std::size_t rows = teacher_logits.numel() / width;
  const auto log_p = log_softmax_rows(teacher_logits.values(), width, temperature);
  const auto log_q = log_softmax_rows(student_logits.values(), width, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    const double p = std::exp(log_p[i]);
    if (p > 0.0) total += p * (log_p[i] - log_q[i]);
  }
  const double loss = std::max(0.0, total / static_cast<double>(rows));
  // Only the student is an input of the recorded node: the teacher is detached.
  return finish("kl_divergence_loss", {1}, {loss}, {student_logits},
                [student_logits, log_p, log_q, rows, temperature](const Tensor& out) {
                  const double g = out.grad()[0] / (static_cast<double>(rows) * temperature);
                  auto gs = grad_of(student_logits);
                  for (std::size_t i = 0; i < log_p.size(); ++i) gs[i] += g * (std::exp(log_q[i]) - std::exp(log_p[i]));
                });
}

Tensor mse_loss(const Tensor& reference, const Tensor& prediction) {
  require_same_shape(reference, prediction, "mse_loss");
  const auto rv = reference.values();
  const auto pv = prediction.values();
  const double n = static_cast<double>(rv.size());
  double s = 0.0;
  for (std::size_t i = 0; i < rv.size(); ++i) {
    const double d = pv[i] - rv[i];
    s += d * d;
  }
  return finish("mse_loss", {1}, {s / n}, {reference, prediction}, [reference, prediction, n](const Tensor& out) {
    const double g = out.grad()[0] * 2.0 / n;
    const auto rv = reference.values();
    const auto pv = prediction.values();
    if (prediction.requires_grad()) {
      auto gp = grad_of(prediction);
      for (std::size_t i = 0; i < rv.size(); ++i) gp[i] += g * (pv[i] - rv[i]);
    }
    if (reference.requires_grad()) {
      auto gr = grad_of(reference);
      for (std::size_t i = 0; i < rv.size(); ++i) gr[i] -= g * (pv[i] - rv[i]);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.dim(0), width = logits.dim(1);
  if (targets.size() != rows) throw ShapeError("cross_entropy: one target per row required");
  const auto log_p = log_softmax_rows(logits.values(), width, 1.0);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == -1) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= width) throw InputError("cross_entropy: target id out of range");
    total -= log_p[r * width + static_cast<std::size_t>(t)];
    ++counted;
  }
  if (counted == 0) throw ParameterError("cross_entropy: every target is ignored");
  std::vector<int> tgt(targets.begin(), targets.end());
  return finish("cross_entropy", {1}, {total / static_cast<double>(counted)}, {logits},
                [logits, log_p, tgt = std::move(tgt), width, counted](const Tensor& out) {
                  const double g = out.grad()[0] / static_cast<double>(counted);
                  auto gl = grad_of(logits);
                  for (std::size_t r = 0; r < tgt.size(); ++r) {
                    if (tgt[r] == -1) continue;
                    for (std::size_t j = 0; j < width; ++j) gl[r * width + j] += g * std::exp(log_p[r * width + j]);
                    gl[r * width + static_cast<std::size_t>(tgt[r])] -= g;
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: no ids");
  const auto tv = table.values();
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * width, width, out.data() + i * width);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return finish("embedding", {ids.size(), width}, std::move(out), {table},
                [table, idx = std::move(idx), width](const Tensor& out) {
                  const auto g = out.grad();
                  auto gt = grad_of(table);
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    double* row = gt.data() + static_cast<std::size_t>(idx[i]) * width;
                    for (std::size_t j = 0; j < width; ++j) row[j] += g[i * width + j];
                  }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (gain.numel() != width || bias.numel() != width) throw ShapeError("layer_norm: gain/bias width mismatch");
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> xhat(xv.size()), inv_std(rows), y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += xr[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      xhat[r * width + j] = (xr[j] - mean) * inv_std[r];
      y[r * width + j] = xhat[r * width + j] * gv[j] + bv[j];
    }
  }
  return finish("layer_norm", x.shape(), std::move(y), {x, gain, bias},
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                 width](const Tensor& out) {
                  const auto g = out.grad();
                  const auto gv = gain.values();
                  if (gain.requires_grad() || bias.requires_grad()) {
                    std::span<double> gg, gb;
                    if (gain.requires_grad()) gg = grad_of(gain);
                    if (bias.requires_grad()) gb = grad_of(bias);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < width; ++j) {
                        if (!gg.empty()) gg[j] += g[r * width + j] * xhat[r * width + j];
                        if (!gb.empty()) gb[j] += g[r * width + j];
                      }
                    }
                  }
                  if (x.requires_grad()) {
                    auto gx = grad_of(x);
                    const double n = static_cast<double>(width);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t j = 0; j < width; ++j) {
                        const double d = g[r * width + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * width + j];
                      }
                      mean_d /= n;
                      mean_dx /= n;
                      for (std::size_t j = 0; j < width; ++j) {
                        const double d = g[r * width + j] * gv[j];
                        gx[r * width + j] += inv_std[r] * (d - mean_d - xhat[r * width + j] * mean_dx);
                      }
                    }
                  }
                });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xv[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
  }
  return finish("gelu", x.shape(), std::move(y), {x}, [x](const Tensor& out) {
    const auto g = out.grad();
    const auto xv = x.values();
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(c * (v + k * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      gx[i] += g[i] * d;
    }
  });
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                             std::size_t seq, std::size_t heads) {
  require_matrix(q, "causal_self_attention");
  require_same_shape(q, k, "causal_self_attention");
  require_same_shape(q, v, "causal_self_attention");
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * seq) throw ShapeError("causal_self_attention: rows != batch*seq");
  if (heads == 0 || d % heads != 0) throw ShapeError("causal_self_attention: heads must divide width");
  const std::size_t hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qv = q.values();
  const auto kv = k.values();
  const auto vv = v.values();

  // probs[(b, h, i, j)] with j <= i; stored densely as [batch][heads][seq][seq].
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> y(q.numel(), 0.0);
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qv.data() + (b * seq + i) * d + h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.data() + (b * seq + j) * d + h * hd;
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* p = probs.data() + ((b * heads + h) * seq + i) * seq;
        double* yi = y.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = scores[j] / z;
          const double* vj = vv.data() + (b * seq + j) * d + h * hd;
          for (std::size_t e = 0; e < hd; ++e) yi[e] += p[j] * vj[e];
        }
      }
    }
  }
  return finish(
      "causal_self_attention", q.shape(), std::move(y), {q, k, v},
      [q, k, v, probs = std::move(probs), batch, seq, heads, d, hd, inv_sqrt](const Tensor& out) {
        const auto g = out.grad();
        const auto qv = q.values();
        const auto kv = k.values();
        const auto vv = v.values();
        std::span<double> gq, gk, gv;
        if (q.requires_grad()) gq = grad_of(q);
        if (k.requires_grad()) gk = grad_of(k);
        if (v.requires_grad()) gv = grad_of(v);
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
              const double* p = probs.data() + ((b * heads + h) * seq + i) * seq;
              const double* gi = g.data() + (b * seq + i) * d + h * hd;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = vv.data() + (b * seq + j) * d + h * hd;
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) s += gi[e] * vj[e];
                dp[j] = s;
                dot += p[j] * s;
                if (!gv.empty()) {
                  double* gvj = gv.data() + (b * seq + j) * d + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gvj[e] += p[j] * gi[e];
                }
              }
              const double* qi = qv.data() + (b * seq + i) * d + h * hd;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = kv.data() + (b * seq + j) * d + h * hd;
                if (!gq.empty()) {
                  double* gqi = gq.data() + (b * seq + i) * d + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gqi[e] += ds * kj[e];
                }
                if (!gk.empty()) {
                  double* gkj = gk.data() + (b * seq + j) * d + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gkj[e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
}

}  // namespace cast
