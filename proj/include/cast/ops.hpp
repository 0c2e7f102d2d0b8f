// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "cast/tape.hpp"
#include "cast/tensor.hpp"

// Differentiable operations. Each one validates shapes, fails with
// NumericError instead of producing NaN/inf, and records a backward rule on
// the active tape when any input requires a gradient.
namespace cast {

/// [m×k] · [k×n] -> [m×n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// x · weightᵀ for x [n×in], weight [out×in]. This is the layout of every
/// projection matrix in the project (LoRA A/B, projectors, model weights).
Tensor linear(const Tensor& x, const Tensor& weight);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// softmax(logits / temperature) along the last axis, max-subtracted.
Tensor softmax_temperature(const Tensor& logits, double temperature);

/// Mean over rows of KL(softmax(teacher/T) || softmax(student/T)); rows are
/// all leading axes, the last axis is the vocabulary. The teacher never
/// receives a gradient.
Tensor kl_divergence_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                          double temperature);

/// Mean of squared element differences.
Tensor mse_loss(const Tensor& reference, const Tensor& prediction);

/// Mean next-token cross-entropy over rows whose target is not -1.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Row gather: table [V×d], ids in [0, V) -> [ids.size()×d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// tanh approximation.
Tensor gelu(const Tensor& x);

/// Multi-head causal attention over q, k, v laid out as [batch·seq × d_model];
/// position t attends to positions <= t of the same sequence.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t batch, std::size_t seq, std::size_t heads);

}  // namespace cast
