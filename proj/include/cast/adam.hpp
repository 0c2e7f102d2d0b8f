// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cast/tensor.hpp"

namespace cast {

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  // Sized lazily on the first step, one entry per parameter.
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamState with_learning_rate(double lr);
  void validate() const;
};

/// Bias-corrected Adam update in place, then clears the gradients.
/// Every parameter must carry a gradient and must not be frozen; the parameter
/// list must keep the same length and sizes across steps.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace cast
