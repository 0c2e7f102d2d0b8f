// SPDX-License-Identifier: Apache-2.0
#include "cast/adam.hpp"

#include <cmath>
#include <string>

#include "cast/error.hpp"

namespace cast {

AdamState AdamState::with_learning_rate(double lr) {
  AdamState s;
  s.learning_rate = lr;
  return s;
}

void AdamState::validate() const {
  // A zero learning rate is allowed: it turns a training loop into a no-op.
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ParameterError("adam: learning_rate must be >= 0");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ParameterError("adam: betas must be in (0,1)");
  if (!(epsilon > 0.0)) throw ParameterError("adam: epsilon must be positive");
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  state.validate();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].frozen()) throw ContractError("adam_step: parameter " + std::to_string(i) + " is frozen");
    if (!params[i].has_grad()) throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
  }
  if (state.first_moment.empty() && state.step_count == 0) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ContractError("adam_step: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel() || state.second_moment[i].size() != params[i].numel()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) + " changed size between steps");
    }
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto g = params[i].grad();
    auto w = params[i].mutable_values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
      if (!std::isfinite(w[j])) throw NumericError("adam_step produced a non-finite parameter");
    }
    params[i].clear_grad();
  }
}

}  // namespace cast
