// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cast/tensor.hpp"

namespace cast {

/// Linear record of differentiable operations for reverse-mode AD.
///
/// Operations record themselves on the tape installed for the current thread
/// by a `TapeScope`, and only when at least one input requires a gradient.
/// Nodes are appended in execution order, which is a topological order.
class Tape {
 public:
  /// Reads output.grad() and accumulates into the captured inputs.
  using BackwardFn = std::function<void(const Tensor& output)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const noexcept { return id_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

 private:
  friend void backward_pass(const Tensor& loss, Tape& tape);

  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::uint64_t id_;
  std::vector<Node> nodes_;
};

/// Installs a tape as the active tape of the calling thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

/// Seeds d(loss)/d(loss) = 1 and replays the tape backwards, visiting each
/// node once. Throws ContractError if `loss` is not a scalar recorded on
/// `tape`.
void backward_pass(const Tensor& loss, Tape& tape);

}  // namespace cast
