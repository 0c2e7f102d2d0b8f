// SPDX-License-Identifier: Apache-2.0
#include "cast/tape.hpp"

#include <atomic>

#include "cast/error.hpp"

namespace cast {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local Tape* current_tape = nullptr;

}  // namespace

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  output.s_->requires_grad = true;
  output.s_->tape_id = id_;
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }

TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() noexcept { return current_tape; }

void backward_pass(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) throw ContractError("backward_pass needs a scalar loss");
  if (loss.tape_id() != tape.id()) throw ContractError("loss was not recorded on this tape");

  Tensor seed = loss;
  seed.grad_accumulator()[0] += 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    // Leaves reachable from this node get a (possibly zero) gradient buffer.
    for (auto& in : it->inputs) {
      if (in.requires_grad()) in.grad_accumulator();
    }
    it->backward(it->output);
  }
}

}  // namespace cast
