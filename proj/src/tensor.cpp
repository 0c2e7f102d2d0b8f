// SPDX-License-Identifier: Apache-2.0
#include "cast/tensor.hpp"

#include <boost/crc.hpp>

#include <algorithm>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "cast/error.hpp"

namespace cast {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  s_ = std::make_shared<Storage>();
  s_->shape = std::move(shape);
  s_->values = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!s_) throw ContractError("use of an undefined tensor");
  return s_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& sh = shape();
  if (axis >= sh.size()) throw ShapeError("axis out of range for shape " + shape_string(sh));
  return sh[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
  shape();
  return s_->values;
}

std::span<double> Tensor::mutable_values() {
  shape();
  if (s_->frozen) throw ContractError("write to a frozen tensor");
  return s_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor of shape " + shape_string(shape()));
  return s_->values[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const auto& sh = shape();
  if (sh.size() != 2 || row >= sh[0] || col >= sh[1]) throw ShapeError("at() out of range");
  return s_->values[row * sh[1] + col];
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  shape();
  if (value && s_->frozen) throw ContractError("frozen tensor cannot require a gradient");
  s_->requires_grad = value;
  if (!value) s_->grad.clear();
}

bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return s_->grad;
}

std::span<double> Tensor::grad_accumulator() {
  shape();
  if (s_->frozen) throw ContractError("gradient reached a frozen tensor");
  if (!s_->requires_grad) throw ContractError("gradient requested for a tensor that does not require one");
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
  return s_->grad;
}

void Tensor::clear_grad() {
  if (s_) s_->grad.clear();
}

bool Tensor::frozen() const { return s_ && s_->frozen; }

void Tensor::freeze() {
  shape();
  s_->frozen = true;
  s_->requires_grad = false;
  s_->grad.clear();
}

std::uint64_t Tensor::tape_id() const { return s_ ? s_->tape_id : 0; }

Tensor Tensor::clone() const { return Tensor(shape(), s_->values); }

std::uint32_t checksum(std::span<const Tensor> tensors) {
  boost::crc_32_type crc;
  for (const auto& t : tensors) {
    for (auto d : t.shape()) {
      const auto dim = static_cast<std::uint64_t>(d);
      crc.process_bytes(&dim, sizeof dim);
    }
    const auto v = t.values();
    crc.process_bytes(v.data(), v.size_bytes());
  }
  return crc.checksum();
}

std::uint32_t checksum(const Tensor& t) { return checksum(std::span<const Tensor>(&t, 1)); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto va = a.values();
  const auto vb = b.values();
  return std::memcmp(va.data(), vb.data(), va.size_bytes()) == 0;
}

}  // namespace cast
