// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cast {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 tensor.
///
/// `Tensor` is a handle: copies share the same storage, so a parameter held by
/// a model and by an optimizer is one object. Use `clone()` for an independent
/// copy. Gradients are optional and only exist on tensors that require them.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return static_cast<bool>(s_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Writable view of the data. Throws ContractError on frozen tensors.
  std::span<double> mutable_values();

  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient buffer for accumulation, allocated as zeros on first use.
  std::span<double> grad_accumulator();
  void clear_grad();

  // Frozen tensors are immutable: they reject data writes, gradients and
  // requires_grad. Freezing cannot be undone.
  bool frozen() const;
  void freeze();

  std::uint64_t tape_id() const;

  Tensor clone() const;
  bool is_same(const Tensor& other) const noexcept { return s_ == other.s_; }

 private:
  friend class Tape;
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool frozen = false;
    std::uint64_t tape_id = 0;
  };
  std::shared_ptr<Storage> s_;
};

/// CRC-32 over the raw float64 bytes (shape included).
std::uint32_t checksum(const Tensor& t);
std::uint32_t checksum(std::span<const Tensor> tensors);

/// Same shape and identical bit patterns.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace cast
