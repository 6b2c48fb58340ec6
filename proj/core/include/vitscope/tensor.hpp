#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitscope {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operands do not conform. The message names the op and shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op receives NaN or infinite values.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a handle: copies alias the same storage, which is what the
/// tape needs to route gradients back to leaves. Use clone() for an
/// independent copy. Values are not modified by ops once constructed; only
/// the gradient buffer accumulates during backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }

  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Write access for initializers, optimizers and weight surgery. Never
  /// mutate a tensor that a live tape still references.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Allocates a zero gradient on first use. Const because gradient
  /// accumulation is the one mutation allowed through a shared handle.
  std::span<double> mutable_grad() const;
  void zero_grad() const;
  void clear_grad() const;

  /// Deep copy of values; the copy carries no gradient.
  Tensor clone() const;
  /// Same values viewed under a new shape, as an independent copy.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const {
    return storage_ == other.storage_;
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  explicit Tensor(std::shared_ptr<Storage> storage)
      : storage_(std::move(storage)) {}
  Storage& checked() const;

  std::shared_ptr<Storage> storage_;
};

bool all_finite(std::span<const double> values);

}  // namespace vitscope
