#include "vitscope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace vitscope {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ", ";
    out += std::to_string(shape[i]);
  }
  if (shape.size() == 1) out += ",";
  out += ")";
  return out;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  auto storage = std::make_shared<Storage>();
  storage->data.assign(shape_numel(shape), value);
  storage->shape = std::move(shape);
  storage->requires_grad = requires_grad;
  return Tensor(std::move(storage));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto storage = std::make_shared<Storage>();
  storage->shape = std::move(shape);
  storage->data = std::move(values);
  storage->requires_grad = requires_grad;
  return Tensor(std::move(storage));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor::Storage& Tensor::checked() const {
  if (!storage_) throw std::logic_error("tensor: use of undefined tensor");
  return *storage_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().data.size(); }

std::span<const double> Tensor::data() const { return checked().data; }

std::span<double> Tensor::mutable_data() { return checked().data; }

double Tensor::item() const {
  const auto& s = checked();
  if (s.data.size() != 1) {
    throw ShapeError("tensor: item() on non-scalar shape " + shape_str(s.shape));
  }
  return s.data[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool value) { checked().requires_grad = value; }

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const double> Tensor::grad() const { return checked().grad; }

std::span<double> Tensor::mutable_grad() const {
  auto& s = checked();
  if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
  return s.grad;
}

void Tensor::zero_grad() const {
  auto& s = checked();
  if (!s.grad.empty()) std::fill(s.grad.begin(), s.grad.end(), 0.0);
}

void Tensor::clear_grad() const { checked().grad.clear(); }

Tensor Tensor::clone() const {
  const auto& s = checked();
  return from(s.shape, s.data, s.requires_grad);
}

Tensor Tensor::reshaped(Shape shape) const {
  const auto& s = checked();
  return from(std::move(shape), s.data, false);
}

}  // namespace vitscope
