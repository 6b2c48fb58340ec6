#include "vitscope/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vitscope {

void project_out(std::span<double> v, std::span<const double> r_hat) {
  if (v.size() != r_hat.size()) {
    throw ShapeError("project_out: length " + std::to_string(v.size()) + " vs " +
                     std::to_string(r_hat.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) dot += r_hat[i] * v[i];
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= r_hat[i] * dot;
}

namespace {

// r^T W for W stored (d x in).
std::vector<double> row_combination(const Tensor& w, std::span<const double> r) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  std::vector<double> u(cols, 0.0);
  const double* p = w.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) u[j] += r[i] * p[i * cols + j];
  }
  return u;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

OrthoResult orthogonalize_params(const ModelParams& params, std::span<const double> r_hat,
                                 const OrthoOptions& options) {
  const std::size_t d = params.config.d_model;
  if (r_hat.size() != d) {
    throw ShapeError("orthogonalize_params: r_hat has " + std::to_string(r_hat.size()) +
                     " entries, model width is " + std::to_string(d));
  }
  for (double x : r_hat) {
    if (!std::isfinite(x)) throw NonFiniteError("orthogonalize_params: r_hat is not finite");
  }
  const double n = norm2(r_hat);
  if (std::abs(n - 1.0) > options.unit_tolerance) {
    throw std::invalid_argument("orthogonalize_params: r_hat norm is " + std::to_string(n) +
                                ", expected 1");
  }

  OrthoResult out{params, {}};
  for (auto& [name, w] : residual_writers(out.params)) {
    if (w.ndim() != 2 || w.dim(0) != d) {
      throw ShapeError("orthogonalize_params: writer " + name + " has shape " +
                       shape_str(w.shape()));
    }
    const auto before = row_combination(w, r_hat);
    const std::size_t cols = w.dim(1);
    double* p = w.mutable_data().data();
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < cols; ++j) p[i * cols + j] -= r_hat[i] * before[j];
    }
    const auto after = row_combination(w, r_hat);
    out.report.updated.push_back(name);
    out.report.residual.push_back(norm2(after) / std::max(norm2(before), 1e-300));
    for (double x : after) out.report.max_leak = std::max(out.report.max_leak, std::abs(x));
  }
  if (options.project_vectors) {
    for (auto& [name, v] : residual_vectors(out.params)) {
      double* p = v.mutable_data().data();
      for (std::size_t off = 0; off < v.numel(); off += d) {
        project_out(std::span<double>(p + off, d), r_hat);
      }
      out.report.updated.push_back(name);
    }
  }
  return out;
}

EvalMetrics verify_removal(const ModelParams& edited, const LabeledImages& clean_test,
                           const LabeledImages& triggered_test, int target_class) {
  return evaluate(edited, clean_test, triggered_test, target_class);
}

}  // namespace vitscope
