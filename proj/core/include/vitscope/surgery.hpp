#pragma once

#include <span>
#include <string>
#include <vector>

#include "vitscope/poison.hpp"
#include "vitscope/train.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {

struct OrthoOptions {
  /// Also project the CLS token, positional rows and residual-writer biases.
  bool project_vectors = true;
  /// Allowed deviation of |r_hat| from 1.
  double unit_tolerance = 1e-9;
};

struct OrthoReport {
  std::vector<std::string> updated;
  /// |r_hat^T W'| / max(|r_hat^T W|, tiny) per updated matrix.
  std::vector<double> residual;
  /// Largest |r_hat^T W'| entry across updated matrices.
  double max_leak = 0.0;
};

struct OrthoResult {
  ModelParams params;
  OrthoReport report;
};

/// Returns a copy with W' = W - r_hat (r_hat^T W) for every residual writer.
/// Throws std::invalid_argument for a non-unit r_hat and ShapeError when its
/// length is not d.
OrthoResult orthogonalize_params(const ModelParams& params, std::span<const double> r_hat,
                                 const OrthoOptions& options = {});

/// v - r_hat (r_hat^T v) in place.
void project_out(std::span<double> v, std::span<const double> r_hat);

/// Metrics of the edited model on the usual test split.
EvalMetrics verify_removal(const ModelParams& edited, const LabeledImages& clean_test,
                           const LabeledImages& triggered_test, int target_class);

}  // namespace vitscope
