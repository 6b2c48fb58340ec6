#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vitscope/directions.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {

/// l-infinity PGD, untargeted ascent on the loss of the supplied labels.
struct AdvConfig {
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 5;
  double step_size = 2.0 / 255.0;

  void validate() const;
};

/// Deterministic PGD without random start. Every output pixel stays inside
/// the epsilon ball around its input and inside [0, 1].
Tensor pgd_attack(const ModelParams& params, const Tensor& images,
                  std::span<const int> labels, const AdvConfig& cfg,
                  std::size_t chunk = 64, std::size_t jobs = 1);

/// v^l_i = CLS(a_i)^l - CLS(x_i)^l; layers[l] is (N, d).
struct ActivationDiffs {
  std::vector<Tensor> layers;

  std::size_t n_layers() const { return layers.size(); }
  std::size_t items() const { return layers.empty() ? 0 : layers[0].dim(0); }
  std::span<const double> at(std::size_t layer, std::size_t item) const;
};

ActivationDiffs activation_diffs(const ModelParams& params, const Tensor& originals,
                                 const Tensor& adversarials, std::size_t chunk = 64);

struct CosineStats {
  std::size_t count = 0;  // defined items
  double mean = 0.0;
  double std = 0.0;  // population
  double median = 0.0;
};

struct CosineTrace {
  /// cosines[l][i]; NaN when |v| < 1e-12 or r^l is zero.
  std::vector<std::vector<double>> cosines;
  std::vector<bool> layer_defined;
  /// Per-layer stats for items in the group and for the rest.
  std::vector<CosineStats> in_group;
  std::vector<CosineStats> out_group;
};

/// Cosine of every difference vector with r^l. `group` marks the items in
/// the first split (flipped to target, or reverted to original).
CosineTrace cosine_trace(const ActivationDiffs& diffs, const DirectionSet& dirs,
                         const std::vector<bool>& group);

CosineStats summarize(std::span<const double> values);

struct ClassDistribution {
  std::vector<std::size_t> histogram;
  std::size_t total = 0;
  double target_fraction = 0.0;
  double original_fraction = 0.0;  // preds equal to the supplied labels
};

ClassDistribution class_distribution(std::span<const int> preds, std::span<const int> labels,
                                     int target_class, std::size_t n_classes);

}  // namespace vitscope
