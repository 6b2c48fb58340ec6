#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "vitscope/vit.hpp"

namespace vitscope {

struct DetectionConfig {
  std::size_t n_layers = 1;  // earliest blocks scanned, 1..L
  double threshold = 1.0;
  double z_cut = 3.0;

  void validate(std::size_t n_blocks) const;
};

/// s_i counts entries of c_i^T W with |value| > t over the patch embedding and
/// the attention/MLP output projections of the first n_layers blocks, where
/// c_i is row i of the classifier head.
std::vector<std::size_t> detection_scores(const ModelParams& params,
                                          const DetectionConfig& cfg);

struct ZScore {
  double z = 0.0;
  int top_class = 0;  // lowest index among tied maxima
};

/// Z = (s_top - s_second) / max(std(S without the top entry), t).
ZScore z_score(std::span<const std::size_t> scores, double threshold);

struct DetectionReport {
  std::vector<std::size_t> scores;
  int top_class = 0;
  double z = 0.0;
  std::optional<int> flagged;  // set iff z > z_cut
};

DetectionReport detect(const ModelParams& params, const DetectionConfig& cfg);

struct ZCell {
  std::size_t n_layers = 0;
  double threshold = 0.0;
  double z = 0.0;
  int top_class = 0;
  bool flagged = false;
};

/// Row-major (layers x thresholds) cross product.
struct ZGrid {
  std::vector<std::size_t> layers;
  std::vector<double> thresholds;
  double z_cut = 3.0;
  std::vector<ZCell> cells;

  const ZCell& cell(std::size_t layer_index, std::size_t threshold_index) const {
    return cells.at(layer_index * thresholds.size() + threshold_index);
  }
  /// Share of cells flagging `cls`.
  double flag_fraction(int cls) const;
  /// Share of cells flagging any class.
  double any_flag_rate() const;
};

ZGrid grid_search(const ModelParams& params, std::span<const std::size_t> layers,
                  std::span<const double> thresholds, double z_cut = 3.0,
                  std::size_t jobs = 1);

/// `count` thresholds spaced geometrically over [lo, hi].
std::vector<double> geometric_thresholds(double lo, double hi, std::size_t count);

}  // namespace vitscope
