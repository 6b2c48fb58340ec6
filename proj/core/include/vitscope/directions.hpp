#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vitscope/poison.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {

std::string to_string(SteeringMode mode);
SteeringMode steering_mode_from_string(const std::string& name);

/// Per-tap mean activation difference between triggered and clean images.
/// vectors[l] has d entries in CLS mode and (T+1)*d in all-token mode.
struct DirectionSet {
  SteeringMode mode = SteeringMode::cls;
  std::vector<std::vector<double>> vectors;
  std::size_t pair_count = 0;

  std::size_t layers() const { return vectors.size(); }
};

/// r^l = mean over pairs of (x_t^l - x^l) at every tap 0..L.
DirectionSet derive_directions(const ModelParams& params, const ContrastivePairs& pairs,
                               SteeringMode mode, std::size_t chunk = 64);

/// CLS rows (the first d entries) of an all-token direction set.
DirectionSet cls_directions(const DirectionSet& all_tokens, std::size_t d_model);

/// Per-layer effect of single-injection steering with scale * r^l.
/// asr_plus[l]: clean non-target items pushed to the target by +r^l.
/// ra_minus[l]: triggered items restored to their label by -r^l.
struct SteeringSweep {
  SteeringMode mode = SteeringMode::cls;
  double scale = 1.0;
  std::vector<double> asr_plus;
  std::vector<double> ra_minus;

  std::size_t layers() const { return asr_plus.size(); }
};

/// Sweeps taps 0..L-1. `triggered_test` must carry original labels and
/// exclude target-origin items; `clean_test` items labeled target are
/// skipped for asr_plus.
SteeringSweep steering_sweep(const ModelParams& params, const LabeledImages& clean_test,
                             const LabeledImages& triggered_test, int target_class,
                             const DirectionSet& dirs, double scale = 1.0,
                             std::size_t jobs = 1);

/// The selected layer and its unit direction.
struct RHat {
  std::size_t layer = 0;
  std::vector<double> direction;
  double score = 0.0;  // the winning consecutive gain
};

/// l* = argmax over l >= 1 of (ASR+ + RA-)(l) - (ASR+ + RA-)(l-1), ties to
/// the smallest l; r_hat = r^{l*} / |r^{l*}|.
RHat select_rhat(const SteeringSweep& sweep_cls, const DirectionSet& dirs_cls);

/// Same selection from a precomputed (ASR+ + RA-) profile.
std::size_t select_layer(std::span<const double> combined);

}  // namespace vitscope
