#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vitscope/tensor.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {

/// Images (N, C, H, W) with one label per row.
struct LabeledImages {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  LabeledImages subset(std::span<const std::size_t> indices) const;
};

/// gratings: one orientation per class.
/// odd_strip: a random orientation everywhere except one vertical strip,
/// rotated by 90 degrees; the label is the strip index. No single patch
/// token determines the class.
enum class ToyTask { gratings, odd_strip };

std::string to_string(ToyTask task);
ToyTask toy_task_from_string(const std::string& name);

struct DatasetOptions {
  ToyTask task = ToyTask::gratings;
  std::size_t n_test_per_class = 100;
  /// Standard deviation of additive Gaussian pixel noise.
  double noise = 0.05;
  /// Amplitude of a fixed-phase pixel checkerboard, a stand-in for sensor
  /// grain. Resampling triggers attenuate it.
  double grain = 0.05;
};

struct ToyDataset {
  LabeledImages train;
  LabeledImages test;
};

/// Oriented sinusoidal gratings, one orientation per class, with jittered
/// frequency, phase and contrast plus pixel noise. Train and test come from
/// independent streams derived from `seed`.
ToyDataset generate_toy_dataset(std::size_t n_per_class, const ViTConfig& config,
                                std::uint64_t seed, const DatasetOptions& options = {});

enum class TriggerKind { patch, blended, warp };

std::string to_string(TriggerKind kind);
TriggerKind trigger_kind_from_string(const std::string& name);

struct TriggerSpec {
  TriggerKind kind = TriggerKind::patch;
  Shape image_shape;  // (C, H, W)

  // patch: `pattern` holds C * size * size values written at (row, col).
  std::size_t patch_row = 0;
  std::size_t patch_col = 0;
  std::size_t patch_size = 0;
  // blended: `pattern` holds a full C * H * W image.
  double alpha = 0.0;
  std::vector<double> pattern;

  // warp: displacement field (2, H, W) in pixels as (dy, dx); its magnitude
  // never exceeds `warp_amplitude`.
  double warp_amplitude = 0.0;
  std::size_t warp_grid = 0;
  std::uint64_t warp_seed = 0;
  std::vector<double> warp_field;

  /// Throws std::invalid_argument when the spec breaks its invariants.
  void validate() const;
};

/// Checkerboard patch of side `size` in the bottom-right corner, `margin`
/// pixels from the border.
TriggerSpec make_patch_trigger(const ViTConfig& config, std::size_t size = 3,
                               std::size_t margin = 1);
/// Fixed uniform-noise pattern mixed in with weight alpha.
TriggerSpec make_blended_trigger(const ViTConfig& config, double alpha = 0.15,
                                 std::uint64_t seed = 7);
/// Smooth displacement field interpolated from a random control grid.
TriggerSpec make_warp_trigger(const ViTConfig& config, double amplitude = 1.0,
                              std::size_t grid = 4, std::uint64_t seed = 11);

/// Applies the trigger to one (C, H, W) image in [0, 1]. Output is clamped to
/// [0, 1]. The warp rotates its displacement field by an angle derived from
/// the image content, so the perturbation is input-dependent but
/// deterministic.
std::vector<double> apply_trigger(std::span<const double> image,
                                  const TriggerSpec& spec);
/// Row-wise apply_trigger over an (N, C, H, W) batch.
Tensor apply_trigger_batch(const Tensor& images, const TriggerSpec& spec);

struct PoisonSpec {
  double rate = 0.1;
  int target_class = 0;
};

/// Aligned clean/triggered pairs: triggered[k] == apply_trigger(clean[k]).
struct ContrastivePairs {
  Tensor clean;
  Tensor triggered;

  std::size_t size() const { return clean.defined() ? clean.dim(0) : 0; }
};

struct PoisonedDataset {
  LabeledImages clean_train;
  std::vector<std::size_t> poison_indices;  // ascending, unique
  Tensor triggered_train;                   // one row per poison index
  int target_class = 0;
  LabeledImages clean_test;
  /// Triggered copies of test items whose label differs from the target,
  /// carrying their original labels.
  LabeledImages triggered_test;

  /// The dirty-label training set: clean items with poisoned ones replaced
  /// by their triggered copies labeled target_class.
  LabeledImages training_set() const;
};

struct PoisonResult {
  PoisonedDataset dataset;
  ContrastivePairs pairs;
};

PoisonResult poison_dataset(const ToyDataset& dataset, const TriggerSpec& trigger,
                            const PoisonSpec& spec, std::uint64_t seed);

/// Triggered copies of the items whose label is not `target_class`, keeping
/// the original labels.
LabeledImages triggered_non_target(const LabeledImages& set, const TriggerSpec& trigger,
                                   int target_class);

}  // namespace vitscope
