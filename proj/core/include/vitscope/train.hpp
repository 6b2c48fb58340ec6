#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitscope/poison.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {

enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;  // sgd_momentum only
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Non-finite loss or parameters during training.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_history;  // mean batch loss per epoch
};

/// Trains a private copy of `params`; the input is left untouched. Adam uses
/// beta = (0.9, 0.999), eps = 1e-8 and decoupled weight decay.
TrainResult train(const ModelParams& params, const LabeledImages& data,
                  const TrainConfig& cfg);

struct EvalMetrics {
  double ca = 0.0;
  double asr = 0.0;
  double ra = 0.0;
  std::size_t clean_total = 0;
  std::size_t clean_correct = 0;
  std::size_t triggered_total = 0;
  std::size_t triggered_to_target = 0;
  std::size_t triggered_to_original = 0;
};

/// Pure metric computation. Triggered items whose original label is the
/// target are skipped, so ASR and RA are over non-target-origin items only.
EvalMetrics metrics_from_predictions(std::span<const int> clean_preds,
                                     std::span<const int> clean_labels,
                                     std::span<const int> triggered_preds,
                                     std::span<const int> triggered_labels,
                                     int target_class);

EvalMetrics evaluate(const ModelParams& params, const LabeledImages& clean_test,
                     const LabeledImages& triggered_test, int target_class);

}  // namespace vitscope
