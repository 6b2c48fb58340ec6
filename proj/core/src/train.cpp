#include "vitscope/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vitscope/ops.hpp"

namespace vitscope {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw std::invalid_argument("unknown optimizer '" + name +
                              "' (expected adam or sgd_momentum)");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train: learning_rate must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("train: momentum must lie in [0, 1)");
  }
}

TrainResult train(const ModelParams& params, const LabeledImages& data,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");

  TrainResult result{params, {}};
  ModelParams& model = result.params;
  model.set_requires_grad(true);
  auto named = model.named_tensors();

  std::vector<std::vector<double>> m1(named.size()), m2(named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    m1[i].assign(named[i].tensor.numel(), 0.0);
    if (cfg.optimizer == OptimizerKind::adam) m2[i].assign(named[i].tensor.numel(), 0.0);
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::size_t step = 0;

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::mt19937_64 rng(cfg.seed);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const LabeledImages batch = data.subset(idx);

      for (auto& t : named) t.tensor.zero_grad();
      double loss_value = 0.0;
      try {
        Tape tape;
        Tensor logits = forward(tape, model, batch.images);
        Tensor loss = ops::cross_entropy(tape, logits, batch.labels);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NonFiniteError("loss is not finite");
        tape.backward(loss);
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged("train: divergence at epoch " + std::to_string(epoch) +
                               ", batch " + std::to_string(batches) + ": " + e.what());
      }

      ++step;
      const double lr = cfg.learning_rate;
      for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor& t = named[i].tensor;
        if (!t.has_grad()) continue;
        auto w = t.mutable_data();
        const auto g = t.grad();
        auto& v = m1[i];
        if (cfg.optimizer == OptimizerKind::sgd_momentum) {
          for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j] + cfg.weight_decay * w[j];
            v[j] = cfg.momentum * v[j] + gj;
            w[j] -= lr * v[j];
          }
        } else {
          auto& s = m2[i];
          const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
          const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
          for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = kBeta1 * v[j] + (1.0 - kBeta1) * g[j];
            s[j] = kBeta2 * s[j] + (1.0 - kBeta2) * g[j] * g[j];
            const double update = (v[j] / c1) / (std::sqrt(s[j] / c2) + kEps);
            w[j] -= lr * (update + cfg.weight_decay * w[j]);
          }
        }
        if (!all_finite(w)) {
          throw TrainingDiverged("train: non-finite parameter '" + named[i].name +
                                 "' at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batches));
        }
      }
      epoch_loss += loss_value;
      ++batches;
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(batches));
  }

  for (auto& t : named) t.tensor.clear_grad();
  model.set_requires_grad(false);
  return result;
}

EvalMetrics metrics_from_predictions(std::span<const int> clean_preds,
                                     std::span<const int> clean_labels,
                                     std::span<const int> triggered_preds,
                                     std::span<const int> triggered_labels,
                                     int target_class) {
  if (clean_preds.size() != clean_labels.size() ||
      triggered_preds.size() != triggered_labels.size()) {
    throw std::invalid_argument("metrics: predictions and labels differ in length");
  }
  EvalMetrics m;
  m.clean_total = clean_labels.size();
  for (std::size_t i = 0; i < clean_labels.size(); ++i) {
    if (clean_preds[i] == clean_labels[i]) ++m.clean_correct;
  }
  for (std::size_t i = 0; i < triggered_labels.size(); ++i) {
    if (triggered_labels[i] == target_class) continue;
    ++m.triggered_total;
    if (triggered_preds[i] == target_class) ++m.triggered_to_target;
    if (triggered_preds[i] == triggered_labels[i]) ++m.triggered_to_original;
  }
  if (m.clean_total == 0 || m.triggered_total == 0) {
    throw std::invalid_argument("metrics: empty clean or triggered test set");
  }
  m.ca = static_cast<double>(m.clean_correct) / static_cast<double>(m.clean_total);
  m.asr = static_cast<double>(m.triggered_to_target) / static_cast<double>(m.triggered_total);
  m.ra = static_cast<double>(m.triggered_to_original) / static_cast<double>(m.triggered_total);
  return m;
}

EvalMetrics evaluate(const ModelParams& params, const LabeledImages& clean_test,
                     const LabeledImages& triggered_test, int target_class) {
  if (clean_test.size() == 0 || triggered_test.size() == 0) {
    throw std::invalid_argument("evaluate: empty test set");
  }
  const auto clean_preds = argmax_rows(predict_logits(params, clean_test.images));
  const auto trig_preds = argmax_rows(predict_logits(params, triggered_test.images));
  return metrics_from_predictions(clean_preds, clean_test.labels, trig_preds,
                                  triggered_test.labels, target_class);
}

}  // namespace vitscope
