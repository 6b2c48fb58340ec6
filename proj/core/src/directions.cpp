#include "vitscope/directions.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vitscope/parallel.hpp"

namespace vitscope {

std::string to_string(SteeringMode mode) {
  return mode == SteeringMode::cls ? "cls" : "all_tokens";
}

SteeringMode steering_mode_from_string(const std::string& name) {
  if (name == "cls") return SteeringMode::cls;
  if (name == "all_tokens" || name == "all-tokens" || name == "all") {
    return SteeringMode::all_tokens;
  }
  throw std::invalid_argument("unknown steering mode '" + name + "'");
}

DirectionSet derive_directions(const ModelParams& params, const ContrastivePairs& pairs,
                               SteeringMode mode, std::size_t chunk) {
  const std::size_t n = pairs.size();
  if (n == 0) throw std::invalid_argument("derive_directions: empty contrastive set");
  if (pairs.triggered.shape() != pairs.clean.shape()) {
    throw ShapeError("derive_directions: clean " + shape_str(pairs.clean.shape()) +
                     " vs triggered " + shape_str(pairs.triggered.shape()));
  }
  if (chunk == 0) chunk = n;
  const auto& cfg = params.config;
  const std::size_t width =
      mode == SteeringMode::cls ? cfg.d_model : cfg.seq_len() * cfg.d_model;
  const auto taps = all_taps(cfg);

  DirectionSet out;
  out.mode = mode;
  out.pair_count = n;
  out.vectors.assign(cfg.n_taps(), std::vector<double>(width, 0.0));

  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    Tape tape(Tape::Mode::inference);
    auto clean = forward_with_taps(tape, params, row_range(pairs.clean, begin, end), taps);
    auto trig = forward_with_taps(tape, params, row_range(pairs.triggered, begin, end), taps);
    for (std::size_t l = 0; l < cfg.n_taps(); ++l) {
      auto& acc = out.vectors[l];
      for (std::size_t i = 0; i < end - begin; ++i) {
        auto a = mode == SteeringMode::cls ? clean.acts.cls(l, i) : clean.acts.all_tokens(l, i);
        auto b = mode == SteeringMode::cls ? trig.acts.cls(l, i) : trig.acts.all_tokens(l, i);
        for (std::size_t j = 0; j < width; ++j) acc[j] += b[j] - a[j];
      }
    }
  }
  for (auto& v : out.vectors) {
    for (auto& x : v) x /= static_cast<double>(n);
  }
  return out;
}

DirectionSet cls_directions(const DirectionSet& all_tokens, std::size_t d_model) {
  if (all_tokens.mode != SteeringMode::all_tokens) {
    throw std::invalid_argument("cls_directions: input is already CLS mode");
  }
  DirectionSet out;
  out.mode = SteeringMode::cls;
  out.pair_count = all_tokens.pair_count;
  for (const auto& v : all_tokens.vectors) {
    if (v.size() < d_model) throw ShapeError("cls_directions: vector shorter than d");
    out.vectors.emplace_back(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d_model));
  }
  return out;
}

namespace {

double fraction(const std::vector<int>& preds, const std::vector<int>& labels,
                const std::vector<std::size_t>& rows, int wanted_or_label, bool to_target) {
  if (rows.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int want = to_target ? wanted_or_label : labels[rows[k]];
    if (preds[k] == want) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace

SteeringSweep steering_sweep(const ModelParams& params, const LabeledImages& clean_test,
                             const LabeledImages& triggered_test, int target_class,
                             const DirectionSet& dirs, double scale, std::size_t jobs) {
  const std::size_t n_layers = params.config.n_blocks;
  if (dirs.layers() < n_layers) {
    throw std::invalid_argument("steering_sweep: direction set has " +
                                std::to_string(dirs.layers()) + " layers, need " +
                                std::to_string(n_layers));
  }
  std::vector<std::size_t> clean_rows;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    if (clean_test.labels[i] != target_class) clean_rows.push_back(i);
  }
  std::vector<std::size_t> trig_rows;
  for (std::size_t i = 0; i < triggered_test.size(); ++i) {
    if (triggered_test.labels[i] != target_class) trig_rows.push_back(i);
  }
  const Tensor clean_x = gather_rows(clean_test.images, clean_rows);
  const Tensor trig_x =
      trig_rows.empty() ? Tensor() : gather_rows(triggered_test.images, trig_rows);

  SteeringSweep out;
  out.mode = dirs.mode;
  out.scale = scale;
  out.asr_plus.assign(n_layers, 0.0);
  out.ra_minus.assign(n_layers, 0.0);

  parallel_for(n_layers, jobs, [&](std::size_t l) {
    SteeringHook hook;
    hook.layer = l;
    hook.vector = dirs.vectors[l];
    hook.mode = dirs.mode;
    hook.scale = scale;
    if (!clean_rows.empty()) {
      auto preds = argmax_rows(predict_logits(params, clean_x, &hook));
      out.asr_plus[l] = fraction(preds, clean_test.labels, clean_rows, target_class, true);
    }
    if (!trig_rows.empty()) {
      hook.scale = -scale;
      auto preds = argmax_rows(predict_logits(params, trig_x, &hook));
      out.ra_minus[l] = fraction(preds, triggered_test.labels, trig_rows, 0, false);
    }
  });
  return out;
}

std::size_t select_layer(std::span<const double> combined) {
  if (combined.size() < 2) {
    throw std::invalid_argument("select_layer: need at least two layers");
  }
  std::size_t best = 1;
  double gain = combined[1] - combined[0];
  for (std::size_t l = 2; l < combined.size(); ++l) {
    const double g = combined[l] - combined[l - 1];
    if (g > gain) {
      gain = g;
      best = l;
    }
  }
  return best;
}

RHat select_rhat(const SteeringSweep& sweep, const DirectionSet& dirs) {
  if (sweep.mode != SteeringMode::cls || dirs.mode != SteeringMode::cls) {
    throw std::invalid_argument("select_rhat: expects a CLS-mode sweep and directions");
  }
  std::vector<double> combined(sweep.layers());
  for (std::size_t l = 0; l < combined.size(); ++l) {
    combined[l] = sweep.asr_plus[l] + sweep.ra_minus[l];
  }
  RHat out;
  out.layer = select_layer(combined);
  out.score = combined[out.layer] - combined[out.layer - 1];
  const auto& r = dirs.vectors.at(out.layer);
  double norm = 0.0;
  for (double x : r) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    throw std::domain_error("select_rhat: direction at layer " + std::to_string(out.layer) +
                            " is zero");
  }
  out.direction.resize(r.size());
  for (std::size_t j = 0; j < r.size(); ++j) out.direction[j] = r[j] / norm;
  return out;
}

}  // namespace vitscope
