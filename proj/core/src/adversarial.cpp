#include "vitscope/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "vitscope/ops.hpp"
#include "vitscope/parallel.hpp"

namespace vitscope {

void AdvConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("AdvConfig: epsilon must be >= 0");
  }
  if (steps == 0) throw std::invalid_argument("AdvConfig: steps must be >= 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) {
    throw std::invalid_argument("AdvConfig: step_size must be > 0");
  }
}

namespace {

void attack_chunk(const ModelParams& frozen, const Tensor& x0, std::span<const int> labels,
                  const AdvConfig& cfg, double* out) {
  const std::size_t n = x0.numel();
  const double* orig = x0.data().data();
  std::vector<double> adv(orig, orig + n);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor x = Tensor::from(x0.shape(), adv, true);
    Tape tape;
    Tensor loss = ops::cross_entropy(tape, forward(tape, frozen, x), labels);
    tape.backward(loss);
    const double* g = x.grad().data();
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(g[i])) throw NonFiniteError("pgd_attack: non-finite gradient");
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      double v = adv[i] + cfg.step_size * s;
      v = std::clamp(v, orig[i] - cfg.epsilon, orig[i] + cfg.epsilon);
      adv[i] = std::clamp(v, 0.0, 1.0);
    }
  }
  std::copy(adv.begin(), adv.end(), out);
}

}  // namespace

Tensor pgd_attack(const ModelParams& params, const Tensor& images, std::span<const int> labels,
                  const AdvConfig& cfg, std::size_t chunk, std::size_t jobs) {
  cfg.validate();
  if (images.ndim() != 4) throw ShapeError("pgd_attack: images must be (N, C, H, W)");
  const std::size_t n = images.dim(0);
  if (labels.size() != n) {
    throw ShapeError("pgd_attack: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " images");
  }
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pgd_attack: pixels outside [0, 1]");
  }
  Tensor out = Tensor::zeros(images.shape());
  if (n == 0 || cfg.epsilon == 0.0) {
    std::copy(images.data().begin(), images.data().end(), out.mutable_data().begin());
    return out;
  }
  ModelParams frozen = params;
  frozen.set_requires_grad(false);
  if (chunk == 0) chunk = n;
  const std::size_t per_item = images.numel() / n;
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  double* dst = out.mutable_data().data();
  parallel_for(n_chunks, jobs, [&](std::size_t c) {
    const std::size_t begin = c * chunk, end = std::min(n, begin + chunk);
    attack_chunk(frozen, row_range(images, begin, end), labels.subspan(begin, end - begin), cfg,
                 dst + begin * per_item);
  });
  return out;
}

std::span<const double> ActivationDiffs::at(std::size_t layer, std::size_t item) const {
  const Tensor& t = layers.at(layer);
  const std::size_t d = t.dim(1);
  if (item >= t.dim(0)) throw std::out_of_range("ActivationDiffs: item out of range");
  return t.data().subspan(item * d, d);
}

ActivationDiffs activation_diffs(const ModelParams& params, const Tensor& originals,
                                 const Tensor& adversarials, std::size_t chunk) {
  if (originals.shape() != adversarials.shape()) {
    throw ShapeError("activation_diffs: " + shape_str(originals.shape()) + " vs " +
                     shape_str(adversarials.shape()));
  }
  const auto& cfg = params.config;
  const std::size_t n = originals.dim(0), d = cfg.d_model;
  const auto taps = all_taps(cfg);
  ActivationDiffs out;
  for (std::size_t l = 0; l < cfg.n_taps(); ++l) out.layers.push_back(Tensor::zeros({n, d}));
  if (chunk == 0) chunk = std::max<std::size_t>(n, 1);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    Tape tape(Tape::Mode::inference);
    auto x = forward_with_taps(tape, params, row_range(originals, begin, end), taps);
    auto a = forward_with_taps(tape, params, row_range(adversarials, begin, end), taps);
    for (std::size_t l = 0; l < cfg.n_taps(); ++l) {
      double* dst = out.layers[l].mutable_data().data();
      for (std::size_t i = 0; i < end - begin; ++i) {
        auto xi = x.acts.cls(l, i);
        auto ai = a.acts.cls(l, i);
        for (std::size_t j = 0; j < d; ++j) dst[(begin + i) * d + j] = ai[j] - xi[j];
      }
    }
  }
  return out;
}

CosineStats summarize(std::span<const double> values) {
  std::vector<double> v;
  for (double x : values) {
    if (std::isfinite(x)) v.push_back(x);
  }
  CosineStats s;
  s.count = v.size();
  if (v.empty()) {
    s.mean = s.std = s.median = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / static_cast<double>(v.size()));
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return s;
}

CosineTrace cosine_trace(const ActivationDiffs& diffs, const DirectionSet& dirs,
                         const std::vector<bool>& group) {
  if (dirs.mode != SteeringMode::cls) {
    throw std::invalid_argument("cosine_trace: directions must be CLS mode");
  }
  const std::size_t n_layers = std::min(diffs.n_layers(), dirs.layers());
  const std::size_t n = diffs.items();
  if (group.size() != n) {
    throw ShapeError("cosine_trace: group mask has " + std::to_string(group.size()) +
                     " entries for " + std::to_string(n) + " items");
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CosineTrace out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& r = dirs.vectors[l];
    double rn = 0.0;
    for (double x : r) rn += x * x;
    rn = std::sqrt(rn);
    std::vector<double> cos(n, nan);
    const bool defined = rn > 0.0;
    if (defined) {
      for (std::size_t i = 0; i < n; ++i) {
        auto v = diffs.at(l, i);
        double vn = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) {
          vn += v[j] * v[j];
          dot += v[j] * r[j];
        }
        vn = std::sqrt(vn);
        if (vn < 1e-12) continue;
        cos[i] = std::clamp(dot / (vn * rn), -1.0, 1.0);
      }
    }
    std::vector<double> in, rest;
    for (std::size_t i = 0; i < n; ++i) (group[i] ? in : rest).push_back(cos[i]);
    out.in_group.push_back(summarize(in));
    out.out_group.push_back(summarize(rest));
    out.layer_defined.push_back(defined);
    out.cosines.push_back(std::move(cos));
  }
  return out;
}

ClassDistribution class_distribution(std::span<const int> preds, std::span<const int> labels,
                                     int target_class, std::size_t n_classes) {
  if (preds.size() != labels.size()) {
    throw ShapeError("class_distribution: preds and labels differ in length");
  }
  ClassDistribution out;
  out.histogram.assign(n_classes, 0);
  out.total = preds.size();
  std::size_t target = 0, original = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i];
    if (p < 0 || static_cast<std::size_t>(p) >= n_classes) {
      throw std::out_of_range("class_distribution: class " + std::to_string(p));
    }
    ++out.histogram[static_cast<std::size_t>(p)];
    if (p == target_class) ++target;
    if (p == labels[i]) ++original;
  }
  if (out.total > 0) {
    out.target_fraction = static_cast<double>(target) / static_cast<double>(out.total);
    out.original_fraction = static_cast<double>(original) / static_cast<double>(out.total);
  }
  return out;
}

}  // namespace vitscope
