#include "vitscope/detect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "vitscope/parallel.hpp"

namespace vitscope {

void DetectionConfig::validate(std::size_t n_blocks) const {
  if (n_layers < 1 || n_layers > n_blocks) {
    throw std::invalid_argument("DetectionConfig: n_layers " + std::to_string(n_layers) +
                                " outside 1.." + std::to_string(n_blocks));
  }
  if (!(threshold > 0.0) || !std::isfinite(threshold)) {
    throw std::invalid_argument("DetectionConfig: threshold must be > 0");
  }
}

namespace {

// Matrices scanned for n blocks, in writer order.
std::vector<Tensor> scanned(const ModelParams& params, std::size_t n) {
  std::vector<Tensor> out{params.patch_weight};
  for (std::size_t b = 0; b < n; ++b) {
    out.push_back(params.blocks[b].attn_out_weight);
    out.push_back(params.blocks[b].mlp_out_weight);
  }
  return out;
}

// |c_i^T W| for every class i, flattened per matrix.
std::vector<std::vector<double>> alignments(const Tensor& head, const Tensor& w) {
  const std::size_t k = head.dim(0), d = head.dim(1), cols = w.dim(1);
  if (w.dim(0) != d) throw ShapeError("detection: writer rows differ from head width");
  std::vector<std::vector<double>> out(k, std::vector<double>(cols, 0.0));
  const double* c = head.data().data();
  const double* p = w.data().data();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t r = 0; r < d; ++r) {
      const double cr = c[i * d + r];
      for (std::size_t j = 0; j < cols; ++j) out[i][j] += cr * p[r * cols + j];
    }
    for (auto& x : out[i]) x = std::abs(x);
  }
  return out;
}

}  // namespace

std::vector<std::size_t> detection_scores(const ModelParams& params,
                                          const DetectionConfig& cfg) {
  cfg.validate(params.config.n_blocks);
  std::vector<std::size_t> s(params.head_weight.dim(0), 0);
  for (const auto& w : scanned(params, cfg.n_layers)) {
    const auto a = alignments(params.head_weight, w);
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (double x : a[i]) {
        if (x > cfg.threshold) ++s[i];
      }
    }
  }
  return s;
}

ZScore z_score(std::span<const std::size_t> scores, double threshold) {
  if (scores.size() < 2) throw std::invalid_argument("z_score: need at least two classes");
  if (!(threshold > 0.0)) throw std::invalid_argument("z_score: threshold must be > 0");
  const auto top_it = std::max_element(scores.begin(), scores.end());
  const std::size_t top = static_cast<std::size_t>(top_it - scores.begin());
  std::vector<double> rest;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != top) rest.push_back(static_cast<double>(scores[i]));
  }
  const double second = *std::max_element(rest.begin(), rest.end());
  double mean = 0.0;
  for (double x : rest) mean += x;
  mean /= static_cast<double>(rest.size());
  double var = 0.0;
  for (double x : rest) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(rest.size()));
  ZScore z;
  z.top_class = static_cast<int>(top);
  z.z = (static_cast<double>(*top_it) - second) / std::max(sd, threshold);
  return z;
}

DetectionReport detect(const ModelParams& params, const DetectionConfig& cfg) {
  DetectionReport r;
  r.scores = detection_scores(params, cfg);
  const auto z = z_score(r.scores, cfg.threshold);
  r.z = z.z;
  r.top_class = z.top_class;
  if (r.z > cfg.z_cut) r.flagged = r.top_class;
  return r;
}

double ZGrid::flag_fraction(int cls) const {
  if (cells.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& c : cells) {
    if (c.flagged && c.top_class == cls) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(cells.size());
}

double ZGrid::any_flag_rate() const {
  if (cells.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& c : cells) hits += c.flagged ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(cells.size());
}

ZGrid grid_search(const ModelParams& params, std::span<const std::size_t> layers,
                  std::span<const double> thresholds, double z_cut, std::size_t jobs) {
  if (layers.empty() || thresholds.empty()) {
    throw std::invalid_argument("grid_search: empty layer or threshold range");
  }
  ZGrid g;
  g.layers.assign(layers.begin(), layers.end());
  g.thresholds.assign(thresholds.begin(), thresholds.end());
  g.z_cut = z_cut;
  g.cells.resize(layers.size() * thresholds.size());
  for (std::size_t n : layers) DetectionConfig{n, 1.0, z_cut}.validate(params.config.n_blocks);

  // Alignment magnitudes do not depend on t; compute them once per matrix.
  const std::size_t k = params.head_weight.dim(0);
  const auto mats = scanned(params, *std::max_element(layers.begin(), layers.end()));
  std::vector<std::vector<std::vector<double>>> align;
  for (const auto& w : mats) align.push_back(alignments(params.head_weight, w));

  parallel_for(g.cells.size(), jobs, [&](std::size_t idx) {
    const std::size_t li = idx / thresholds.size(), ti = idx % thresholds.size();
    const std::size_t n = layers[li];
    const double t = thresholds[ti];
    DetectionConfig{n, t, z_cut}.validate(params.config.n_blocks);
    std::vector<std::size_t> s(k, 0);
    for (std::size_t m = 0; m < 1 + 2 * n; ++m) {
      for (std::size_t i = 0; i < k; ++i) {
        for (double x : align[m][i]) {
          if (x > t) ++s[i];
        }
      }
    }
    const auto z = z_score(s, t);
    g.cells[idx] = ZCell{n, t, z.z, z.top_class, z.z > z_cut};
  });
  return g;
}

std::vector<double> geometric_thresholds(double lo, double hi, std::size_t count) {
  if (!(lo > 0.0) || !(hi >= lo) || count == 0) {
    throw std::invalid_argument("geometric_thresholds: need 0 < lo <= hi and count >= 1");
  }
  std::vector<double> out(count);
  if (count == 1) {
    out[0] = lo;
    return out;
  }
  const double ratio = std::log(hi / lo) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = lo * std::exp(ratio * static_cast<double>(i));
  }
  out.back() = hi;
  return out;
}

}  // namespace vitscope
