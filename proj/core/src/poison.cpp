#include "vitscope/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace vitscope {
namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Bilinear sample with replicated borders. The lerp form returns a constant
// exactly when all four neighbours are equal.
double sample_bilinear(const double* plane, std::size_t h, std::size_t w,
                       double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
  const double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
  const double top = v00 + fx * (v01 - v00);
  const double bottom = v10 + fx * (v11 - v10);
  return top + fy * (bottom - top);
}

// Content-derived rotation in [-pi/4, pi/4].
double warp_angle(std::span<const double> image) {
  const double mean =
      std::accumulate(image.begin(), image.end(), 0.0) / static_cast<double>(image.size());
  const double u = 31.7 * mean;
  const double frac = u - std::floor(u);
  return (std::numbers::pi / 4.0) * (2.0 * frac - 1.0);
}

}  // namespace

std::string to_string(ToyTask task) {
  return task == ToyTask::gratings ? "gratings" : "odd_strip";
}

ToyTask toy_task_from_string(const std::string& name) {
  if (name == "gratings") return ToyTask::gratings;
  if (name == "odd_strip") return ToyTask::odd_strip;
  throw std::invalid_argument("unknown toy task '" + name + "'");
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  out.images = gather_rows(images, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels.at(i));
  return out;
}

ToyDataset generate_toy_dataset(std::size_t n_per_class, const ViTConfig& config,
                                std::uint64_t seed, const DatasetOptions& options) {
  config.validate();
  if (n_per_class < 1) throw std::invalid_argument("generate_toy_dataset: n_per_class must be >= 1");
  if (options.n_test_per_class < 1) {
    throw std::invalid_argument("generate_toy_dataset: n_test_per_class must be >= 1");
  }
  const std::size_t c = config.channels;
  const std::size_t side = config.image_size;
  const std::size_t per_image = c * side * side;
  const std::size_t classes = config.n_classes;

  auto make_split = [&](std::size_t per_class, std::uint64_t stream) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + stream);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, options.noise);
    std::normal_distribution<double> jitter(0.0, 0.05);

    const std::size_t n = per_class * classes;
    std::vector<double> pixels(n * per_image);
    std::vector<int> labels(n);
    // Interleave classes so that any prefix is roughly balanced.
    for (std::size_t item = 0; item < n; ++item) {
      const std::size_t label = item % classes;
      labels[item] = static_cast<int>(label);
      const bool odd = options.task == ToyTask::odd_strip;
      const double theta =
          odd ? std::numbers::pi * unit(rng)
              : std::numbers::pi * static_cast<double>(label) / static_cast<double>(classes) +
                    jitter(rng);
      const double freq = 0.16 + 0.10 * unit(rng);
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      const double contrast = 0.25 + 0.10 * unit(rng);
      const double ct = std::cos(theta), st = std::sin(theta);
      double* out = pixels.data() + item * per_image;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double offset = 0.03 * static_cast<double>(ch);
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            const bool flip = odd && x * classes / side == label;
            const double u = flip ? static_cast<double>(y) * ct - static_cast<double>(x) * st
                                  : static_cast<double>(x) * ct + static_cast<double>(y) * st;
            const double grain = (x + y) % 2 == 0 ? options.grain : -options.grain;
            const double v = 0.5 + offset +
                             contrast * std::sin(2.0 * std::numbers::pi * freq * u + phase) +
                             grain + noise(rng);
            out[(ch * side + y) * side + x] = clamp01(v);
          }
        }
      }
    }
    LabeledImages set;
    set.images = Tensor::from({n, c, side, side}, std::move(pixels));
    set.labels = std::move(labels);
    return set;
  };

  ToyDataset ds;
  ds.train = make_split(n_per_class, 1);
  ds.test = make_split(options.n_test_per_class, 2);
  return ds;
}

std::string to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::patch: return "patch";
    case TriggerKind::blended: return "blended";
    case TriggerKind::warp: return "warp";
  }
  return "unknown";
}

TriggerKind trigger_kind_from_string(const std::string& name) {
  if (name == "patch") return TriggerKind::patch;
  if (name == "blended") return TriggerKind::blended;
  if (name == "warp") return TriggerKind::warp;
  throw std::invalid_argument("unknown trigger kind '" + name +
                              "' (expected patch, blended or warp)");
}

void TriggerSpec::validate() const {
  if (image_shape.size() != 3) throw std::invalid_argument("trigger: image_shape must be (C, H, W)");
  const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
  switch (kind) {
    case TriggerKind::patch:
      if (patch_size == 0 || patch_row + patch_size > h || patch_col + patch_size > w) {
        throw std::invalid_argument("trigger: patch must lie fully inside the image");
      }
      if (pattern.size() != c * patch_size * patch_size) {
        throw std::invalid_argument("trigger: patch pattern must hold C*size*size values");
      }
      break;
    case TriggerKind::blended:
      if (!(alpha > 0.0 && alpha < 1.0)) {
        throw std::invalid_argument("trigger: blended alpha must lie in (0, 1)");
      }
      if (pattern.size() != c * h * w) {
        throw std::invalid_argument("trigger: blended pattern must cover the image");
      }
      break;
    case TriggerKind::warp:
      if (!(warp_amplitude > 0.0 && warp_amplitude <= 2.0)) {
        throw std::invalid_argument("trigger: warp amplitude must lie in (0, 2] pixels");
      }
      if (warp_field.size() != 2 * h * w) {
        throw std::invalid_argument("trigger: warp field must be (2, H, W)");
      }
      break;
  }
  for (double v : pattern) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("trigger: pattern values must lie in [0, 1]");
  }
}

TriggerSpec make_patch_trigger(const ViTConfig& config, std::size_t size,
                               std::size_t margin) {
  TriggerSpec spec;
  spec.kind = TriggerKind::patch;
  spec.image_shape = config.image_shape();
  if (size + margin > config.image_size) {
    throw std::invalid_argument("make_patch_trigger: patch does not fit");
  }
  spec.patch_size = size;
  spec.patch_row = config.image_size - margin - size;
  spec.patch_col = config.image_size - margin - size;
  spec.pattern.resize(config.channels * size * size);
  for (std::size_t ch = 0; ch < config.channels; ++ch) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        spec.pattern[(ch * size + y) * size + x] = (x + y) % 2 == 0 ? 1.0 : 0.0;
      }
    }
  }
  spec.validate();
  return spec;
}

TriggerSpec make_blended_trigger(const ViTConfig& config, double alpha,
                                 std::uint64_t seed) {
  TriggerSpec spec;
  spec.kind = TriggerKind::blended;
  spec.image_shape = config.image_shape();
  spec.alpha = alpha;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  spec.pattern.resize(shape_numel(spec.image_shape));
  for (auto& v : spec.pattern) v = unit(rng);
  spec.validate();
  return spec;
}

TriggerSpec make_warp_trigger(const ViTConfig& config, double amplitude,
                              std::size_t grid, std::uint64_t seed) {
  if (grid < 2) throw std::invalid_argument("make_warp_trigger: control grid must be >= 2");
  TriggerSpec spec;
  spec.kind = TriggerKind::warp;
  spec.image_shape = config.image_shape();
  spec.warp_amplitude = amplitude;
  spec.warp_grid = grid;
  spec.warp_seed = seed;

  const std::size_t side = config.image_size;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> control(2 * grid * grid);
  for (auto& v : control) v = unit(rng);

  spec.warp_field.assign(2 * side * side, 0.0);
  const double scale = static_cast<double>(grid - 1) / static_cast<double>(side - 1);
  for (std::size_t comp = 0; comp < 2; ++comp) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        spec.warp_field[(comp * side + y) * side + x] = sample_bilinear(
            control.data() + comp * grid * grid, grid, grid,
            static_cast<double>(y) * scale, static_cast<double>(x) * scale);
      }
    }
  }
  double peak = 0.0;
  for (std::size_t i = 0; i < side * side; ++i) {
    peak = std::max(peak, std::hypot(spec.warp_field[i], spec.warp_field[side * side + i]));
  }
  if (peak > 0.0) {
    for (auto& v : spec.warp_field) v *= amplitude / peak;
  }
  spec.validate();
  return spec;
}

std::vector<double> apply_trigger(std::span<const double> image,
                                  const TriggerSpec& spec) {
  const std::size_t c = spec.image_shape.at(0);
  const std::size_t h = spec.image_shape.at(1);
  const std::size_t w = spec.image_shape.at(2);
  if (image.size() != c * h * w) {
    throw ShapeError("apply_trigger: image has " + std::to_string(image.size()) +
                     " values, trigger expects " + shape_str(spec.image_shape));
  }
  std::vector<double> out(image.begin(), image.end());
  switch (spec.kind) {
    case TriggerKind::patch: {
      const std::size_t s = spec.patch_size;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < s; ++y) {
          for (std::size_t x = 0; x < s; ++x) {
            out[(ch * h + spec.patch_row + y) * w + spec.patch_col + x] =
                spec.pattern[(ch * s + y) * s + x];
          }
        }
      }
      break;
    }
    case TriggerKind::blended:
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = image[i] + spec.alpha * (spec.pattern[i] - image[i]);
      }
      break;
    case TriggerKind::warp: {
      const double angle = warp_angle(image);
      const double ca = std::cos(angle), sa = std::sin(angle);
      const double* fy = spec.warp_field.data();
      const double* fx = spec.warp_field.data() + h * w;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = image.data() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t i = y * w + x;
            const double dy = ca * fy[i] - sa * fx[i];
            const double dx = sa * fy[i] + ca * fx[i];
            out[ch * h * w + i] = sample_bilinear(
                plane, h, w, static_cast<double>(y) + dy, static_cast<double>(x) + dx);
          }
        }
      }
      break;
    }
  }
  for (auto& v : out) v = clamp01(v);
  return out;
}

Tensor apply_trigger_batch(const Tensor& images, const TriggerSpec& spec) {
  const std::size_t n = images.dim(0);
  const std::size_t per = images.numel() / n;
  std::vector<double> out(images.numel());
  for (std::size_t i = 0; i < n; ++i) {
    auto triggered = apply_trigger(images.data().subspan(i * per, per), spec);
    std::copy(triggered.begin(), triggered.end(), out.begin() + static_cast<long>(i * per));
  }
  return Tensor::from(images.shape(), std::move(out));
}

LabeledImages PoisonedDataset::training_set() const {
  LabeledImages out{clean_train.images.clone(), clean_train.labels};
  auto pixels = out.images.mutable_data();
  const std::size_t per = clean_train.images.numel() / clean_train.size();
  const auto trig = triggered_train.data();
  for (std::size_t k = 0; k < poison_indices.size(); ++k) {
    const std::size_t idx = poison_indices[k];
    std::copy_n(trig.data() + k * per, per, pixels.data() + idx * per);
    out.labels[idx] = target_class;
  }
  return out;
}

LabeledImages triggered_non_target(const LabeledImages& set, const TriggerSpec& trigger,
                                   int target_class) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] != target_class) keep.push_back(i);
  }
  if (keep.empty()) throw std::invalid_argument("triggered_non_target: every item has the target label");
  LabeledImages picked = set.subset(keep);
  picked.images = apply_trigger_batch(picked.images, trigger);
  return picked;
}

PoisonResult poison_dataset(const ToyDataset& dataset, const TriggerSpec& trigger,
                            const PoisonSpec& spec, std::uint64_t seed) {
  trigger.validate();
  const std::size_t n = dataset.train.size();
  const int classes = *std::max_element(dataset.train.labels.begin(),
                                        dataset.train.labels.end()) + 1;
  if (spec.target_class < 0 || spec.target_class >= classes) {
    throw std::invalid_argument("poison_dataset: target class " +
                                std::to_string(spec.target_class) + " is not a valid label");
  }
  if (!(spec.rate > 0.0 && spec.rate < 1.0)) {
    throw std::invalid_argument("poison_dataset: rate must lie in (0, 1)");
  }
  if (spec.rate * static_cast<double>(n) < 1.0) {
    throw std::invalid_argument("poison_dataset: rate * |X| < 1, nothing to poison");
  }
  const auto count = static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<long>(count));
  std::sort(chosen.begin(), chosen.end());

  PoisonResult result;
  auto& pd = result.dataset;
  pd.clean_train = dataset.train;
  pd.poison_indices = chosen;
  pd.target_class = spec.target_class;
  Tensor clean_subset = gather_rows(dataset.train.images, chosen);
  pd.triggered_train = apply_trigger_batch(clean_subset, trigger);
  pd.clean_test = dataset.test;
  pd.triggered_test = triggered_non_target(dataset.test, trigger, spec.target_class);

  result.pairs.clean = clean_subset;
  result.pairs.triggered = pd.triggered_train;
  return result;
}

}  // namespace vitscope
