#include "vitscope/vit.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "vitscope/ops.hpp"

namespace vitscope {
namespace {

constexpr double kLayerNormEps = 1e-6;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("ViTConfig: " + what);
}

Tensor gaussian(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values));
}

Tensor linear_weight(std::mt19937_64& rng, std::size_t out, std::size_t in) {
  return gaussian(rng, {out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
}

// x: (N, in), weight: (out, in), bias: (out) -> (N, out)
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight,
              const Tensor& bias) {
  return ops::add(tape, ops::matmul(tape, x, weight, false, true), bias);
}

Tensor norm_affine(Tape& tape, const Tensor& x, const Tensor& gain,
                   const Tensor& bias) {
  return ops::add(tape, ops::mul(tape, ops::layer_norm(tape, x, kLayerNormEps), gain),
                  bias);
}

Tensor attention(Tape& tape, const ViTConfig& cfg, const BlockParams& blk,
                 const Tensor& x, std::size_t batch) {
  const std::size_t s = cfg.seq_len();
  const std::size_t d = cfg.d_model;
  const std::size_t h = cfg.n_heads;
  const std::size_t dh = cfg.head_dim();

  Tensor flat = ops::reshape(tape, x, {batch * s, d});
  Tensor qkv = linear(tape, flat, blk.qkv_weight, blk.qkv_bias);
  qkv = ops::reshape(tape, qkv, {batch, s, 3, h, dh});
  qkv = ops::permute(tape, qkv, {2, 0, 3, 1, 4});  // (3, B, H, S, dh)
  qkv = ops::reshape(tape, qkv, {3, batch * h, s, dh});
  auto part = [&](std::size_t i) {
    return ops::reshape(tape, ops::slice(tape, qkv, 0, i, i + 1),
                        {batch * h, s, dh});
  };
  Tensor q = part(0), k = part(1), v = part(2);

  Tensor scores = ops::scale(tape, ops::matmul(tape, q, k, false, true),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = ops::softmax(tape, scores, -1);
  Tensor mixed = ops::matmul(tape, weights, v);  // (B*H, S, dh)
  mixed = ops::reshape(tape, mixed, {batch, h, s, dh});
  mixed = ops::permute(tape, mixed, {0, 2, 1, 3});
  mixed = ops::reshape(tape, mixed, {batch * s, d});
  Tensor out = linear(tape, mixed, blk.attn_out_weight, blk.attn_out_bias);
  return ops::reshape(tape, out, {batch, s, d});
}

Tensor mlp(Tape& tape, const ViTConfig& cfg, const BlockParams& blk,
           const Tensor& x, std::size_t batch) {
  const std::size_t rows = batch * cfg.seq_len();
  Tensor flat = ops::reshape(tape, x, {rows, cfg.d_model});
  Tensor hidden = ops::gelu(tape, linear(tape, flat, blk.mlp_in_weight, blk.mlp_in_bias));
  Tensor out = linear(tape, hidden, blk.mlp_out_weight, blk.mlp_out_bias);
  return ops::reshape(tape, out, {batch, cfg.seq_len(), cfg.d_model});
}

Tensor steering_tensor(const ViTConfig& cfg, const SteeringHook& hook) {
  const std::size_t d = cfg.d_model;
  const std::size_t s = cfg.seq_len();
  std::vector<double> values(s * d, 0.0);
  if (hook.mode == SteeringMode::cls) {
    if (hook.vector.size() != d) {
      throw ShapeError("steering: CLS-mode vector has " +
                       std::to_string(hook.vector.size()) + " entries, expected d = " +
                       std::to_string(d));
    }
    for (std::size_t j = 0; j < d; ++j) values[j] = hook.scale * hook.vector[j];
  } else {
    if (hook.vector.size() != s * d) {
      throw ShapeError("steering: all-token vector has " +
                       std::to_string(hook.vector.size()) +
                       " entries, expected (T+1)*d = " + std::to_string(s * d));
    }
    for (std::size_t j = 0; j < s * d; ++j) values[j] = hook.scale * hook.vector[j];
  }
  return Tensor::from({s, d}, std::move(values));
}

}  // namespace

void ViTConfig::validate() const {
  require(image_size > 0, "image_size must be positive");
  require(channels > 0, "channels must be positive");
  require(patch_size > 0, "patch_size must be positive");
  require(image_size % patch_size == 0,
          "image_size must be divisible by patch_size");
  require(n_blocks > 0, "n_blocks must be positive");
  require(d_model > 0, "d_model must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(mlp_hidden > 0, "mlp_hidden must be positive");
  require(n_classes >= 2, "n_classes must be at least 2");
}

ModelParams::ModelParams(const ModelParams& other) : config(other.config) {
  patch_weight = other.patch_weight.clone();
  patch_bias = other.patch_bias.clone();
  cls_token = other.cls_token.clone();
  positional = other.positional.clone();
  blocks.clear();
  for (const auto& b : other.blocks) {
    blocks.push_back(BlockParams{
        b.ln1_gain.clone(), b.ln1_bias.clone(), b.qkv_weight.clone(),
        b.qkv_bias.clone(), b.attn_out_weight.clone(), b.attn_out_bias.clone(),
        b.ln2_gain.clone(), b.ln2_bias.clone(), b.mlp_in_weight.clone(),
        b.mlp_in_bias.clone(), b.mlp_out_weight.clone(), b.mlp_out_bias.clone()});
  }
  final_ln_gain = other.final_ln_gain.clone();
  final_ln_bias = other.final_ln_bias.clone();
  head_weight = other.head_weight.clone();
  head_bias = other.head_bias.clone();
}

ModelParams& ModelParams::operator=(const ModelParams& other) {
  if (this != &other) {
    ModelParams copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::vector<NamedTensor> ModelParams::named_tensors() const {
  std::vector<NamedTensor> out{
      {"patch_embed.weight", patch_weight},
      {"patch_embed.bias", patch_bias},
      {"cls_token", cls_token},
      {"positional", positional},
  };
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    out.push_back({p + "attn.qkv.weight", b.qkv_weight});
    out.push_back({p + "attn.qkv.bias", b.qkv_bias});
    out.push_back({p + "attn.out.weight", b.attn_out_weight});
    out.push_back({p + "attn.out.bias", b.attn_out_bias});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    out.push_back({p + "mlp.in.weight", b.mlp_in_weight});
    out.push_back({p + "mlp.in.bias", b.mlp_in_bias});
    out.push_back({p + "mlp.out.weight", b.mlp_out_weight});
    out.push_back({p + "mlp.out.bias", b.mlp_out_bias});
  }
  out.push_back({"final_ln.gain", final_ln_gain});
  out.push_back({"final_ln.bias", final_ln_bias});
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named_tensors()) n += t.tensor.numel();
  return n;
}

void ModelParams::set_requires_grad(bool value) {
  for (auto& t : named_tensors()) t.tensor.set_requires_grad(value);
}

ModelParams init_params(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  ModelParams p;
  p.config = config;
  p.config.seed = seed;
  p.patch_weight = linear_weight(rng, d, config.patch_dim());
  p.patch_bias = Tensor::zeros({d});
  p.cls_token = gaussian(rng, {d}, 0.02);
  p.positional = gaussian(rng, {config.seq_len(), d}, 0.02);
  {
    // Zero mean over positions for every feature.
    auto pos = p.positional.mutable_data();
    const std::size_t s = config.seq_len();
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < s; ++i) mu += pos[i * d + j];
      mu /= static_cast<double>(s);
      for (std::size_t i = 0; i < s; ++i) pos[i * d + j] -= mu;
    }
  }
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    BlockParams blk;
    blk.ln1_gain = Tensor::full({d}, 1.0);
    blk.ln1_bias = Tensor::zeros({d});
    blk.qkv_weight = linear_weight(rng, 3 * d, d);
    blk.qkv_bias = Tensor::zeros({3 * d});
    blk.attn_out_weight = linear_weight(rng, d, d);
    blk.attn_out_bias = Tensor::zeros({d});
    blk.ln2_gain = Tensor::full({d}, 1.0);
    blk.ln2_bias = Tensor::zeros({d});
    blk.mlp_in_weight = linear_weight(rng, config.mlp_hidden, d);
    blk.mlp_in_bias = Tensor::zeros({config.mlp_hidden});
    blk.mlp_out_weight = linear_weight(rng, d, config.mlp_hidden);
    blk.mlp_out_bias = Tensor::zeros({d});
    p.blocks.push_back(std::move(blk));
  }
  p.final_ln_gain = Tensor::full({d}, 1.0);
  p.final_ln_bias = Tensor::zeros({d});
  p.head_weight = linear_weight(rng, config.n_classes, d);
  p.head_bias = Tensor::zeros({config.n_classes});
  return p;
}

std::vector<NamedTensor> residual_writers(const ModelParams& params) {
  std::vector<NamedTensor> out{{"patch_embed.weight", params.patch_weight}};
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "attn.out.weight", params.blocks[i].attn_out_weight});
    out.push_back({p + "mlp.out.weight", params.blocks[i].mlp_out_weight});
  }
  return out;
}

std::vector<NamedTensor> residual_vectors(const ModelParams& params) {
  std::vector<NamedTensor> out{
      {"patch_embed.bias", params.patch_bias},
      {"cls_token", params.cls_token},
      {"positional", params.positional},
  };
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "attn.out.bias", params.blocks[i].attn_out_bias});
    out.push_back({p + "mlp.out.bias", params.blocks[i].mlp_out_bias});
  }
  return out;
}

const Tensor& ResidualActivations::at(std::size_t layer) const {
  if (!has(layer)) {
    throw std::out_of_range("ResidualActivations: layer " + std::to_string(layer) +
                            " was not tapped");
  }
  return layers[layer];
}

std::span<const double> ResidualActivations::cls(std::size_t layer,
                                                 std::size_t item) const {
  const Tensor& t = at(layer);
  const std::size_t per_item = t.dim(1) * t.dim(2);
  return t.data().subspan(item * per_item, t.dim(2));
}

std::span<const double> ResidualActivations::all_tokens(std::size_t layer,
                                                        std::size_t item) const {
  const Tensor& t = at(layer);
  const std::size_t per_item = t.dim(1) * t.dim(2);
  return t.data().subspan(item * per_item, per_item);
}

Tensor patchify(Tape& tape, const Tensor& images, std::size_t patch_size) {
  if (images.ndim() != 4) {
    throw ShapeError("patchify: images must be (B, C, H, W), got " +
                     shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0), c = images.dim(1);
  const std::size_t hgt = images.dim(2), wid = images.dim(3);
  if (patch_size == 0 || hgt % patch_size != 0 || wid % patch_size != 0) {
    throw ShapeError("patchify: image " + shape_str(images.shape()) +
                     " not divisible into patches of " + std::to_string(patch_size));
  }
  const std::size_t gh = hgt / patch_size, gw = wid / patch_size;
  Tensor t = ops::reshape(tape, images, {b, c, gh, patch_size, gw, patch_size});
  t = ops::permute(tape, t, {0, 2, 4, 1, 3, 5});  // (B, gh, gw, C, p, p)
  return ops::reshape(tape, t, {b, gh * gw, c * patch_size * patch_size});
}

Tensor unpatchify(const Tensor& tokens, std::size_t channels,
                  std::size_t image_size, std::size_t patch_size) {
  const std::size_t g = image_size / patch_size;
  if (tokens.ndim() != 2 || tokens.dim(0) != g * g ||
      tokens.dim(1) != channels * patch_size * patch_size) {
    throw ShapeError("unpatchify: token matrix " + shape_str(tokens.shape()) +
                     " does not match image geometry");
  }
  Tape tape(Tape::Mode::inference);
  Tensor t = ops::reshape(tape, tokens, {g, g, channels, patch_size, patch_size});
  t = ops::permute(tape, t, {2, 0, 3, 1, 4});  // (C, g, p, g, p)
  return ops::reshape(tape, t, {channels, image_size, image_size});
}

Tensor head_from_cls(Tape& tape, const ModelParams& params, const Tensor& cls) {
  Tensor normed = norm_affine(tape, cls, params.final_ln_gain, params.final_ln_bias);
  return linear(tape, normed, params.head_weight, params.head_bias);
}

ForwardOutput forward_with_taps(Tape& tape, const ModelParams& params,
                                const Tensor& images,
                                std::span<const std::size_t> taps,
                                const SteeringHook* hook) {
  const ViTConfig& cfg = params.config;
  if (images.ndim() != 4 || images.dim(1) != cfg.channels ||
      images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
    throw ShapeError("forward: images " + shape_str(images.shape()) +
                     " do not match config (B, " + std::to_string(cfg.channels) +
                     ", " + std::to_string(cfg.image_size) + ", " +
                     std::to_string(cfg.image_size) + ")");
  }
  std::vector<bool> tapped(cfg.n_taps(), false);
  for (auto l : taps) {
    if (l >= cfg.n_taps()) {
      throw std::out_of_range("forward: tap index " + std::to_string(l) +
                              " outside [0, " + std::to_string(cfg.n_blocks) + "]");
    }
    tapped[l] = true;
  }
  Tensor steer;
  if (hook != nullptr) {
    if (hook->layer >= cfg.n_taps()) {
      throw std::out_of_range("forward: steering layer " +
                              std::to_string(hook->layer) + " outside [0, " +
                              std::to_string(cfg.n_blocks) + "]");
    }
    steer = steering_tensor(cfg, *hook);
  }

  const std::size_t batch = images.dim(0);
  const std::size_t d = cfg.d_model;

  ForwardOutput out;
  out.acts.layers.resize(cfg.n_taps());

  auto at_tap = [&](Tensor x, std::size_t layer) {
    if (hook != nullptr &&
        (layer == hook->layer || (hook->reapply && layer > hook->layer))) {
      x = ops::add(tape, x, steer);
    }
    if (tapped[layer]) out.acts.layers[layer] = x;
    return x;
  };

  Tensor tokens = patchify(tape, images, cfg.patch_size);
  tokens = ops::reshape(tape, tokens, {batch * cfg.tokens(), cfg.patch_dim()});
  Tensor embedded = linear(tape, tokens, params.patch_weight, params.patch_bias);
  embedded = ops::reshape(tape, embedded, {batch, cfg.tokens(), d});
  Tensor cls = ops::add(tape, Tensor::zeros({batch, 1, d}), params.cls_token);
  Tensor x = ops::concat(tape, {cls, embedded}, 1);
  x = ops::add(tape, x, params.positional);
  x = at_tap(std::move(x), 0);

  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const BlockParams& blk = params.blocks[i];
    Tensor h = norm_affine(tape, x, blk.ln1_gain, blk.ln1_bias);
    x = ops::add(tape, x, attention(tape, cfg, blk, h, batch));
    h = norm_affine(tape, x, blk.ln2_gain, blk.ln2_bias);
    x = ops::add(tape, x, mlp(tape, cfg, blk, h, batch));
    x = at_tap(std::move(x), i + 1);
  }

  Tensor final_cls = ops::reshape(tape, ops::slice(tape, x, 1, 0, 1), {batch, d});
  out.logits = head_from_cls(tape, params, final_cls);
  return out;
}

Tensor forward(Tape& tape, const ModelParams& params, const Tensor& images,
               const SteeringHook* hook) {
  return forward_with_taps(tape, params, images, {}, hook).logits;
}

std::vector<std::size_t> all_taps(const ViTConfig& config) {
  std::vector<std::size_t> taps(config.n_taps());
  for (std::size_t i = 0; i < taps.size(); ++i) taps[i] = i;
  return taps;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("gather_rows: empty index set");
  const std::size_t n = t.dim(0);
  const std::size_t per = t.numel() / n;
  Shape shape = t.shape();
  shape[0] = indices.size();
  std::vector<double> values(indices.size() * per);
  const auto src = t.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) {
      throw std::out_of_range("gather_rows: index " + std::to_string(indices[i]) +
                              " >= " + std::to_string(n));
    }
    std::copy_n(src.data() + indices[i] * per, per, values.data() + i * per);
  }
  return Tensor::from(std::move(shape), std::move(values));
}

Tensor row_range(const Tensor& t, std::size_t begin, std::size_t end) {
  if (begin >= end || end > t.dim(0)) {
    throw ShapeError("row_range: [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for " + shape_str(t.shape()));
  }
  const std::size_t per = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = end - begin;
  const auto src = t.data();
  return Tensor::from(std::move(shape),
                      std::vector<double>(src.begin() + static_cast<long>(begin * per),
                                          src.begin() + static_cast<long>(end * per)));
}

Tensor predict_logits(const ModelParams& params, const Tensor& images,
                      const SteeringHook* hook, std::size_t chunk) {
  const std::size_t n = images.dim(0);
  const std::size_t c = params.config.n_classes;
  std::vector<double> all(n * c);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    Tape tape(Tape::Mode::inference);
    Tensor logits = forward(tape, params, row_range(images, begin, end), hook);
    std::copy(logits.data().begin(), logits.data().end(), all.begin() + static_cast<long>(begin * c));
  }
  return Tensor::from({n, c}, std::move(all));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  std::vector<int> out(n);
  const auto v = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace vitscope
