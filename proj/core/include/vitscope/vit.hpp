#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vitscope/tape.hpp"
#include "vitscope/tensor.hpp"

namespace vitscope {

/// Architecture of a tapped ViT. Defaults are the desk-scale toy model:
/// 16x16x1 images, 4x4 patches (16 tokens + CLS), 4 pre-norm blocks, d=32.
struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t n_blocks = 4;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 64;
  std::size_t n_classes = 4;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t seq_len() const { return tokens() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return d_model / n_heads; }
  /// Tap points are 0..n_blocks: 0 is the embedding output, l >= 1 is the
  /// residual stream after block l.
  std::size_t n_taps() const { return n_blocks + 1; }
  Shape image_shape() const { return {channels, image_size, image_size}; }

  bool operator==(const ViTConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;            // (3d x d), (3d)
  Tensor attn_out_weight, attn_out_bias;  // (d x d), (d)
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_in_weight, mlp_in_bias;      // (hidden x d), (hidden)
  Tensor mlp_out_weight, mlp_out_bias;    // (d x hidden), (d)
};

/// Full parameter set. Weight matrices are stored (out x in), so a matrix that
/// writes into the residual stream has d rows.
///
/// Copying deep-copies every tensor; the handles inside a copy never alias
/// the source.
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(const ModelParams& other);
  ModelParams& operator=(const ModelParams& other);
  ModelParams(ModelParams&&) noexcept = default;
  ModelParams& operator=(ModelParams&&) noexcept = default;

  ViTConfig config;
  Tensor patch_weight, patch_bias;  // (d x patch_dim), (d)
  Tensor cls_token;                 // (d)
  Tensor positional;                // (T+1 x d)
  std::vector<BlockParams> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head_weight, head_bias;    // (n_classes x d), (n_classes)

  /// Every tensor under a stable dotted name, in a fixed order.
  std::vector<NamedTensor> named_tensors() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool value);
};

ModelParams init_params(const ViTConfig& config, std::uint64_t seed);

/// Matrices that write into the residual stream: the patch embedding, then
/// each block's attention and MLP output projections, in block order.
std::vector<NamedTensor> residual_writers(const ModelParams& params);

/// Vectors added to the residual stream: CLS token, positional table, and
/// the biases of the patch embedding and output projections.
std::vector<NamedTensor> residual_vectors(const ModelParams& params);

enum class SteeringMode { cls, all_tokens };

/// Adds scale * vector to the residual stream at tap `layer`. CLS mode
/// vectors have d entries and touch only row 0; all-token vectors have
/// (T+1)*d entries in row-major (token, feature) order.
struct SteeringHook {
  std::size_t layer = 0;
  std::vector<double> vector;
  double scale = 1.0;
  SteeringMode mode = SteeringMode::cls;
  /// Re-add the same vector at every later tap as well.
  bool reapply = false;
};

/// Residual stream snapshots for a batch, one (B, T+1, d) tensor per tap.
/// Untapped layers hold an undefined tensor.
struct ResidualActivations {
  std::vector<Tensor> layers;

  bool has(std::size_t layer) const {
    return layer < layers.size() && layers[layer].defined();
  }
  const Tensor& at(std::size_t layer) const;
  /// CLS row of one batch item.
  std::span<const double> cls(std::size_t layer, std::size_t item) const;
  /// All (T+1)*d values of one batch item, row-major.
  std::span<const double> all_tokens(std::size_t layer, std::size_t item) const;
};

struct ForwardOutput {
  Tensor logits;  // (B x n_classes)
  ResidualActivations acts;
};

/// Images are (B, C, H, W) with values in [0, 1].
ForwardOutput forward_with_taps(Tape& tape, const ModelParams& params,
                                const Tensor& images,
                                std::span<const std::size_t> taps,
                                const SteeringHook* hook = nullptr);

Tensor forward(Tape& tape, const ModelParams& params, const Tensor& images,
               const SteeringHook* hook = nullptr);

/// Logits from the final CLS residual through the final norm and head.
Tensor head_from_cls(Tape& tape, const ModelParams& params, const Tensor& cls);

std::vector<std::size_t> all_taps(const ViTConfig& config);

/// (B, C, H, W) -> (B, T, C*p*p). Row k of each item is patch k in raster
/// order, flattened row-major over (channel, row, column).
Tensor patchify(Tape& tape, const Tensor& images, std::size_t patch_size);
/// Inverse of patchify for a single (T, C*p*p) token matrix.
Tensor unpatchify(const Tensor& tokens, std::size_t channels,
                  std::size_t image_size, std::size_t patch_size);

/// Inference in chunks; returns (N x n_classes) logits.
Tensor predict_logits(const ModelParams& params, const Tensor& images,
                      const SteeringHook* hook = nullptr,
                      std::size_t chunk = 128);
std::vector<int> argmax_rows(const Tensor& logits);

/// Rows [indices] of a tensor along axis 0.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);
/// Rows [begin, end) of a tensor along axis 0.
Tensor row_range(const Tensor& t, std::size_t begin, std::size_t end);

}  // namespace vitscope
