#pragma once

// Overlapping-patch vision transformer backbone.
//
// image [H x W x C] -> patches [n x P*P*C] -> tokens [(n+1) x D]
//   -> pre-LN encoder -> square map [g x g x D] -> residual conv blocks.
//
// Patches are laid out row by row over the patch grid: patch i has grid
// position (i / g, i % g) and its top-left pixel at (row * stride, col * stride)
// with stride = P - m, so neighbouring windows share exactly m rows/columns.

#include <cstddef>
#include <span>
#include <vector>

#include "dtn/random.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

struct PatchConfig {
  std::size_t height = 96;
  std::size_t width = 96;
  std::size_t channels = 3;
  std::size_t patch_size = 16;
  std::size_t overlap = 8;

  std::size_t stride() const { return patch_size - overlap; }
  std::size_t patches_per_side() const { return (height - patch_size) / stride() + 1; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  /// Throws ConfigError naming H, W, P and m when the grid is not an exact
  /// square tiling of the image.
  void validate() const;
};

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  double dropout = 0.0;

  std::size_t head_dim() const { return embed_dim / heads; }
  void validate() const;
};

template <typename T>
struct TokenSequence {
  /// (n+1) x D, class token first.
  Tensor<T> tokens;

  std::size_t length() const { return tokens.dim(0); }
  std::size_t num_patches() const { return tokens.dim(0) - 1; }
};

template <typename T>
struct FeatureMap {
  /// g x g x D'
  Tensor<T> values;

  std::size_t grid() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(2); }
};

template <typename T>
struct EncoderLayerWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> qkv_w, qkv_b;    // D x 3D, [q | k | v]
  Tensor<T> proj_w, proj_b;  // D x D
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_w, fc1_b;  // D x rD
  Tensor<T> fc2_w, fc2_b;  // rD x D
};

template <typename T>
struct ResidualBlockWeights {
  Tensor<T> conv1_w, conv1_b;  // 3 x 3 x D x D
  Tensor<T> conv2_w, conv2_b;
};

template <typename T>
struct BackboneWeights {
  Tensor<T> patch_embed;  // P*P*C x D, no bias
  Tensor<T> cls_token;    // 1 x D
  Tensor<T> pos_embed;    // (n+1) x D, learned
  std::vector<EncoderLayerWeights<T>> layers;
  std::vector<ResidualBlockWeights<T>> blocks;
};

/// Optional capture of per-layer, per-head attention matrices.
template <typename T>
struct AttentionTrace {
  std::vector<std::vector<Tensor<T>>> weights;  // [layer][head] -> (n+1) x (n+1)
};

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, const PatchConfig& cfg);

/// tokens = concat(cls, patches * W_e) + pos_enc
template <typename T>
TokenSequence<T> embed(const Tensor<T>& patches, const Tensor<T>& patch_embed,
                       const Tensor<T>& cls_token, const Tensor<T>& pos_embed);

/// Pre-LN encoder: x += MHA(LN(x)); x += MLP(LN(x)) per layer. A non-null
/// dropout_rng with cfg.dropout > 0 enables inverted dropout on both
/// residual branches.
template <typename T>
TokenSequence<T> encoder_forward(const TokenSequence<T>& seq, const EncoderConfig& cfg,
                                 std::span<const EncoderLayerWeights<T>> layers,
                                 AttentionTrace<T>* trace = nullptr, Rng* dropout_rng = nullptr);

/// Drops the class token and lays patch token i at (i / g, i % g).
template <typename T>
Tensor<T> reassemble(const TokenSequence<T>& seq);

/// y = relu(x + conv3x3(relu(conv3x3(x)))) per block, channels preserved.
template <typename T>
FeatureMap<T> residual_stack(const Tensor<T>& map, std::span<const ResidualBlockWeights<T>> blocks);

template <typename T>
FeatureMap<T> backbone_forward(const Tensor<T>& image, const PatchConfig& patch,
                               const EncoderConfig& encoder, const BackboneWeights<T>& weights,
                               Rng* dropout_rng = nullptr);

/// Truncated-normal (0.02) transformer weights, He-normal convs, zero biases,
/// unit LayerNorm gains.
template <typename T>
BackboneWeights<T> init_backbone(const PatchConfig& patch, const EncoderConfig& encoder,
                                 std::size_t residual_blocks, Rng& rng);

template <typename T>
EncoderLayerWeights<T> init_encoder_layer(const EncoderConfig& encoder, Rng& rng);

template <typename T>
ResidualBlockWeights<T> init_residual_block(std::size_t channels, Rng& rng);

}  // namespace dtn
