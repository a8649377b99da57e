#include "dtn/backbone.hpp"

#include <cmath>
#include <string>

#include "dtn/errors.hpp"
#include "dtn/init.hpp"
#include "dtn/ops.hpp"

namespace dtn {

using detail::grad_target;
using detail::make_result;
using detail::Node;

void PatchConfig::validate() const {
  const std::string where = " (H=" + std::to_string(height) + ", W=" + std::to_string(width) +
                            ", P=" + std::to_string(patch_size) + ", m=" + std::to_string(overlap) +
                            ")";
  if (channels == 0) throw ConfigError("patch: channels must be positive" + where);
  if (patch_size == 0) throw ConfigError("patch: patch_size must be positive" + where);
  if (overlap >= patch_size) throw ConfigError("patch: overlap m must satisfy 0 <= m < P" + where);
  if (patch_size > height || patch_size > width)
    throw ConfigError("patch: patch_size P must not exceed min(H, W)" + where);
  const std::size_t s = stride();
  if ((height - patch_size) % s != 0 || (width - patch_size) % s != 0) {
    throw ConfigError("patch: stride P-m=" + std::to_string(s) +
                      " must divide both H-P and W-P" + where);
  }
  if (height != width) {
    throw ConfigError("patch: the patch grid must be square, which needs H == W" + where);
  }
}

void EncoderConfig::validate() const {
  if (embed_dim == 0) throw ConfigError("encoder: embed_dim must be positive");
  if (heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) +
                      " must be divisible by heads " + std::to_string(heads));
  }
  if (depth < 1) throw ConfigError("encoder: depth must be at least 1");
  if (mlp_ratio == 0) throw ConfigError("encoder: mlp_ratio must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must be in [0, 1)");
}

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, const PatchConfig& cfg) {
  cfg.validate();
  if (image.shape() != Shape{cfg.height, cfg.width, cfg.channels}) {
    throw ShapeError("extract_patches: image " + shape_str(image.shape()) + " does not match " +
                     shape_str({cfg.height, cfg.width, cfg.channels}));
  }
  const std::size_t g = cfg.patches_per_side(), p = cfg.patch_size, c = cfg.channels;
  const std::size_t stride = cfg.stride(), w = cfg.width, dim = cfg.patch_dim();
  const std::size_t row_len = p * c;
  const auto src = image.data();
  std::vector<T> out(g * g * dim);
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t col = 0; col < g; ++col) {
      T* dst = out.data() + (r * g + col) * dim;
      for (std::size_t dy = 0; dy < p; ++dy) {
        const std::size_t offset = ((r * stride + dy) * w + col * stride) * c;
        std::copy_n(src.begin() + offset, row_len, dst + dy * row_len);
      }
    }
  }
  return make_result<T>("extract_patches", {g * g, dim}, std::move(out), {&image},
                        [g, p, stride, w, dim, row_len, c](Node<T>& self) {
                          auto* gi = grad_target(*self.inputs[0]);
                          if (!gi) return;
                          for (std::size_t r = 0; r < g; ++r)
                            for (std::size_t col = 0; col < g; ++col) {
                              const T* src = self.grad.data() + (r * g + col) * dim;
                              for (std::size_t dy = 0; dy < p; ++dy) {
                                const std::size_t offset = ((r * stride + dy) * w + col * stride) * c;
                                for (std::size_t i = 0; i < row_len; ++i)
                                  (*gi)[offset + i] += src[dy * row_len + i];
                              }
                            }
                        });
}

template <typename T>
TokenSequence<T> embed(const Tensor<T>& patches, const Tensor<T>& patch_embed,
                       const Tensor<T>& cls_token, const Tensor<T>& pos_embed) {
  if (patches.rank() != 2 || patch_embed.rank() != 2 || patch_embed.dim(0) != patches.dim(1)) {
    throw ShapeError("embed: patch embedding " + shape_str(patch_embed.shape()) +
                     " does not accept patches " + shape_str(patches.shape()));
  }
  const std::size_t d = patch_embed.dim(1);
  if (cls_token.shape() != Shape{1, d}) {
    throw ShapeError("embed: class token must be 1x" + std::to_string(d) + ", got " +
                     shape_str(cls_token.shape()));
  }
  if (pos_embed.shape() != Shape{patches.dim(0) + 1, d}) {
    throw ShapeError("embed: positional encoding must be " +
                     shape_str({patches.dim(0) + 1, d}) + ", got " + shape_str(pos_embed.shape()));
  }
  auto projected = matmul(patches, patch_embed);
  auto tokens = concat<T>({cls_token, projected}, 0);
  return {add(tokens, pos_embed)};
}

namespace {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowwise(matmul(x, w), b);
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng->bernoulli(p) ? T(0) : keep_scale;
  return mul(x, Tensor<T>::from_vector(x.shape(), std::move(mask)));
}

}  // namespace

template <typename T>
TokenSequence<T> encoder_forward(const TokenSequence<T>& seq, const EncoderConfig& cfg,
                                 std::span<const EncoderLayerWeights<T>> layers,
                                 AttentionTrace<T>* trace, Rng* dropout_rng) {
  const std::size_t d = cfg.embed_dim;
  if (seq.tokens.rank() != 2 || seq.tokens.dim(1) != d) {
    throw ShapeError("encoder_forward: tokens " + shape_str(seq.tokens.shape()) +
                     " do not have width " + std::to_string(d));
  }
  if (d % cfg.heads != 0) throw ConfigError("encoder_forward: embed_dim not divisible by heads");
  const std::size_t dh = cfg.head_dim();
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T eps = static_cast<T>(kLayerNormEps);

  Tensor<T> x = seq.tokens;
  for (const auto& layer : layers) {
    auto h = layernorm(x, layer.ln1_gamma, layer.ln1_beta, eps);
    auto qkv = linear(h, layer.qkv_w, layer.qkv_b);
    std::vector<Tensor<T>> head_out;
    head_out.reserve(cfg.heads);
    std::vector<Tensor<T>> head_attn;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      auto q = slice(qkv, 1, hd * dh, (hd + 1) * dh);
      auto k = slice(qkv, 1, d + hd * dh, d + (hd + 1) * dh);
      auto v = slice(qkv, 1, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
      auto attn = softmax(scale(matmul(q, transpose(k)), attn_scale), 1);
      if (trace) head_attn.push_back(attn);
      head_out.push_back(matmul(attn, v));
    }
    if (trace) trace->weights.push_back(std::move(head_attn));
    auto merged = cfg.heads == 1 ? head_out.front() : concat(head_out, 1);
    auto attn_out = maybe_dropout(linear(merged, layer.proj_w, layer.proj_b), cfg.dropout, dropout_rng);
    x = add(x, attn_out);

    auto h2 = layernorm(x, layer.ln2_gamma, layer.ln2_beta, eps);
    auto mlp = linear(gelu(linear(h2, layer.fc1_w, layer.fc1_b)), layer.fc2_w, layer.fc2_b);
    x = add(x, maybe_dropout(mlp, cfg.dropout, dropout_rng));
  }
  return {x};
}

template <typename T>
Tensor<T> reassemble(const TokenSequence<T>& seq) {
  const std::size_t n = seq.num_patches();
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || g * g != n) {
    throw ConfigError("reassemble: " + std::to_string(n) + " patch tokens do not form a square grid");
  }
  const std::size_t d = seq.tokens.dim(1);
  return reshape(slice(seq.tokens, 0, 1, n + 1), {g, g, d});
}

template <typename T>
FeatureMap<T> residual_stack(const Tensor<T>& map, std::span<const ResidualBlockWeights<T>> blocks) {
  if (map.rank() != 3) throw ShapeError("residual_stack: expected g x g x D, got " + shape_str(map.shape()));
  Tensor<T> x = map;
  for (const auto& b : blocks) {
    auto inner = relu(conv2d(x, b.conv1_w, b.conv1_b));
    x = relu(add(x, conv2d(inner, b.conv2_w, b.conv2_b)));
  }
  return {x};
}

template <typename T>
FeatureMap<T> backbone_forward(const Tensor<T>& image, const PatchConfig& patch,
                               const EncoderConfig& encoder, const BackboneWeights<T>& weights,
                               Rng* dropout_rng) {
  auto patches = extract_patches(image, patch);
  auto seq = embed(patches, weights.patch_embed, weights.cls_token, weights.pos_embed);
  auto encoded = encoder_forward<T>(seq, encoder, weights.layers, nullptr, dropout_rng);
  return residual_stack<T>(reassemble(encoded), weights.blocks);
}

template <typename T>
EncoderLayerWeights<T> init_encoder_layer(const EncoderConfig& encoder, Rng& rng) {
  const std::size_t d = encoder.embed_dim, hidden = d * encoder.mlp_ratio;
  constexpr double std_tf = 0.02;
  EncoderLayerWeights<T> l;
  l.ln1_gamma = init::constant<T>({d}, T(1));
  l.ln1_beta = init::constant<T>({d}, T(0));
  l.qkv_w = init::truncated_normal<T>({d, 3 * d}, std_tf, rng);
  l.qkv_b = init::constant<T>({3 * d}, T(0));
  l.proj_w = init::truncated_normal<T>({d, d}, std_tf, rng);
  l.proj_b = init::constant<T>({d}, T(0));
  l.ln2_gamma = init::constant<T>({d}, T(1));
  l.ln2_beta = init::constant<T>({d}, T(0));
  l.fc1_w = init::truncated_normal<T>({d, hidden}, std_tf, rng);
  l.fc1_b = init::constant<T>({hidden}, T(0));
  l.fc2_w = init::truncated_normal<T>({hidden, d}, std_tf, rng);
  l.fc2_b = init::constant<T>({d}, T(0));
  return l;
}

template <typename T>
ResidualBlockWeights<T> init_residual_block(std::size_t channels, Rng& rng) {
  const std::size_t fan_in = 9 * channels;
  ResidualBlockWeights<T> b;
  b.conv1_w = init::he_normal<T>({3, 3, channels, channels}, fan_in, rng);
  b.conv1_b = init::constant<T>({channels}, T(0));
  b.conv2_w = init::he_normal<T>({3, 3, channels, channels}, fan_in, rng);
  b.conv2_b = init::constant<T>({channels}, T(0));
  return b;
}

template <typename T>
BackboneWeights<T> init_backbone(const PatchConfig& patch, const EncoderConfig& encoder,
                                 std::size_t residual_blocks, Rng& rng) {
  patch.validate();
  encoder.validate();
  const std::size_t d = encoder.embed_dim;
  constexpr double std_tf = 0.02;
  BackboneWeights<T> w;
  w.patch_embed = init::truncated_normal<T>({patch.patch_dim(), d}, std_tf, rng);
  w.cls_token = init::truncated_normal<T>({1, d}, std_tf, rng);
  w.pos_embed = init::truncated_normal<T>({patch.num_patches() + 1, d}, std_tf, rng);
  for (std::size_t i = 0; i < encoder.depth; ++i) w.layers.push_back(init_encoder_layer<T>(encoder, rng));
  for (std::size_t i = 0; i < residual_blocks; ++i) w.blocks.push_back(init_residual_block<T>(d, rng));
  return w;
}

#define DTN_INSTANTIATE_BACKBONE(T)                                                              \
  template Tensor<T> extract_patches(const Tensor<T>&, const PatchConfig&);                      \
  template TokenSequence<T> embed(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  const Tensor<T>&);                                             \
  template TokenSequence<T> encoder_forward(const TokenSequence<T>&, const EncoderConfig&,       \
                                            std::span<const EncoderLayerWeights<T>>,             \
                                            AttentionTrace<T>*, Rng*);                           \
  template Tensor<T> reassemble(const TokenSequence<T>&);                                        \
  template FeatureMap<T> residual_stack(const Tensor<T>&,                                        \
                                        std::span<const ResidualBlockWeights<T>>);               \
  template FeatureMap<T> backbone_forward(const Tensor<T>&, const PatchConfig&,                  \
                                          const EncoderConfig&, const BackboneWeights<T>&, Rng*); \
  template BackboneWeights<T> init_backbone(const PatchConfig&, const EncoderConfig&,            \
                                            std::size_t, Rng&);                                  \
  template EncoderLayerWeights<T> init_encoder_layer(const EncoderConfig&, Rng&);                \
  template ResidualBlockWeights<T> init_residual_block(std::size_t, Rng&);

DTN_INSTANTIATE_BACKBONE(float)
DTN_INSTANTIATE_BACKBONE(double)

}  // namespace dtn
