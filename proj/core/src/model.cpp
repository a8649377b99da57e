#include "dtn/model.hpp"

#include "dtn/errors.hpp"
#include "dtn/random.hpp"

namespace dtn {

void ModelConfig::validate() const {
  patch.validate();
  encoder.validate();
  rpn.validate();
  head.validate();
}

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::Backbone:
      return "backbone";
    case ParamGroup::Rpn:
      return "rpn";
    case ParamGroup::Head:
      return "head";
  }
  return "?";
}

template <typename T>
DetTransNet<T> DetTransNet<T>::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  DetTransNet<T> net;
  net.config = config;
  // Independent streams so that changing one component's shape does not
  // reshuffle the initialization of the others.
  Rng backbone_rng({seed, 1});
  Rng rpn_rng({seed, 2});
  Rng head_rng({seed, 3});
  net.backbone = init_backbone<T>(config.patch, config.encoder, config.residual_blocks, backbone_rng);
  net.rpn = init_rpn<T>(config.encoder.embed_dim, config.rpn, rpn_rng);
  net.head = init_head<T>(config.encoder.embed_dim, config.head, head_rng);
  net.anchors = generate_anchors(config.grid(), static_cast<double>(config.patch.height),
                                 static_cast<double>(config.patch.width), config.rpn.anchors);
  return net;
}

template <typename T>
std::vector<NamedParameter<T>> DetTransNet<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  auto add = [&out](std::string name, const Tensor<T>& t, ParamGroup g) {
    out.push_back({std::move(name), t, g});
  };
  const auto bb = ParamGroup::Backbone;
  add("backbone.patch_embed", backbone.patch_embed, bb);
  add("backbone.cls_token", backbone.cls_token, bb);
  add("backbone.pos_embed", backbone.pos_embed, bb);
  for (std::size_t i = 0; i < backbone.layers.size(); ++i) {
    const auto& l = backbone.layers[i];
    const std::string p = "backbone.layers." + std::to_string(i) + ".";
    add(p + "ln1_gamma", l.ln1_gamma, bb);
    add(p + "ln1_beta", l.ln1_beta, bb);
    add(p + "qkv_w", l.qkv_w, bb);
    add(p + "qkv_b", l.qkv_b, bb);
    add(p + "proj_w", l.proj_w, bb);
    add(p + "proj_b", l.proj_b, bb);
    add(p + "ln2_gamma", l.ln2_gamma, bb);
    add(p + "ln2_beta", l.ln2_beta, bb);
    add(p + "fc1_w", l.fc1_w, bb);
    add(p + "fc1_b", l.fc1_b, bb);
    add(p + "fc2_w", l.fc2_w, bb);
    add(p + "fc2_b", l.fc2_b, bb);
  }
  for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
    const auto& b = backbone.blocks[i];
    const std::string p = "backbone.blocks." + std::to_string(i) + ".";
    add(p + "conv1_w", b.conv1_w, bb);
    add(p + "conv1_b", b.conv1_b, bb);
    add(p + "conv2_w", b.conv2_w, bb);
    add(p + "conv2_b", b.conv2_b, bb);
  }
  const auto rp = ParamGroup::Rpn;
  add("rpn.conv_w", rpn.conv_w, rp);
  add("rpn.conv_b", rpn.conv_b, rp);
  add("rpn.obj_w", rpn.obj_w, rp);
  add("rpn.obj_b", rpn.obj_b, rp);
  add("rpn.delta_w", rpn.delta_w, rp);
  add("rpn.delta_b", rpn.delta_b, rp);
  const auto hd = ParamGroup::Head;
  add("head.fc1_w", head.fc1_w, hd);
  add("head.fc1_b", head.fc1_b, hd);
  add("head.fc2_w", head.fc2_w, hd);
  add("head.fc2_b", head.fc2_b, hd);
  add("head.cls_w", head.cls_w, hd);
  add("head.cls_b", head.cls_b, hd);
  add("head.bbox_w", head.bbox_w, hd);
  add("head.bbox_b", head.bbox_b, hd);
  return out;
}

template <typename T>
std::size_t DetTransNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
InferenceOutput<T> run_inference(const DetTransNet<T>& model, const Tensor<T>& image) {
  NoGradGuard no_grad;
  const auto& cfg = model.config;
  InferenceOutput<T> out;
  out.features = backbone_forward(image, cfg.patch, cfg.encoder, model.backbone);
  out.rpn = rpn_forward(out.features, model.rpn);
  out.proposals = propose(out.rpn, model.anchors, cfg.rpn, model.image_height(), model.image_width());
  if (out.proposals.empty()) return out;
  std::vector<BBox> boxes;
  boxes.reserve(out.proposals.size());
  for (const auto& p : out.proposals) boxes.push_back(p.box);
  auto pooled = roi_align(out.features, boxes, cfg.head.pool_size, model.image_height(),
                          model.image_width());
  auto head = detection_head(pooled, model.head);
  out.detections = postprocess_detections<T>(out.proposals, head, cfg.head, model.image_height(),
                                             model.image_width());
  return out;
}

template struct DetTransNet<float>;
template struct DetTransNet<double>;
template InferenceOutput<float> run_inference(const DetTransNet<float>&, const Tensor<float>&);
template InferenceOutput<double> run_inference(const DetTransNet<double>&, const Tensor<double>&);

}  // namespace dtn
