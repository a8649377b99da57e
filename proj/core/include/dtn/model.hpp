#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtn/backbone.hpp"
#include "dtn/detector.hpp"

namespace dtn {

struct ModelConfig {
  PatchConfig patch;
  EncoderConfig encoder;
  std::size_t residual_blocks = 2;
  RPNConfig rpn;
  HeadConfig head;

  std::size_t grid() const { return patch.patches_per_side(); }
  void validate() const;
};

enum class ParamGroup { Backbone, Rpn, Head };

const char* to_string(ParamGroup group);

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;  // shares storage with the model
  ParamGroup group;
};

/// Backbone + RPN + ROI head with its fixed anchor set.
template <typename T>
struct DetTransNet {
  ModelConfig config;
  BackboneWeights<T> backbone;
  RpnWeights<T> rpn;
  HeadWeights<T> head;
  std::vector<BBox> anchors;

  static DetTransNet create(const ModelConfig& config, std::uint64_t seed);

  /// Stable, fully qualified names ("backbone.layers.0.qkv_w", ...).
  std::vector<NamedParameter<T>> parameters() const;
  std::size_t parameter_count() const;
  double image_height() const { return static_cast<double>(config.patch.height); }
  double image_width() const { return static_cast<double>(config.patch.width); }
};

template <typename T>
struct InferenceOutput {
  FeatureMap<T> features;
  RpnOutput<T> rpn;
  std::vector<Proposal> proposals;
  std::vector<Detection> detections;
};

/// Full forward pass on a normalized H x W x C image without graph recording.
template <typename T>
InferenceOutput<T> run_inference(const DetTransNet<T>& model, const Tensor<T>& image);

}  // namespace dtn
