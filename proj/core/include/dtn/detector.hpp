#pragma once

// Region proposal network and the ROI classification/regression head.
//
// The RPN slides an s x s same-padded convolution over the feature map and
// feeds every window into two 1x1 convolutions (objectness logits, box
// deltas). A 1x1 convolution applied at every window position is the same
// computation as a fully connected layer per window.

#include <cstddef>
#include <span>
#include <vector>

#include "dtn/backbone.hpp"
#include "dtn/geometry.hpp"
#include "dtn/random.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

struct Proposal {
  BBox box;
  double objectness = 0.0;
};

struct Detection {
  BBox box;
  std::size_t class_id = 0;
  double score = 0.0;
};

struct RPNConfig {
  std::size_t kernel_size = 3;
  std::size_t hidden_dim = 64;
  AnchorSpec anchors;
  double nms_iou = 0.7;
  std::size_t pre_nms_top = 300;
  std::size_t post_nms_top = 100;

  void validate() const;
};

struct HeadConfig {
  std::size_t pool_size = 7;
  std::size_t hidden_dim = 128;
  std::size_t num_classes = 3;
  double nms_iou = 0.5;
  double score_threshold = 0.05;
  std::size_t max_detections = 100;

  void validate() const;
};

template <typename T>
struct RpnWeights {
  Tensor<T> conv_w, conv_b;    // s x s x D x hidden
  Tensor<T> obj_w, obj_b;      // hidden x A
  Tensor<T> delta_w, delta_b;  // hidden x 4A
};

template <typename T>
struct HeadWeights {
  Tensor<T> fc1_w, fc1_b;    // q*q*D x hidden
  Tensor<T> fc2_w, fc2_b;    // hidden x hidden
  Tensor<T> cls_w, cls_b;    // hidden x (K+1), background is index K
  Tensor<T> bbox_w, bbox_b;  // hidden x 4K
};

template <typename T>
struct RpnOutput {
  Tensor<T> objectness;  // g x g x A logits
  Tensor<T> deltas;      // g x g x 4A, (tx, ty, tw, th) per anchor
};

template <typename T>
struct HeadOutput {
  Tensor<T> class_logits;  // R x (K+1)
  Tensor<T> box_deltas;    // R x 4K
};

template <typename T>
RpnOutput<T> rpn_forward(const FeatureMap<T>& fm, const RpnWeights<T>& weights);

/// Decode, clip, drop degenerate, top-k by objectness, NMS, top-k again.
template <typename T>
std::vector<Proposal> propose(const RpnOutput<T>& rpn, std::span<const BBox> anchors,
                              const RPNConfig& cfg, double image_height, double image_width);

/// Bilinear ROI pooling: each box is mapped to feature coordinates (cell
/// (i, j) spans [j, j+1] x [i, i+1]) and sampled once at the centre of each
/// of the q x q bins. Output is R x (q*q*D), rows in (bin_row, bin_col,
/// channel) order. Throws GeometryError for a box that misses the image.
template <typename T>
Tensor<T> roi_align(const FeatureMap<T>& fm, std::span<const BBox> boxes, std::size_t pool_size,
                    double image_height, double image_width);

/// Single-box form of roi_align, shaped q x q x D.
template <typename T>
Tensor<T> roi_pool(const FeatureMap<T>& fm, const BBox& box, std::size_t pool_size,
                   double image_height, double image_width);

/// Two hidden FC layers (ReLU) feeding parallel class and per-class box heads.
template <typename T>
HeadOutput<T> detection_head(const Tensor<T>& roi_features, const HeadWeights<T>& weights);

/// Softmax scores per ROI, per-class box decoding from the proposal, score
/// threshold, per-class NMS, and the max_detections cap. Sorted by score.
template <typename T>
std::vector<Detection> postprocess_detections(std::span<const Proposal> proposals,
                                              const HeadOutput<T>& head, const HeadConfig& cfg,
                                              double image_height, double image_width);

template <typename T>
RpnWeights<T> init_rpn(std::size_t channels, const RPNConfig& cfg, Rng& rng);

template <typename T>
HeadWeights<T> init_head(std::size_t channels, const HeadConfig& cfg, Rng& rng);

}  // namespace dtn
