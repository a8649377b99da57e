#pragma once

// Training targets and losses for the RPN and the ROI head.

#include <cstddef>
#include <span>
#include <vector>

#include "dtn/dataset.hpp"
#include "dtn/detector.hpp"
#include "dtn/geometry.hpp"
#include "dtn/random.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

inline constexpr double kSmoothL1Beta = 1.0;

struct RpnTargetConfig {
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  std::size_t batch_size = 256;
  double positive_fraction = 0.5;
};

enum AnchorLabel : int { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct AnchorTargets {
  /// Per anchor: kPositive / kNegative when sampled, kIgnore otherwise.
  std::vector<int> labels;
  /// Per anchor; meaningful for positives only.
  std::vector<BoxDeltas> regression;

  std::size_t num_sampled() const;
  std::size_t num_positive() const;
};

/// IoU >= positive_iou, or best anchor for some ground truth -> positive;
/// IoU <= negative_iou -> negative; otherwise ignored. `matched` receives the
/// best ground-truth index per anchor (0 when there are none).
std::vector<int> assign_anchor_labels(std::span<const BBox> anchors, std::span<const BBox> gts,
                                      const RpnTargetConfig& cfg,
                                      std::vector<std::size_t>* matched = nullptr);

/// Labels plus subsampling to at most batch_size anchors with up to
/// positive_fraction positives. Without an Rng the lowest-index anchors of
/// each kind are kept.
AnchorTargets build_rpn_targets(std::span<const BBox> anchors, std::span<const BBox> gts,
                                const RpnTargetConfig& cfg, Rng* rng);

template <typename T>
struct LossTerms {
  Tensor<T> total;  // [1]
  double classification = 0.0;
  double regression = 0.0;
};

/// (sum BCE over sampled anchors + sum smooth-L1 over positive deltas) / sampled.
template <typename T>
LossTerms<T> rpn_loss(const RpnOutput<T>& rpn, const AnchorTargets& targets);

template <typename T>
LossTerms<T> rpn_loss(const RpnOutput<T>& rpn, std::span<const BBox> anchors,
                      std::span<const BBox> gts, const RpnTargetConfig& cfg, Rng* rng);

struct RoiSampleConfig {
  std::size_t rois_per_image = 64;
  double positive_fraction = 0.25;
  double positive_iou = 0.5;
  /// Appends the ground-truth boxes to the candidate proposals.
  bool include_ground_truth = true;
};

struct RoiSample {
  std::vector<BBox> boxes;
  /// Class id, or num_classes for background.
  std::vector<std::size_t> labels;
  /// Regression target for positives (zero for background).
  std::vector<BoxDeltas> targets;

  std::size_t size() const { return boxes.size(); }
  std::size_t num_positive(std::size_t num_classes) const;
};

RoiSample sample_rois(std::span<const BBox> proposals, std::span<const Annotation> gts,
                      std::size_t num_classes, const RoiSampleConfig& cfg, Rng* rng);

/// (sum CE over K+1 classes + sum smooth-L1 on the labelled class slice of
/// positives) / number of ROIs.
template <typename T>
LossTerms<T> roi_loss(const HeadOutput<T>& head, const RoiSample& rois, std::size_t num_classes);

}  // namespace dtn
