#include "dtn/losses.hpp"

#include <algorithm>
#include <numeric>

#include "dtn/errors.hpp"
#include "dtn/ops.hpp"

namespace dtn {

std::size_t AnchorTargets::num_sampled() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](int l) { return l != kIgnore; }));
}

std::size_t AnchorTargets::num_positive() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), int(kPositive)));
}

std::vector<int> assign_anchor_labels(std::span<const BBox> anchors, std::span<const BBox> gts,
                                      const RpnTargetConfig& cfg, std::vector<std::size_t>* matched) {
  std::vector<int> labels(anchors.size(), kIgnore);
  if (matched) matched->assign(anchors.size(), 0);
  if (gts.empty()) {
    std::fill(labels.begin(), labels.end(), int(kNegative));
    return labels;
  }
  std::vector<double> best_for_gt(gts.size(), 0.0);
  std::vector<double> best_for_anchor(anchors.size(), 0.0);
  std::vector<double> overlaps(anchors.size() * gts.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = iou(anchors[a], gts[g]);
      overlaps[a * gts.size() + g] = o;
      if (o > best_for_anchor[a]) {
        best_for_anchor[a] = o;
        if (matched) (*matched)[a] = g;
      }
      best_for_gt[g] = std::max(best_for_gt[g], o);
    }
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (best_for_anchor[a] >= cfg.positive_iou) {
      labels[a] = kPositive;
    } else if (best_for_anchor[a] <= cfg.negative_iou) {
      labels[a] = kNegative;
    }
  }
  // Every ground truth gets its best anchor(s), including ties.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (best_for_gt[g] <= 0.0) continue;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (overlaps[a * gts.size() + g] == best_for_gt[g]) {
        labels[a] = kPositive;
        if (matched) (*matched)[a] = g;
      }
    }
  }
  return labels;
}

namespace {

// Keeps `keep` of the given indices, randomly when an Rng is supplied.
std::vector<std::size_t> subsample(std::vector<std::size_t> idx, std::size_t keep, Rng* rng) {
  if (idx.size() <= keep) return idx;
  if (rng) {
    rng->shuffle(idx.begin(), idx.end());
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
  } else {
    idx.resize(keep);
  }
  return idx;
}

}  // namespace

AnchorTargets build_rpn_targets(std::span<const BBox> anchors, std::span<const BBox> gts,
                                const RpnTargetConfig& cfg, Rng* rng) {
  std::vector<std::size_t> matched;
  const auto labels = assign_anchor_labels(anchors, gts, cfg, &matched);
  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] == kPositive) pos.push_back(a);
    if (labels[a] == kNegative) neg.push_back(a);
  }
  const auto max_pos = static_cast<std::size_t>(static_cast<double>(cfg.batch_size) * cfg.positive_fraction);
  pos = subsample(std::move(pos), max_pos, rng);
  neg = subsample(std::move(neg), cfg.batch_size - pos.size(), rng);

  AnchorTargets t;
  t.labels.assign(anchors.size(), kIgnore);
  t.regression.assign(anchors.size(), BoxDeltas{});
  for (auto a : neg) t.labels[a] = kNegative;
  for (auto a : pos) {
    t.labels[a] = kPositive;
    t.regression[a] = encode_box(anchors[a], gts[matched[a]]);
  }
  return t;
}

template <typename T>
LossTerms<T> rpn_loss(const RpnOutput<T>& rpn, const AnchorTargets& targets) {
  const std::size_t n = targets.labels.size();
  if (rpn.objectness.numel() != n || rpn.deltas.numel() != 4 * n) {
    throw ShapeError("rpn_loss: outputs " + shape_str(rpn.objectness.shape()) + "/" +
                     shape_str(rpn.deltas.shape()) + " do not match " + std::to_string(n) +
                     " anchor targets");
  }
  const std::size_t sampled = targets.num_sampled();
  if (sampled == 0) throw std::invalid_argument("rpn_loss: no sampled anchors");
  std::vector<T> cls_target(n, T(0)), cls_weight(n, T(0));
  std::vector<T> reg_target(4 * n, T(0)), reg_weight(4 * n, T(0));
  for (std::size_t a = 0; a < n; ++a) {
    if (targets.labels[a] == kIgnore) continue;
    cls_weight[a] = T(1);
    if (targets.labels[a] != kPositive) continue;
    cls_target[a] = T(1);
    const auto& d = targets.regression[a];
    const double v[4] = {d.tx, d.ty, d.tw, d.th};
    for (int k = 0; k < 4; ++k) {
      reg_target[4 * a + k] = static_cast<T>(v[k]);
      reg_weight[4 * a + k] = T(1);
    }
  }
  const T norm = T(1) / static_cast<T>(sampled);
  auto cls = scale(bce_with_logits_sum<T>(rpn.objectness, cls_target, cls_weight), norm);
  auto reg = scale(smooth_l1_sum<T>(rpn.deltas, reg_target, reg_weight, T(kSmoothL1Beta)), norm);
  LossTerms<T> out;
  out.classification = static_cast<double>(cls.item());
  out.regression = static_cast<double>(reg.item());
  out.total = add(cls, reg);
  return out;
}

template <typename T>
LossTerms<T> rpn_loss(const RpnOutput<T>& rpn, std::span<const BBox> anchors,
                      std::span<const BBox> gts, const RpnTargetConfig& cfg, Rng* rng) {
  return rpn_loss(rpn, build_rpn_targets(anchors, gts, cfg, rng));
}

std::size_t RoiSample::num_positive(std::size_t num_classes) const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(),
                                                [num_classes](std::size_t l) { return l < num_classes; }));
}

RoiSample sample_rois(std::span<const BBox> proposals, std::span<const Annotation> gts,
                      std::size_t num_classes, const RoiSampleConfig& cfg, Rng* rng) {
  if (cfg.rois_per_image == 0) throw ConfigError("sample_rois: rois_per_image must be positive");
  std::vector<BBox> candidates(proposals.begin(), proposals.end());
  if (cfg.include_ground_truth)
    for (const auto& g : gts) candidates.push_back(g.box);

  std::vector<std::size_t> pos, neg, best(candidates.size(), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double top = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = iou(candidates[i], gts[g].box);
      if (o > top) {
        top = o;
        best[i] = g;
      }
    }
    (top >= cfg.positive_iou ? pos : neg).push_back(i);
  }
  const auto max_pos = static_cast<std::size_t>(static_cast<double>(cfg.rois_per_image) * cfg.positive_fraction);
  pos = subsample(std::move(pos), max_pos, rng);
  neg = subsample(std::move(neg), cfg.rois_per_image - pos.size(), rng);

  RoiSample s;
  for (auto i : pos) {
    s.boxes.push_back(candidates[i]);
    s.labels.push_back(gts[best[i]].class_id);
    s.targets.push_back(encode_box(candidates[i], gts[best[i]].box));
  }
  for (auto i : neg) {
    s.boxes.push_back(candidates[i]);
    s.labels.push_back(num_classes);
    s.targets.push_back({});
  }
  return s;
}

template <typename T>
LossTerms<T> roi_loss(const HeadOutput<T>& head, const RoiSample& rois, std::size_t num_classes) {
  const std::size_t r = rois.size();
  if (r == 0) throw std::invalid_argument("roi_loss: no ROIs");
  if (head.class_logits.shape() != Shape{r, num_classes + 1} ||
      head.box_deltas.shape() != Shape{r, 4 * num_classes}) {
    throw ShapeError("roi_loss: head outputs " + shape_str(head.class_logits.shape()) + "/" +
                     shape_str(head.box_deltas.shape()) + " do not match " + std::to_string(r) +
                     " ROIs and " + std::to_string(num_classes) + " classes");
  }
  std::vector<T> reg_target(4 * r * num_classes, T(0)), reg_weight(4 * r * num_classes, T(0));
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t c = rois.labels[i];
    if (c >= num_classes) continue;
    const auto& d = rois.targets[i];
    const double v[4] = {d.tx, d.ty, d.tw, d.th};
    for (int k = 0; k < 4; ++k) {
      reg_target[i * 4 * num_classes + 4 * c + k] = static_cast<T>(v[k]);
      reg_weight[i * 4 * num_classes + 4 * c + k] = T(1);
    }
  }
  const T norm = T(1) / static_cast<T>(r);
  auto cls = scale(cross_entropy_sum<T>(head.class_logits, rois.labels), norm);
  auto reg = scale(smooth_l1_sum<T>(head.box_deltas, reg_target, reg_weight, T(kSmoothL1Beta)), norm);
  LossTerms<T> out;
  out.classification = static_cast<double>(cls.item());
  out.regression = static_cast<double>(reg.item());
  out.total = add(cls, reg);
  return out;
}

template LossTerms<float> rpn_loss(const RpnOutput<float>&, const AnchorTargets&);
template LossTerms<double> rpn_loss(const RpnOutput<double>&, const AnchorTargets&);
template LossTerms<float> rpn_loss(const RpnOutput<float>&, std::span<const BBox>,
                                   std::span<const BBox>, const RpnTargetConfig&, Rng*);
template LossTerms<double> rpn_loss(const RpnOutput<double>&, std::span<const BBox>,
                                    std::span<const BBox>, const RpnTargetConfig&, Rng*);
template LossTerms<float> roi_loss(const HeadOutput<float>&, const RoiSample&, std::size_t);
template LossTerms<double> roi_loss(const HeadOutput<double>&, const RoiSample&, std::size_t);

}  // namespace dtn
