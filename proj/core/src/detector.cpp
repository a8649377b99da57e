#include "dtn/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dtn/errors.hpp"
#include "dtn/init.hpp"
#include "dtn/ops.hpp"

namespace dtn {

using detail::grad_target;
using detail::make_result;
using detail::Node;

void RPNConfig::validate() const {
  if (kernel_size == 0 || kernel_size % 2 == 0) {
    throw ConfigError("rpn: kernel_size must be odd, got " + std::to_string(kernel_size));
  }
  if (hidden_dim == 0) throw ConfigError("rpn: hidden_dim must be positive");
  anchors.validate();
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("rpn: nms_iou must be in (0, 1)");
  if (pre_nms_top == 0 || post_nms_top == 0) throw ConfigError("rpn: top-k counts must be positive");
}

void HeadConfig::validate() const {
  if (pool_size == 0) throw ConfigError("head: pool_size must be positive");
  if (hidden_dim == 0) throw ConfigError("head: hidden_dim must be positive");
  if (num_classes == 0) throw ConfigError("head: num_classes must be positive");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("head: nms_iou must be in (0, 1)");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0))
    throw ConfigError("head: score_threshold must be in [0, 1]");
  if (max_detections == 0) throw ConfigError("head: max_detections must be positive");
}

namespace {

// Per-pixel 1x1 convolution on a g x g x C map.
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& map, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t g0 = map.dim(0), g1 = map.dim(1), c = map.dim(2);
  auto flat = reshape(map, {g0 * g1, c});
  auto out = add_rowwise(matmul(flat, w), b);
  return reshape(out, {g0, g1, w.dim(1)});
}

}  // namespace

template <typename T>
RpnOutput<T> rpn_forward(const FeatureMap<T>& fm, const RpnWeights<T>& weights) {
  auto hidden = relu(conv2d(fm.values, weights.conv_w, weights.conv_b));
  return {pointwise_conv(hidden, weights.obj_w, weights.obj_b),
          pointwise_conv(hidden, weights.delta_w, weights.delta_b)};
}

template <typename T>
std::vector<Proposal> propose(const RpnOutput<T>& rpn, std::span<const BBox> anchors,
                              const RPNConfig& cfg, double image_height, double image_width) {
  const auto logits = rpn.objectness.data();
  const auto deltas = rpn.deltas.data();
  if (logits.size() != anchors.size() || deltas.size() != 4 * anchors.size()) {
    throw ShapeError("propose: RPN outputs " + shape_str(rpn.objectness.shape()) + "/" +
                     shape_str(rpn.deltas.shape()) + " do not match " +
                     std::to_string(anchors.size()) + " anchors");
  }
  std::vector<BBox> boxes;
  std::vector<double> scores;
  boxes.reserve(anchors.size());
  scores.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const BoxDeltas d{static_cast<double>(deltas[4 * i]), static_cast<double>(deltas[4 * i + 1]),
                      static_cast<double>(deltas[4 * i + 2]), static_cast<double>(deltas[4 * i + 3])};
    auto box = decode_box_clipped(anchors[i], d, image_width, image_height);
    if (!box) continue;
    boxes.push_back(*box);
    scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(logits[i]))));
  }
  auto order = argsort_descending(scores);
  if (order.size() > cfg.pre_nms_top) order.resize(cfg.pre_nms_top);
  std::vector<BBox> top_boxes;
  std::vector<double> top_scores;
  for (auto i : order) {
    top_boxes.push_back(boxes[i]);
    top_scores.push_back(scores[i]);
  }
  auto kept = nms(top_boxes, top_scores, cfg.nms_iou);
  if (kept.size() > cfg.post_nms_top) kept.resize(cfg.post_nms_top);
  std::vector<Proposal> out;
  out.reserve(kept.size());
  for (auto i : kept) out.push_back({top_boxes[i], top_scores[i]});
  return out;
}

namespace {

struct BilinearTap {
  std::size_t idx[4];
  double weight[4];
};

// Sampling taps for every (roi, bin) pair, shared by forward and backward.
std::vector<BilinearTap> roi_taps(std::span<const BBox> boxes, std::size_t g, std::size_t q,
                                  double image_height, double image_width) {
  const double sx = static_cast<double>(g) / image_width;
  const double sy = static_cast<double>(g) / image_height;
  const double max_coord = static_cast<double>(g - 1);
  std::vector<BilinearTap> taps;
  taps.reserve(boxes.size() * q * q);
  for (const auto& box : boxes) {
    if (!box.valid() || box.x_max <= 0.0 || box.y_max <= 0.0 || box.x_min >= image_width ||
        box.y_min >= image_height) {
      throw GeometryError("roi_align: box does not overlap the image");
    }
    const double x0 = box.x_min * sx, y0 = box.y_min * sy;
    const double bw = box.width() * sx / static_cast<double>(q);
    const double bh = box.height() * sy / static_cast<double>(q);
    for (std::size_t u = 0; u < q; ++u) {
      for (std::size_t v = 0; v < q; ++v) {
        // Cell centres sit at integer + 0.5 in feature coordinates.
        const double py = std::clamp(y0 + (static_cast<double>(u) + 0.5) * bh - 0.5, 0.0, max_coord);
        const double px = std::clamp(x0 + (static_cast<double>(v) + 0.5) * bw - 0.5, 0.0, max_coord);
        const auto iy = static_cast<std::size_t>(std::floor(py));
        const auto ix = static_cast<std::size_t>(std::floor(px));
        const std::size_t iy1 = std::min(iy + 1, g - 1), ix1 = std::min(ix + 1, g - 1);
        const double ly = py - static_cast<double>(iy), lx = px - static_cast<double>(ix);
        taps.push_back({{iy * g + ix, iy * g + ix1, iy1 * g + ix, iy1 * g + ix1},
                        {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx}});
      }
    }
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> roi_align(const FeatureMap<T>& fm, std::span<const BBox> boxes, std::size_t pool_size,
                    double image_height, double image_width) {
  const auto& map = fm.values;
  if (map.rank() != 3 || map.dim(0) != map.dim(1)) {
    throw ShapeError("roi_align: expected a square g x g x D map, got " + shape_str(map.shape()));
  }
  if (boxes.empty()) throw ShapeError("roi_align: no boxes");
  if (pool_size == 0) throw ConfigError("roi_align: pool size must be positive");
  const std::size_t g = map.dim(0), d = map.dim(2), q = pool_size;
  auto taps = roi_taps(boxes, g, q, image_height, image_width);
  const std::size_t width = q * q * d;
  const auto src = map.data();
  std::vector<T> out(boxes.size() * width, T(0));
  for (std::size_t t = 0; t < taps.size(); ++t) {
    T* dst = out.data() + t * d;
    for (int k = 0; k < 4; ++k) {
      const T wgt = static_cast<T>(taps[t].weight[k]);
      if (wgt == T(0)) continue;
      const T* cell = src.data() + taps[t].idx[k] * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += wgt * cell[c];
    }
  }
  return make_result<T>("roi_align", {boxes.size(), width}, std::move(out), {&map},
                        [taps = std::move(taps), d](Node<T>& self) {
                          auto* g = grad_target(*self.inputs[0]);
                          if (!g) return;
                          for (std::size_t t = 0; t < taps.size(); ++t) {
                            const T* up = self.grad.data() + t * d;
                            for (int k = 0; k < 4; ++k) {
                              const T wgt = static_cast<T>(taps[t].weight[k]);
                              if (wgt == T(0)) continue;
                              T* cell = g->data() + taps[t].idx[k] * d;
                              for (std::size_t c = 0; c < d; ++c) cell[c] += wgt * up[c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> roi_pool(const FeatureMap<T>& fm, const BBox& box, std::size_t pool_size,
                   double image_height, double image_width) {
  auto pooled = roi_align(fm, std::span<const BBox>(&box, 1), pool_size, image_height, image_width);
  return reshape(pooled, {pool_size, pool_size, fm.channels()});
}

template <typename T>
HeadOutput<T> detection_head(const Tensor<T>& roi_features, const HeadWeights<T>& w) {
  if (roi_features.rank() != 2 || roi_features.dim(1) != w.fc1_w.dim(0)) {
    throw ShapeError("detection_head: ROI features " + shape_str(roi_features.shape()) +
                     " do not match fc1 " + shape_str(w.fc1_w.shape()));
  }
  auto h = relu(add_rowwise(matmul(roi_features, w.fc1_w), w.fc1_b));
  h = relu(add_rowwise(matmul(h, w.fc2_w), w.fc2_b));
  return {add_rowwise(matmul(h, w.cls_w), w.cls_b), add_rowwise(matmul(h, w.bbox_w), w.bbox_b)};
}

template <typename T>
std::vector<Detection> postprocess_detections(std::span<const Proposal> proposals,
                                              const HeadOutput<T>& head, const HeadConfig& cfg,
                                              double image_height, double image_width) {
  const std::size_t k = cfg.num_classes;
  const std::size_t rois = proposals.size();
  if (rois == 0) return {};
  if (head.class_logits.shape() != Shape{rois, k + 1} || head.box_deltas.shape() != Shape{rois, 4 * k}) {
    throw ShapeError("postprocess_detections: head outputs " + shape_str(head.class_logits.shape()) +
                     "/" + shape_str(head.box_deltas.shape()) + " do not match " +
                     std::to_string(rois) + " proposals and " + std::to_string(k) + " classes");
  }
  const auto logits = head.class_logits.data();
  const auto deltas = head.box_deltas.data();
  std::vector<Detection> all;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<BBox> boxes;
    std::vector<double> scores;
    for (std::size_t r = 0; r < rois; ++r) {
      const T* row = logits.data() + r * (k + 1);
      double mx = static_cast<double>(*std::max_element(row, row + k + 1));
      double denom = 0.0;
      for (std::size_t j = 0; j <= k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
      const double score = std::exp(static_cast<double>(row[c]) - mx) / denom;
      if (!(score > cfg.score_threshold)) continue;
      const T* dl = deltas.data() + r * 4 * k + 4 * c;
      const BoxDeltas bd{static_cast<double>(dl[0]), static_cast<double>(dl[1]),
                         static_cast<double>(dl[2]), static_cast<double>(dl[3])};
      auto box = decode_box_clipped(proposals[r].box, bd, image_width, image_height);
      if (!box) continue;
      boxes.push_back(*box);
      scores.push_back(score);
    }
    for (auto i : nms(boxes, scores, cfg.nms_iou)) all.push_back({boxes[i], c, scores[i]});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (all.size() > cfg.max_detections) all.resize(cfg.max_detections);
  return all;
}

template <typename T>
RpnWeights<T> init_rpn(std::size_t channels, const RPNConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t s = cfg.kernel_size, hidden = cfg.hidden_dim, a = cfg.anchors.count();
  RpnWeights<T> w;
  w.conv_w = init::he_normal<T>({s, s, channels, hidden}, s * s * channels, rng);
  w.conv_b = init::constant<T>({hidden}, T(0));
  w.obj_w = init::truncated_normal<T>({hidden, a}, 0.01, rng);
  w.obj_b = init::constant<T>({a}, T(0));
  w.delta_w = init::truncated_normal<T>({hidden, 4 * a}, 0.01, rng);
  w.delta_b = init::constant<T>({4 * a}, T(0));
  return w;
}

template <typename T>
HeadWeights<T> init_head(std::size_t channels, const HeadConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t in = cfg.pool_size * cfg.pool_size * channels, hidden = cfg.hidden_dim;
  const std::size_t k = cfg.num_classes;
  HeadWeights<T> w;
  w.fc1_w = init::he_normal<T>({in, hidden}, in, rng);
  w.fc1_b = init::constant<T>({hidden}, T(0));
  w.fc2_w = init::he_normal<T>({hidden, hidden}, hidden, rng);
  w.fc2_b = init::constant<T>({hidden}, T(0));
  w.cls_w = init::truncated_normal<T>({hidden, k + 1}, 0.01, rng);
  w.cls_b = init::constant<T>({k + 1}, T(0));
  w.bbox_w = init::truncated_normal<T>({hidden, 4 * k}, 0.001, rng);
  w.bbox_b = init::constant<T>({4 * k}, T(0));
  return w;
}

#define DTN_INSTANTIATE_DETECTOR(T)                                                              \
  template RpnOutput<T> rpn_forward(const FeatureMap<T>&, const RpnWeights<T>&);                 \
  template std::vector<Proposal> propose(const RpnOutput<T>&, std::span<const BBox>,             \
                                         const RPNConfig&, double, double);                      \
  template Tensor<T> roi_align(const FeatureMap<T>&, std::span<const BBox>, std::size_t, double, \
                               double);                                                          \
  template Tensor<T> roi_pool(const FeatureMap<T>&, const BBox&, std::size_t, double, double);   \
  template HeadOutput<T> detection_head(const Tensor<T>&, const HeadWeights<T>&);                \
  template std::vector<Detection> postprocess_detections(std::span<const Proposal>,              \
                                                         const HeadOutput<T>&,                   \
                                                         const HeadConfig&, double, double);     \
  template RpnWeights<T> init_rpn(std::size_t, const RPNConfig&, Rng&);                          \
  template HeadWeights<T> init_head(std::size_t, const HeadConfig&, Rng&);

DTN_INSTANTIATE_DETECTOR(float)
DTN_INSTANTIATE_DETECTOR(double)

}  // namespace dtn
