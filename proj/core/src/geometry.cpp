#include "dtn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dtn/errors.hpp"

namespace dtn {

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

BoxDeltas encode_box(const BBox& anchor, const BBox& target) {
  if (!(anchor.width() > 0.0 && anchor.height() > 0.0)) {
    throw GeometryError("encode_box: degenerate anchor");
  }
  if (!(target.width() > 0.0 && target.height() > 0.0)) {
    throw GeometryError("encode_box: degenerate target box");
  }
  return {(target.center_x() - anchor.center_x()) / anchor.width(),
          (target.center_y() - anchor.center_y()) / anchor.height(),
          std::log(target.width() / anchor.width()), std::log(target.height() / anchor.height())};
}

BBox decode_box(const BBox& anchor, const BoxDeltas& d) {
  const double w = anchor.width() * std::exp(std::min(d.tw, kMaxLogScale));
  const double h = anchor.height() * std::exp(std::min(d.th, kMaxLogScale));
  const double cx = anchor.center_x() + d.tx * anchor.width();
  const double cy = anchor.center_y() + d.ty * anchor.height();
  return BBox::from_center(cx, cy, w, h);
}

BBox clip_box(const BBox& box, double image_width, double image_height) {
  return {std::clamp(box.x_min, 0.0, image_width), std::clamp(box.y_min, 0.0, image_height),
          std::clamp(box.x_max, 0.0, image_width), std::clamp(box.y_max, 0.0, image_height)};
}

std::optional<BBox> decode_box_clipped(const BBox& anchor, const BoxDeltas& deltas,
                                       double image_width, double image_height) {
  const BBox b = clip_box(decode_box(anchor, deltas), image_width, image_height);
  if (!b.valid()) return std::nullopt;
  return b;
}

std::vector<std::size_t> argsort_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::vector<std::size_t> nms(std::span<const BBox> boxes, std::span<const double> scores,
                             double iou_threshold) {
  if (boxes.size() != scores.size()) {
    throw std::invalid_argument("nms: " + std::to_string(boxes.size()) + " boxes but " +
                                std::to_string(scores.size()) + " scores");
  }
  const auto order = argsort_descending(scores);
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = true;
    }
  }
  return kept;
}

void AnchorSpec::validate() const {
  if (scales.empty() || aspect_ratios.empty()) {
    throw ConfigError("anchors: need at least one scale and one aspect ratio");
  }
  for (double s : scales)
    if (!(s > 0.0)) throw ConfigError("anchors: scales must be positive");
  for (double r : aspect_ratios)
    if (!(r > 0.0)) throw ConfigError("anchors: aspect ratios must be positive");
}

std::vector<BBox> generate_anchors(std::size_t grid, double image_height, double image_width,
                                   const AnchorSpec& spec) {
  spec.validate();
  if (grid == 0) throw ConfigError("anchors: grid size must be at least 1");
  const double step_y = image_height / static_cast<double>(grid);
  const double step_x = image_width / static_cast<double>(grid);
  std::vector<BBox> anchors;
  anchors.reserve(grid * grid * spec.count());
  for (std::size_t i = 0; i < grid; ++i) {
    for (std::size_t j = 0; j < grid; ++j) {
      const double cy = (static_cast<double>(i) + 0.5) * step_y;
      const double cx = (static_cast<double>(j) + 0.5) * step_x;
      for (double s : spec.scales) {
        for (double r : spec.aspect_ratios) {
          const double root = std::sqrt(r);
          anchors.push_back(BBox::from_center(cx, cy, s * root, s / root));
        }
      }
    }
  }
  return anchors;
}

}  // namespace dtn
