#pragma once

// Axis-aligned box geometry shared by the detector, training and evaluation.
// Boxes use continuous pixel coordinates with x to the right and y downwards.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace dtn {

struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  static BBox from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Faster R-CNN style regression parameters relative to an anchor.
struct BoxDeltas {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;
};

/// Upper bound applied to tw/th before exponentiation, ln(1000/16).
inline constexpr double kMaxLogScale = 4.135166556742356;

double iou(const BBox& a, const BBox& b);

/// Throws GeometryError on a degenerate anchor or target.
BoxDeltas encode_box(const BBox& anchor, const BBox& target);

/// Exact inverse of encode_box (tw/th are clamped at kMaxLogScale first).
BBox decode_box(const BBox& anchor, const BoxDeltas& deltas);

BBox clip_box(const BBox& box, double image_width, double image_height);

/// decode_box followed by clipping; nullopt if the clipped box is degenerate.
std::optional<BBox> decode_box_clipped(const BBox& anchor, const BoxDeltas& deltas,
                                       double image_width, double image_height);

/// Greedy NMS. Returns indices of kept boxes in descending score order, ties
/// broken by lower input index. A box is suppressed when its IoU with a kept
/// box is strictly greater than the threshold.
std::vector<std::size_t> nms(std::span<const BBox> boxes, std::span<const double> scores,
                             double iou_threshold);

/// Indices sorted by descending score, ties by ascending index.
std::vector<std::size_t> argsort_descending(std::span<const double> scores);

struct AnchorSpec {
  std::vector<double> scales{8.0, 16.0, 24.0};
  /// width / height
  std::vector<double> aspect_ratios{1.0};

  std::size_t count() const { return scales.size() * aspect_ratios.size(); }
  void validate() const;
};

/// g*g*A anchors ordered (row, col, anchor) with scale-major anchor order.
/// Cell (i, j) is centred at ((j + 0.5) * W / g, (i + 0.5) * H / g); anchors
/// may extend past the image.
std::vector<BBox> generate_anchors(std::size_t grid, double image_height, double image_width,
                                   const AnchorSpec& spec);

}  // namespace dtn
