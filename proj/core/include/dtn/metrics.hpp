#pragma once

// COCO-style detection evaluation.
//
// AP for one (class, IoU threshold, area range) is the mean of the
// interpolated precision envelope sampled at recall 0.00, 0.01, ..., 1.00.
// The reported AP averages over classes and over IoU thresholds
// 0.50:0.05:0.95; classes without ground truth in a range are left out of
// the mean, and a range with no ground truth at all is undefined (null).
//
// Area ranges follow COCO: ground truth outside the range is ignored,
// detections matched to ignored ground truth are dropped, and unmatched
// detections whose own area is outside the range are dropped.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtn/dataset.hpp"
#include "dtn/detector.hpp"

namespace dtn {

struct AreaRange {
  double min_area = 0.0;  // inclusive
  double max_area = std::numeric_limits<double>::infinity();
  bool min_inclusive = true;
  bool max_inclusive = true;

  bool contains(double area) const {
    const bool lo = min_inclusive ? area >= min_area : area > min_area;
    const bool hi = max_inclusive ? area <= max_area : area < max_area;
    return lo && hi;
  }
};

struct EvalOptions {
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  /// Highest-scoring detections kept per image.
  std::size_t max_detections = 100;
  AreaRange small{0.0, 32.0 * 32.0, true, false};
  AreaRange medium{32.0 * 32.0, 96.0 * 96.0, true, true};
  AreaRange large{96.0 * 96.0, std::numeric_limits<double>::infinity(), false, true};
};

struct EvalResult {
  std::optional<double> ap;
  std::optional<double> ap50;
  std::optional<double> ap_small;
  std::optional<double> ap_medium;
  std::optional<double> ap_large;
  std::map<std::string, std::optional<double>> per_class;

  /// Keys: ap, ap50, ap_small, ap_medium, ap_large, per_class{name: ap};
  /// undefined values are null.
  nlohmann::json to_json() const;
  /// Two-space indented, sorted keys, trailing newline.
  std::string to_json_string() const;
};

struct MatchResult {
  std::vector<bool> true_positive;
  /// Matched ground-truth index per detection, or -1.
  std::vector<std::ptrdiff_t> matched_gt;
};

/// Greedy matching of score-sorted detections: each takes the highest-IoU
/// unmatched ground truth of its own class with IoU >= threshold (ties to the
/// lower index); each ground truth is matched at most once.
MatchResult match_detections(std::span<const Detection> detections, std::span<const Annotation> gts,
                             double iou_threshold);

/// 101-point interpolated AP of a ranked list; nullopt when n_gt == 0.
/// Detections are ranked by descending score, ties keep input order.
std::optional<double> average_precision(const std::vector<bool>& true_positive,
                                        std::span<const double> scores, std::size_t n_gt);

using DetectionsByImage = std::map<std::int64_t, std::vector<Detection>>;

/// Throws EvalError for detections on image ids absent from the manifest.
EvalResult evaluate(const DetectionsByImage& detections, const DatasetManifest& manifest,
                    const EvalOptions& options = {});

struct PrPoint {
  double recall;
  double precision;
  double score;
};

/// Raw (non-interpolated) precision/recall after each ranked detection of
/// one class over all images; empty when the class has no ground truth.
std::vector<PrPoint> precision_recall_curve(const DetectionsByImage& detections, const DatasetManifest& manifest,
                                            std::size_t class_id, double iou_threshold,
                                            const EvalOptions& options = {});

}  // namespace dtn
