#include "dtn/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "dtn/errors.hpp"

namespace dtn {

namespace {

struct Scored {
  double score;
  bool tp;
};

// One image, one class, one threshold, one area range.
void match_one(std::span<const Detection> dets, std::span<const BBox> gts,
               const std::vector<bool>& gt_ignore, double thr, const AreaRange* range,
               std::vector<Scored>& out) {
  // Visit non-ignored ground truth first so that a detection prefers it.
  std::vector<std::size_t> order(gts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_partition(order.begin(), order.end(), [&](std::size_t g) { return !gt_ignore[g]; });
  std::vector<bool> taken(gts.size(), false);
  for (const auto& d : dets) {
    std::ptrdiff_t best = -1;
    double best_iou = thr;
    for (auto g : order) {
      if (taken[g]) continue;
      if (best >= 0 && !gt_ignore[static_cast<std::size_t>(best)] && gt_ignore[g]) break;
      const double o = iou(d.box, gts[g]);
      if (o < best_iou || (best >= 0 && o == best_iou)) continue;
      best_iou = o;
      best = static_cast<std::ptrdiff_t>(g);
    }
    bool ignore;
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      ignore = gt_ignore[static_cast<std::size_t>(best)];
    } else {
      ignore = range != nullptr && !range->contains(d.box.area());
    }
    if (!ignore) out.push_back({d.score, best >= 0});
  }
}

}  // namespace

MatchResult match_detections(std::span<const Detection> detections, std::span<const Annotation> gts,
                             double iou_threshold) {
  MatchResult result;
  result.true_positive.resize(detections.size(), false);
  result.matched_gt.resize(detections.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto& d = detections[i];
    std::ptrdiff_t best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != d.class_id) continue;
      const double o = iou(d.box, gts[g].box);
      if (o < best_iou || (best >= 0 && o == best_iou)) continue;
      best_iou = o;
      best = static_cast<std::ptrdiff_t>(g);
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      result.true_positive[i] = true;
      result.matched_gt[i] = best;
    }
  }
  return result;
}

std::optional<double> average_precision(const std::vector<bool>& true_positive,
                                        std::span<const double> scores, std::size_t n_gt) {
  if (true_positive.size() != scores.size()) {
    throw std::invalid_argument("average_precision: flags and scores differ in length");
  }
  if (n_gt == 0) return std::nullopt;
  const auto order = argsort_descending(scores);
  const std::size_t n = order.size();
  std::vector<std::size_t> tp_cum(n);
  std::vector<double> precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (true_positive[order[i]]) ++tp;
    tp_cum[i] = tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  std::size_t cursor = 0;
  for (std::size_t k = 0; k <= 100; ++k) {
    // First rank whose recall tp/n_gt reaches k/100, compared exactly.
    while (cursor < n && tp_cum[cursor] * 100 < k * n_gt) ++cursor;
    if (cursor < n) total += precision[cursor];
  }
  return total / 101.0;
}

nlohmann::json EvalResult::to_json() const {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j;
  j["ap"] = opt(ap);
  j["ap50"] = opt(ap50);
  j["ap_small"] = opt(ap_small);
  j["ap_medium"] = opt(ap_medium);
  j["ap_large"] = opt(ap_large);
  j["per_class"] = nlohmann::json::object();
  for (const auto& [name, v] : per_class) j["per_class"][name] = opt(v);
  return j;
}

std::string EvalResult::to_json_string() const {
  return to_json().dump(2) + "\n";
}

namespace {

using ImageIndex = std::map<std::int64_t, const ImageSample*>;

struct Prepared {
  ImageIndex images;
  // Per image, score-sorted and capped.
  std::map<std::int64_t, std::vector<Detection>> detections;
};

Prepared prepare(const DetectionsByImage& detections, const DatasetManifest& manifest, const EvalOptions& options) {
  // Canonical image order (ascending id) regardless of how callers iterate.
  Prepared p;
  for (const auto& s : manifest.samples) p.images[s.image_id] = &s;
  for (const auto& [id, dets] : detections) {
    if (!p.images.count(id)) throw EvalError("detections reference unknown image id " + std::to_string(id));
  }
  for (const auto& [id, sample] : p.images) {
    auto it = detections.find(id);
    std::vector<Detection> dets = it == detections.end() ? std::vector<Detection>{} : it->second;
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (dets.size() > options.max_detections) dets.resize(options.max_detections);
    p.detections[id] = std::move(dets);
  }
  return p;
}

struct Ranked {
  std::vector<bool> tp;
  std::vector<double> scores;
  std::size_t n_gt = 0;
};

// Pooled detections of one class over all images; range nullptr means all areas.
Ranked rank(const Prepared& p, const AreaRange* range, std::size_t cls, double thr) {
  std::vector<Scored> pooled;
  Ranked r;
  for (const auto& [id, sample] : p.images) {
    std::vector<BBox> gts;
    std::vector<bool> ignore;
    for (const auto& a : sample->annotations) {
      if (a.class_id != cls) continue;
      gts.push_back(a.box);
      const bool ig = range != nullptr && !range->contains(a.box.area());
      ignore.push_back(ig);
      if (!ig) ++r.n_gt;
    }
    std::vector<Detection> dets;
    for (const auto& d : p.detections.at(id))
      if (d.class_id == cls) dets.push_back(d);
    match_one(dets, gts, ignore, thr, range, pooled);
  }
  for (const auto& s : pooled) {
    r.tp.push_back(s.tp);
    r.scores.push_back(s.score);
  }
  return r;
}

}  // namespace

EvalResult evaluate(const DetectionsByImage& detections, const DatasetManifest& manifest,
                    const EvalOptions& options) {
  const Prepared prepared = prepare(detections, manifest, options);
  const std::size_t k = manifest.num_classes();
  auto ap_for = [&](const AreaRange* range, std::size_t cls, double thr) {
    const auto r = rank(prepared, range, cls, thr);
    return average_precision(r.tp, r.scores, r.n_gt);
  };

  auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  auto summarize = [&](const AreaRange* range, std::map<std::size_t, std::optional<double>>* by_class) {
    std::vector<double> all;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> per;
      for (double thr : options.iou_thresholds) {
        if (auto v = ap_for(range, c, thr)) per.push_back(*v);
      }
      if (by_class) (*by_class)[c] = mean_of(per);
      all.insert(all.end(), per.begin(), per.end());
    }
    return mean_of(all);
  };

  EvalResult r;
  std::map<std::size_t, std::optional<double>> by_class;
  r.ap = summarize(nullptr, &by_class);
  for (std::size_t c = 0; c < k; ++c) r.per_class[manifest.class_names[c]] = by_class[c];
  std::vector<double> at50;
  for (std::size_t c = 0; c < k; ++c)
    if (auto v = ap_for(nullptr, c, 0.5)) at50.push_back(*v);
  r.ap50 = mean_of(at50);
  r.ap_small = summarize(&options.small, nullptr);
  r.ap_medium = summarize(&options.medium, nullptr);
  r.ap_large = summarize(&options.large, nullptr);
  return r;
}

std::vector<PrPoint> precision_recall_curve(const DetectionsByImage& detections, const DatasetManifest& manifest,
                                            std::size_t class_id, double iou_threshold,
                                            const EvalOptions& options) {
  const auto r = rank(prepare(detections, manifest, options), nullptr, class_id, iou_threshold);
  std::vector<PrPoint> curve;
  if (r.n_gt == 0) return curve;
  std::size_t tp = 0;
  const auto order = argsort_descending(r.scores);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (r.tp[order[i]]) ++tp;
    curve.push_back({static_cast<double>(tp) / static_cast<double>(r.n_gt),
                     static_cast<double>(tp) / static_cast<double>(i + 1), r.scores[order[i]]});
  }
  return curve;
}

}  // namespace dtn
