#pragma once

// End-to-end workflows shared by the command-line tool and the tests:
// dataset loading, checkpointed training, batch inference and reporting.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dtn/checkpoint.hpp"
#include "dtn/config.hpp"
#include "dtn/dataset.hpp"
#include "dtn/metrics.hpp"
#include "dtn/model.hpp"
#include "dtn/trainer.hpp"

namespace dtn {

/// Synthetic or COCO data per the config, every sample resized so its
/// shorter edge equals data.resize_target.
DatasetManifest load_dataset(const DataConfig& data);

struct TrainRunOptions {
  std::filesystem::path out_dir;
  /// Continue from this checkpoint instead of a fresh initialization.
  std::optional<std::filesystem::path> resume;
  /// Stop (after checkpointing) once this global iteration is reached.
  std::optional<std::uint64_t> stop_after;
  std::function<void(const LossRecord&)> on_step;
};

struct TrainRunResult {
  std::filesystem::path final_checkpoint;
  std::vector<LossRecord> trace;
  bool completed = false;
};

/// Runs (or resumes) the two-phase schedule. Writes ckpt_<iter>.dtn at the
/// configured cadence and at stop_after, final.dtn at the end, and loss.csv
/// and config.yaml alongside; every file is replaced atomically.
TrainRunResult run_training(const RunConfig& config, const DatasetManifest& data, const TrainRunOptions& options);

/// Header "iteration,phase,loss,classification,regression"; floats in
/// shortest round-trip form.
std::string loss_csv(const std::vector<LossRecord>& trace);

/// Inference on every sample (already sized to the model input).
DetectionsByImage detect_dataset(const DetTransNet<float>& model, const DatasetManifest& data);

/// Detections on an arbitrary image: resized by the shorter edge to the
/// model input, detected, and mapped back to original pixel coordinates.
/// Keeps detections with score strictly above `score_threshold`, sorted by
/// score. Throws ConfigError naming H, W, P and m when the resized image
/// does not fit the patch grid.
std::vector<Detection> detect_image(const DetTransNet<float>& model, const Image& image, std::size_t resize_target,
                                    double score_threshold);

/// Precision/recall polyline per class at IoU 0.5, as a standalone SVG.
std::string pr_curve_svg(const DetectionsByImage& detections, const DatasetManifest& data);

/// Ground truth in green, detections in a per-class colour.
Image annotate(const Image& image, const std::vector<Annotation>& truth, const std::vector<Detection>& detections);

}  // namespace dtn
