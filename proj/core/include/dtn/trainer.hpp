#pragma once

// Two-phase training: phase 1 fits backbone + RPN on the RPN loss; phase 2
// freezes both and fits the ROI head on proposals from the frozen RPN.
//
// Every random draw (data order, flips, anchor and ROI sampling, dropout) is
// taken from a stream keyed by (seed, phase, iteration, slot), so a run that
// is stopped and resumed from a checkpoint replays the same draws.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "dtn/dataset.hpp"
#include "dtn/losses.hpp"
#include "dtn/model.hpp"
#include "dtn/optimizer.hpp"

namespace dtn {

struct TrainSchedule {
  std::uint64_t phase1_iters = 2000;
  std::uint64_t phase2_iters = 2000;
  std::size_t batch_size = 2;
  std::size_t rois_per_image = 64;
  std::size_t rpn_batch = 256;
  bool flip = true;
  std::uint64_t seed = 42;
  /// Phase-2 (head) learning rate as a multiple of the optimizer lr.
  double phase2_lr_scale = 1.0;

  std::uint64_t total_iters() const { return phase1_iters + phase2_iters; }
  void validate() const;
};

struct LossRecord {
  std::uint64_t iteration = 0;  // 1-based, global across phases
  int phase = 1;
  double loss = 0.0;
  double classification = 0.0;
  double regression = 0.0;
};

/// Resumable progress: optimizer moments, iteration counter and loss trace.
struct TrainerState {
  std::uint64_t iteration = 0;
  std::uint64_t rpn_step = 0;
  std::vector<Adam<float>::Slot> rpn_slots;
  std::uint64_t head_step = 0;
  std::vector<Adam<float>::Slot> head_slots;
  std::vector<LossRecord> trace;
};

class Trainer {
 public:
  /// Samples must already be sized to the model input.
  Trainer(DetTransNet<float>& model, const DatasetManifest& data, TrainSchedule schedule,
          AdamConfig adam);

  bool finished() const { return iteration_ >= schedule_.total_iters(); }
  std::uint64_t iteration() const { return iteration_; }
  int current_phase() const { return iteration_ < schedule_.phase1_iters ? 1 : 2; }

  /// Runs one iteration. Throws NumericError naming the iteration and phase
  /// on a non-finite loss.
  LossRecord step();

  const std::vector<LossRecord>& trace() const { return trace_; }
  TrainerState state() const;
  void restore(const TrainerState& state);

 private:
  struct Prepared {
    Tensor<float> input;
    std::vector<BBox> boxes;
    std::vector<Annotation> annotations;
  };
  struct FrozenOutputs {
    FeatureMap<float> features;
    std::vector<Proposal> proposals;
  };

  std::size_t sample_index(int phase, std::uint64_t local_iter, std::size_t slot);
  bool flip_for(int phase, std::uint64_t local_iter, std::size_t slot) const;
  const FrozenOutputs& frozen(std::size_t index, bool flipped);

  LossRecord rpn_step(std::uint64_t local_iter);
  LossRecord head_step(std::uint64_t local_iter);

  DetTransNet<float>& model_;
  TrainSchedule schedule_;
  std::vector<Prepared> plain_;
  std::vector<Prepared> flipped_;
  Adam<float> rpn_opt_;
  Adam<float> head_opt_;
  std::uint64_t iteration_ = 0;
  std::vector<LossRecord> trace_;
  std::map<std::pair<std::size_t, bool>, FrozenOutputs> frozen_cache_;
  std::map<std::pair<int, std::uint64_t>, std::vector<std::size_t>> epoch_orders_;
};

/// Runs every remaining iteration; `on_step` sees each record as it is produced.
std::vector<LossRecord> train_two_phase(DetTransNet<float>& model, const DatasetManifest& data,
                                        const TrainSchedule& schedule, const AdamConfig& adam,
                                        const std::function<void(const LossRecord&)>& on_step = {});

}  // namespace dtn
