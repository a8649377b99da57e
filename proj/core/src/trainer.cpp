#include "dtn/trainer.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "dtn/errors.hpp"
#include "dtn/ops.hpp"

namespace dtn {

void TrainSchedule::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (rois_per_image == 0) throw ConfigError("train: rois_per_image must be positive");
  if (rpn_batch == 0) throw ConfigError("train: rpn_batch must be positive");
  if (!(phase2_lr_scale > 0.0) || !std::isfinite(phase2_lr_scale))
    throw ConfigError("train.phase2_lr_scale must be positive");
}

namespace {

AdamConfig scaled_lr(AdamConfig adam, double scale) {
  adam.lr *= scale;
  return adam;
}

std::vector<NamedParameter<float>> select(const DetTransNet<float>& model,
                                          std::initializer_list<ParamGroup> groups) {
  std::vector<NamedParameter<float>> out;
  for (auto& p : model.parameters()) {
    for (auto g : groups)
      if (p.group == g) out.push_back(p);
  }
  return out;
}

// Slot tags for keyed random streams.
enum : std::uint64_t { kOrderStream = 11, kFlipStream = 12, kSampleStream = 13, kDropoutStream = 14 };

}  // namespace

Trainer::Trainer(DetTransNet<float>& model, const DatasetManifest& data, TrainSchedule schedule,
                 AdamConfig adam)
    : model_(model),
      schedule_(schedule),
      rpn_opt_(adam, select(model, {ParamGroup::Backbone, ParamGroup::Rpn})),
      head_opt_(scaled_lr(adam, schedule.phase2_lr_scale), select(model, {ParamGroup::Head})) {
  schedule_.validate();
  if (data.samples.empty()) throw ConfigError("train: dataset is empty");
  if (data.num_classes() != model.config.head.num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes()) +
                      " classes but the model predicts " + std::to_string(model.config.head.num_classes));
  }
  const auto& pc = model.config.patch;
  for (const auto& s : data.samples) {
    if (s.image.height != pc.height || s.image.width != pc.width || s.image.channels != pc.channels) {
      throw ConfigError("train: sample " + s.source_id + " is " + std::to_string(s.image.width) + "x" +
                        std::to_string(s.image.height) + ", model expects " + std::to_string(pc.width) +
                        "x" + std::to_string(pc.height));
    }
    auto prepare = [](const ImageSample& v) {
      Prepared p{to_input_tensor<float>(v.image), {}, v.annotations};
      for (const auto& a : v.annotations) p.boxes.push_back(a.box);
      return p;
    };
    plain_.push_back(prepare(s));
    flipped_.push_back(prepare(flip_horizontal(s)));
  }
}

std::size_t Trainer::sample_index(int phase, std::uint64_t local_iter, std::size_t slot) {
  const std::size_t n = plain_.size();
  const std::uint64_t pos = local_iter * schedule_.batch_size + slot;
  const std::uint64_t epoch = pos / n;
  auto key = std::make_pair(phase, epoch);
  auto it = epoch_orders_.find(key);
  if (it == epoch_orders_.end()) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng({schedule_.seed, kOrderStream, static_cast<std::uint64_t>(phase), epoch});
    rng.shuffle(order.begin(), order.end());
    if (epoch_orders_.size() > 8) epoch_orders_.clear();
    it = epoch_orders_.emplace(key, std::move(order)).first;
  }
  return it->second[pos % n];
}

bool Trainer::flip_for(int phase, std::uint64_t local_iter, std::size_t slot) const {
  if (!schedule_.flip) return false;
  Rng rng({schedule_.seed, kFlipStream, static_cast<std::uint64_t>(phase), local_iter, slot});
  return rng.bernoulli(0.5);
}

const Trainer::FrozenOutputs& Trainer::frozen(std::size_t index, bool flipped) {
  // Backbone and RPN are fixed in phase 2, so their outputs per (image, flip)
  // never change and can be computed once.
  const auto key = std::make_pair(index, flipped);
  auto it = frozen_cache_.find(key);
  if (it != frozen_cache_.end()) return it->second;
  NoGradGuard no_grad;
  const auto& prep = flipped ? flipped_[index] : plain_[index];
  const auto& cfg = model_.config;
  FrozenOutputs out;
  out.features = backbone_forward(prep.input, cfg.patch, cfg.encoder, model_.backbone);
  auto rpn = rpn_forward(out.features, model_.rpn);
  out.proposals = propose(rpn, model_.anchors, cfg.rpn, model_.image_height(), model_.image_width());
  return frozen_cache_.emplace(key, std::move(out)).first->second;
}

LossRecord Trainer::rpn_step(std::uint64_t local_iter) {
  rpn_opt_.zero_grad();
  const auto& cfg = model_.config;
  RpnTargetConfig tcfg;
  tcfg.batch_size = schedule_.rpn_batch;
  const float inv_batch = 1.0f / static_cast<float>(schedule_.batch_size);
  Tensor<float> total;
  LossRecord rec;
  for (std::size_t b = 0; b < schedule_.batch_size; ++b) {
    const auto idx = sample_index(1, local_iter, b);
    const auto& prep = flip_for(1, local_iter, b) ? flipped_[idx] : plain_[idx];
    Rng dropout({schedule_.seed, kDropoutStream, 1, local_iter, b});
    auto fm = backbone_forward(prep.input, cfg.patch, cfg.encoder, model_.backbone,
                               cfg.encoder.dropout > 0.0 ? &dropout : nullptr);
    auto rpn = rpn_forward(fm, model_.rpn);
    Rng sampler({schedule_.seed, kSampleStream, 1, local_iter, b});
    auto terms = rpn_loss(rpn, model_.anchors, prep.boxes, tcfg, &sampler);
    auto scaled = scale(terms.total, inv_batch);
    total = total.defined() ? add(total, scaled) : scaled;
    rec.classification += terms.classification / static_cast<double>(schedule_.batch_size);
    rec.regression += terms.regression / static_cast<double>(schedule_.batch_size);
  }
  rec.loss = static_cast<double>(total.item());
  rec.phase = 1;
  if (!std::isfinite(rec.loss)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration_ + 1) + " (phase 1)");
  }
  total.backward();
  rpn_opt_.step();
  return rec;
}

LossRecord Trainer::head_step(std::uint64_t local_iter) {
  head_opt_.zero_grad();
  const auto& cfg = model_.config;
  const std::size_t k = cfg.head.num_classes;
  RoiSampleConfig rcfg;
  rcfg.rois_per_image = schedule_.rois_per_image;
  const float inv_batch = 1.0f / static_cast<float>(schedule_.batch_size);
  Tensor<float> total;
  LossRecord rec;
  for (std::size_t b = 0; b < schedule_.batch_size; ++b) {
    const auto idx = sample_index(2, local_iter, b);
    const bool flipped = flip_for(2, local_iter, b);
    const auto& prep = flipped ? flipped_[idx] : plain_[idx];
    const auto& fz = frozen(idx, flipped);
    std::vector<BBox> proposal_boxes;
    for (const auto& p : fz.proposals) proposal_boxes.push_back(p.box);
    Rng sampler({schedule_.seed, kSampleStream, 2, local_iter, b});
    auto rois = sample_rois(proposal_boxes, prep.annotations, k, rcfg, &sampler);
    auto pooled = roi_align(fz.features, rois.boxes, cfg.head.pool_size, model_.image_height(),
                            model_.image_width());
    auto head = detection_head(pooled, model_.head);
    auto terms = roi_loss(head, rois, k);
    auto scaled = scale(terms.total, inv_batch);
    total = total.defined() ? add(total, scaled) : scaled;
    rec.classification += terms.classification / static_cast<double>(schedule_.batch_size);
    rec.regression += terms.regression / static_cast<double>(schedule_.batch_size);
  }
  rec.loss = static_cast<double>(total.item());
  rec.phase = 2;
  if (!std::isfinite(rec.loss)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration_ + 1) + " (phase 2)");
  }
  total.backward();
  head_opt_.step();
  return rec;
}

LossRecord Trainer::step() {
  if (finished()) throw std::logic_error("train: schedule already complete");
  LossRecord rec = iteration_ < schedule_.phase1_iters
                       ? rpn_step(iteration_)
                       : head_step(iteration_ - schedule_.phase1_iters);
  rec.iteration = ++iteration_;
  trace_.push_back(rec);
  return rec;
}

TrainerState Trainer::state() const {
  return {iteration_, rpn_opt_.step_count(), rpn_opt_.slots(), head_opt_.step_count(),
          head_opt_.slots(), trace_};
}

void Trainer::restore(const TrainerState& state) {
  if (state.iteration > schedule_.total_iters()) {
    throw CheckpointError("checkpoint iteration " + std::to_string(state.iteration) +
                          " is past the end of the schedule");
  }
  rpn_opt_.restore(state.rpn_step, state.rpn_slots);
  head_opt_.restore(state.head_step, state.head_slots);
  iteration_ = state.iteration;
  trace_ = state.trace;
  frozen_cache_.clear();
}

std::vector<LossRecord> train_two_phase(DetTransNet<float>& model, const DatasetManifest& data,
                                        const TrainSchedule& schedule, const AdamConfig& adam,
                                        const std::function<void(const LossRecord&)>& on_step) {
  Trainer trainer(model, data, schedule, adam);
  while (!trainer.finished()) {
    const auto rec = trainer.step();
    if (on_step) on_step(rec);
  }
  return trainer.trace();
}

}  // namespace dtn
