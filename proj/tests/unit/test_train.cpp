#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dtn/errors.hpp"
#include "dtn/gradcheck.hpp"
#include "dtn/losses.hpp"
#include "dtn/optimizer.hpp"
#include "dtn/trainer.hpp"

using namespace dtn;

namespace {

double bce(double logit, double target) {
  // -t log s(l) - (1 - t) log(1 - s(l))
  const double s = 1.0 / (1.0 + std::exp(-logit));
  return -target * std::log(s) - (1.0 - target) * std::log(1.0 - s);
}

double smooth_l1(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }

RpnOutput<double> rpn_output(std::vector<double> logits, std::vector<double> deltas) {
  const std::size_t a = logits.size();
  return {TensorD::from_vector({1, 1, a}, std::move(logits), true),
          TensorD::from_vector({1, 1, 4 * a}, std::move(deltas), true)};
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.patch = {32, 32, 3, 8, 4};
  m.encoder.embed_dim = 16;
  m.encoder.depth = 1;
  m.encoder.heads = 2;
  m.encoder.mlp_ratio = 2;
  m.residual_blocks = 1;
  m.rpn.hidden_dim = 16;
  m.rpn.anchors.scales = {8.0, 14.0};
  m.rpn.pre_nms_top = 60;
  m.rpn.post_nms_top = 20;
  m.head.pool_size = 3;
  m.head.hidden_dim = 16;
  return m;
}

DatasetManifest tiny_data() {
  SyntheticOptions opts;
  opts.min_extent = 8;
  opts.max_extent = 14;
  opts.max_shapes = 2;
  return generate_synthetic(6, 32, 3, opts);
}

TrainSchedule tiny_schedule(std::uint64_t p1, std::uint64_t p2) {
  TrainSchedule s;
  s.phase1_iters = p1;
  s.phase2_iters = p2;
  s.batch_size = 2;
  s.rois_per_image = 16;
  s.rpn_batch = 64;
  s.seed = 5;
  return s;
}

std::vector<std::vector<float>> snapshot(const DetTransNet<float>& model, ParamGroup group) {
  std::vector<std::vector<float>> out;
  for (const auto& p : model.parameters())
    if (p.group == group) out.push_back(p.tensor.to_vector());
  return out;
}

}  // namespace

TEST(RpnLoss, ConstructedOptimumIsNearZero) {
  const std::vector<BBox> anchors{{0, 0, 10, 10}, {40, 40, 50, 50}};
  const std::vector<BBox> gts{{1, 0, 11, 10}};
  const auto targets = build_rpn_targets(anchors, gts, {}, nullptr);
  ASSERT_EQ(targets.labels, (std::vector<int>{kPositive, kNegative}));
  const auto& t = targets.regression[0];
  auto out = rpn_output({20.0, -20.0}, {t.tx, t.ty, t.tw, t.th, 0, 0, 0, 0});
  const auto loss = rpn_loss(out, targets);
  EXPECT_LT(loss.total.item(), 1e-6);
  EXPECT_GE(loss.total.item(), 0.0);
}

TEST(RpnLoss, HandComputedTwoAnchorCase) {
  const std::vector<BBox> anchors{{0, 0, 10, 10}, {40, 40, 50, 50}};
  const std::vector<BBox> gts{{2, 0, 12, 10}};
  const auto targets = build_rpn_targets(anchors, gts, {}, nullptr);
  // IoU 8/12 is below 0.7, but anchor 0 is the best anchor for the box.
  ASSERT_EQ(targets.labels, (std::vector<int>{kPositive, kNegative}));
  const std::vector<double> deltas{0.1, -0.3, 1.5, 0.0, 9, 9, 9, 9};
  auto out = rpn_output({0.4, -1.2}, deltas);
  const auto loss = rpn_loss(out, targets);
  // target (0.2, 0, 0, 0): the off-target anchor's deltas do not count.
  const double cls = bce(0.4, 1.0) + bce(-1.2, 0.0);
  const double reg = smooth_l1(0.1 - 0.2) + smooth_l1(-0.3) + smooth_l1(1.5) + smooth_l1(0.0);
  EXPECT_NEAR(loss.total.item(), (cls + reg) / 2.0, 1e-12);
  EXPECT_NEAR(loss.classification, cls / 2.0, 1e-12);
  EXPECT_NEAR(loss.regression, reg / 2.0, 1e-12);
}

TEST(RpnLoss, NoGroundTruthGivesObjectnessOnly) {
  const std::vector<BBox> anchors{{0, 0, 10, 10}, {40, 40, 50, 50}};
  const auto targets = build_rpn_targets(anchors, {}, {}, nullptr);
  EXPECT_EQ(targets.num_positive(), 0u);
  EXPECT_EQ(targets.num_sampled(), 2u);
  auto out = rpn_output({0.3, 0.7}, {5, 5, 5, 5, 5, 5, 5, 5});
  const auto loss = rpn_loss(out, targets);
  EXPECT_EQ(loss.regression, 0.0);
  EXPECT_NEAR(loss.total.item(), (bce(0.3, 0) + bce(0.7, 0)) / 2.0, 1e-12);
}

TEST(RpnTargets, SamplingRespectsBatchAndFraction) {
  std::vector<BBox> anchors;
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j) anchors.push_back(BBox::from_center(i * 2.0 + 1, j * 2.0 + 1, 10, 10));
  const std::vector<BBox> gts{{10, 10, 20, 20}, {50, 50, 60, 60}};
  RpnTargetConfig cfg;
  cfg.batch_size = 32;
  Rng rng(1);
  const auto t = build_rpn_targets(anchors, gts, cfg, &rng);
  EXPECT_LE(t.num_sampled(), 32u);
  EXPECT_LE(t.num_positive(), 16u);
  EXPECT_GT(t.num_positive(), 0u);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (t.labels[a] == kPositive) {
      EXPECT_GE(std::max(iou(anchors[a], gts[0]), iou(anchors[a], gts[1])), 0.3);
    }
    if (t.labels[a] == kNegative) {
      EXPECT_LE(std::max(iou(anchors[a], gts[0]), iou(anchors[a], gts[1])), 0.3);
    }
  }
}

TEST(RoiLoss, BackgroundOptimumAndHandCase) {
  RoiSample bg;
  bg.boxes = {{0, 0, 4, 4}, {5, 5, 9, 9}};
  bg.labels = {2, 2};
  bg.targets = {{}, {}};
  HeadOutput<double> head{TensorD::from_vector({2, 3}, {-20, -20, 20, -20, -20, 20}, true),
                          TensorD::from_vector({2, 4 * 2}, std::vector<double>(16, 3.0), true)};
  auto l = roi_loss(head, bg, 2);
  EXPECT_LT(l.total.item(), 1e-6);
  EXPECT_EQ(l.regression, 0.0);

  // Two positives (classes 0 and 1) and one background ROI.
  RoiSample rois;
  rois.boxes = {{0, 0, 4, 4}, {5, 5, 9, 9}, {1, 1, 2, 2}};
  rois.labels = {0, 1, 2};
  rois.targets = {{0.1, 0.2, 0.0, -0.1}, {0.0, 0.0, 2.0, 0.5}, {}};
  const std::vector<double> logits{1.0, 0.5, -0.5, 0.2, 0.3, 0.1, -1.0, 0.0, 2.0};
  // Row r holds [class 0 | class 1] deltas at r * 8.
  std::vector<double> deltas(24, 0.0);
  deltas[0] = 0.1;   // ROI 0, class 0: tx on target
  deltas[1] = 0.5;   // ty off by 0.3
  deltas[4] = 7.0;   // ROI 0, class 1 slice is not its label: ignored
  deltas[14] = 0.5;  // ROI 1, class 1: tw off by 1.5
  deltas[20] = 9.0;  // background ROI: ignored
  HeadOutput<double> h2{TensorD::from_vector({3, 3}, logits, true), TensorD::from_vector({3, 8}, deltas, true)};
  auto ce = [&](std::size_t r, std::size_t label) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits[r * 3 + c]);
    return -(logits[r * 3 + label] - std::log(z));
  };
  const double cls = ce(0, 0) + ce(1, 1) + ce(2, 2);
  const double reg = smooth_l1(0.3) + smooth_l1(0.1) + smooth_l1(-1.5) + smooth_l1(0.5) + 0.0;
  auto l2 = roi_loss(h2, rois, 2);
  EXPECT_NEAR(l2.total.item(), (cls + reg) / 3.0, 1e-12);
  EXPECT_NEAR(l2.regression, reg / 3.0, 1e-12);
}

TEST(RoiSampling, RatioLabelsAndGroundTruthInclusion) {
  std::vector<BBox> proposals;
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
    proposals.push_back({x, y, x + rng.uniform(4, 16), y + rng.uniform(4, 16)});
  }
  const std::vector<Annotation> gts{{{10, 10, 20, 20}, 1}, {{60, 60, 75, 70}, 0}};
  RoiSampleConfig cfg;
  const auto s = sample_rois(proposals, gts, 3, cfg, &rng);
  EXPECT_LE(s.size(), cfg.rois_per_image);
  EXPECT_LE(s.num_positive(3), 16u);
  EXPECT_GE(s.num_positive(3), 2u);  // ground truth boxes are candidates
  for (std::size_t i = 0; i < s.size(); ++i) {
    double best = 0.0;
    std::size_t best_cls = 3;
    for (const auto& g : gts)
      if (iou(s.boxes[i], g.box) > best) {
        best = iou(s.boxes[i], g.box);
        best_cls = g.class_id;
      }
    if (s.labels[i] < 3) {
      EXPECT_GE(best, 0.5);
      EXPECT_EQ(s.labels[i], best_cls);
    } else {
      EXPECT_LT(best, 0.5);
    }
  }
}

TEST(LossGradients, EndToEndMatchFiniteDifferences) {
  for (const char* name : {"rpn_loss", "roi_loss"}) {
    const auto r = run_gradcheck(name, {.instances = 4});
    EXPECT_EQ(r.tolerance, kLossGradTolerance);
    EXPECT_TRUE(r.passed()) << name << " " << r.max_error;
  }
}

TEST(Adam, ZeroGradientsWithoutDecayLeaveParametersUnchanged) {
  auto p = TensorD::from_vector({3}, {0.5, -1.0, 2.0}, true);
  p.zero_grad();
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  Adam<double> opt(cfg, {{"p", p, ParamGroup::Head}});
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(p.to_vector(), (std::vector<double>{0.5, -1.0, 2.0}));
  EXPECT_EQ(opt.step_count(), 5u);
}

TEST(Adam, SingleScalarStepMatchesRecurrences) {
  auto p = TensorD::from_vector({1}, {0.5}, true);
  p.zero_grad();
  p.grad()[0] = 0.2;
  AdamConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01, .warmup_iters = 0};
  Adam<double> opt(cfg, {{"p", p, ParamGroup::Head}});
  opt.step();
  const double g = 0.2 + 0.01 * 0.5;
  const double m = 0.1 * g, v = 0.001 * g * g;
  const double expected = 0.5 - 0.1 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
  EXPECT_NEAR(p.data()[0], expected, 1e-10);
  // Second step with the same gradient.
  opt.step();
  const double g2 = 0.2 + 0.01 * expected;
  const double m2 = 0.9 * m + 0.1 * g2, v2 = 0.999 * v + 0.001 * g2 * g2;
  const double expected2 = expected - 0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p.data()[0], expected2, 1e-10);
}

TEST(Adam, WarmupRampsLinearly) {
  AdamConfig cfg;
  cfg.warmup_iters = 100;
  Adam<double> opt(cfg, {});
  EXPECT_DOUBLE_EQ(opt.learning_rate_at(1), 1e-5);
  EXPECT_DOUBLE_EQ(opt.learning_rate_at(50), 5e-4);
  EXPECT_DOUBLE_EQ(opt.learning_rate_at(100), 1e-3);
  EXPECT_DOUBLE_EQ(opt.learning_rate_at(5000), 1e-3);
}

TEST(Adam, WeightDecayAloneShrinksMagnitude) {
  auto p = TensorD::from_vector({2}, {0.8, -0.3}, true);
  AdamConfig cfg;
  cfg.warmup_iters = 0;
  Adam<double> opt(cfg, {{"p", p, ParamGroup::Head}});
  std::vector<double> prev = p.to_vector();
  for (int i = 0; i < 3; ++i) {
    opt.step();
    for (std::size_t j = 0; j < 2; ++j) EXPECT_LT(std::abs(p.data()[j]), std::abs(prev[j]));
    prev = p.to_vector();
  }
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  auto a = TensorD::from_vector({1}, {1.0}, true);
  auto b = TensorD::from_vector({2}, {1.0, 2.0}, true);
  a.zero_grad();
  b.zero_grad();
  b.grad()[1] = std::numeric_limits<double>::quiet_NaN();
  Adam<double> opt({}, {{"head.fc1_w", a, ParamGroup::Head}, {"head.cls_b", b, ParamGroup::Head}});
  try {
    opt.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.cls_b"), std::string::npos);
  }
  EXPECT_EQ(a.data()[0], 1.0);  // nothing applied
}

TEST(Trainer, PhaseOneOnlyLeavesHeadAtInitialization) {
  const auto data = tiny_data();
  auto model = DetTransNet<float>::create(tiny_model(), 9);
  const auto head_before = snapshot(model, ParamGroup::Head);
  const auto rpn_before = snapshot(model, ParamGroup::Rpn);
  Trainer trainer(model, data, tiny_schedule(4, 0), {});
  while (!trainer.finished()) trainer.step();
  EXPECT_EQ(snapshot(model, ParamGroup::Head), head_before);
  EXPECT_NE(snapshot(model, ParamGroup::Rpn), rpn_before);
  EXPECT_EQ(trainer.trace().size(), 4u);
}

TEST(Trainer, PhaseTwoFreezesBackboneAndRpn) {
  const auto data = tiny_data();
  auto model = DetTransNet<float>::create(tiny_model(), 9);
  Trainer trainer(model, data, tiny_schedule(3, 4), {});
  for (int i = 0; i < 3; ++i) EXPECT_EQ(trainer.step().phase, 1);
  const auto backbone = snapshot(model, ParamGroup::Backbone);
  const auto rpn = snapshot(model, ParamGroup::Rpn);
  const auto head = snapshot(model, ParamGroup::Head);
  while (!trainer.finished()) EXPECT_EQ(trainer.step().phase, 2);
  EXPECT_EQ(snapshot(model, ParamGroup::Backbone), backbone);
  EXPECT_EQ(snapshot(model, ParamGroup::Rpn), rpn);
  EXPECT_NE(snapshot(model, ParamGroup::Head), head);
}

TEST(Trainer, PhaseTwoLearningRateScalesTheHeadStep) {
  // First Adam step without warmup or decay moves each entry by lr * g / (|g| + eps).
  const auto data = tiny_data();
  AdamConfig adam;
  adam.warmup_iters = 0;
  adam.weight_decay = 0.0;
  auto head_step = [&](double scale) {
    auto model = DetTransNet<float>::create(tiny_model(), 9);
    auto schedule = tiny_schedule(0, 1);
    schedule.phase2_lr_scale = scale;
    const auto before = snapshot(model, ParamGroup::Head);
    Trainer trainer(model, data, schedule, adam);
    trainer.step();
    auto after = snapshot(model, ParamGroup::Head);
    for (std::size_t i = 0; i < after.size(); ++i)
      for (std::size_t j = 0; j < after[i].size(); ++j) after[i][j] -= before[i][j];
    return after;
  };
  const auto full = head_step(1.0), quarter = head_step(0.25);
  double largest = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i)
    for (std::size_t j = 0; j < full[i].size(); ++j) {
      largest = std::max(largest, std::abs(static_cast<double>(full[i][j])));
      EXPECT_NEAR(quarter[i][j], 0.25 * full[i][j], 1e-6);
    }
  EXPECT_NEAR(largest, adam.lr, 1e-5);

  auto bad = tiny_schedule(1, 1);
  bad.phase2_lr_scale = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Trainer, FixedSeedRunsAreBitIdentical) {
  const auto data = tiny_data();
  auto run = [&] {
    auto model = DetTransNet<float>::create(tiny_model(), 9);
    auto trace = train_two_phase(model, data, tiny_schedule(3, 3), {});
    return std::pair{trace, snapshot(model, ParamGroup::Head)};
  };
  const auto [t1, h1] = run();
  const auto [t2, h2] = run();
  ASSERT_EQ(t1.size(), 6u);
  for (std::size_t i = 0; i < t1.size(); ++i) {
    EXPECT_EQ(t1[i].iteration, i + 1);
    EXPECT_EQ(t1[i].loss, t2[i].loss);
    EXPECT_EQ(t1[i].classification, t2[i].classification);
    EXPECT_EQ(t1[i].regression, t2[i].regression);
    EXPECT_GE(t1[i].loss, 0.0);
  }
  EXPECT_EQ(h1, h2);
}

TEST(Trainer, NonFiniteLossReportsIterationAndPhase) {
  const auto data = tiny_data();
  for (int phase : {1, 2}) {
    auto model = DetTransNet<float>::create(tiny_model(), 9);
    auto& target = phase == 1 ? model.rpn.obj_b : model.head.cls_b;
    target.data()[0] = std::numeric_limits<float>::quiet_NaN();
    Trainer trainer(model, data, tiny_schedule(1, 1), {});
    try {
      while (!trainer.finished()) trainer.step();
      FAIL() << "expected NumericError in phase " << phase;
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("iteration " + std::to_string(phase)), std::string::npos) << msg;
      EXPECT_NE(msg.find("phase " + std::to_string(phase)), std::string::npos) << msg;
    }
  }
}
