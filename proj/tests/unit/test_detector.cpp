#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtn/detector.hpp"
#include "dtn/errors.hpp"
#include "dtn/gradcheck.hpp"
#include "dtn/model.hpp"
#include "dtn/ops.hpp"

using namespace dtn;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_vector(std::move(shape), std::move(v));
}

template <typename T>
RpnWeights<T> zero_rpn(std::size_t d, const RPNConfig& cfg) {
  const std::size_t s = cfg.kernel_size, h = cfg.hidden_dim, a = cfg.anchors.count();
  return {Tensor<T>::zeros({s, s, d, h}), Tensor<T>::zeros({h}), Tensor<T>::zeros({h, a}),
          Tensor<T>::zeros({a}),          Tensor<T>::zeros({h, 4 * a}), Tensor<T>::zeros({4 * a})};
}

}  // namespace

TEST(Rpn, OutputShapes) {
  Rng rng(1);
  RPNConfig cfg;
  auto w = init_rpn<float>(64, cfg, rng);
  auto out = rpn_forward<float>({random_tensor<float>(rng, {7, 7, 64})}, w);
  EXPECT_EQ(out.objectness.shape(), (Shape{7, 7, 3}));
  EXPECT_EQ(out.deltas.shape(), (Shape{7, 7, 12}));
}

TEST(Rpn, ZeroWeightsGiveNeutralOutputsAndAnchorProposals) {
  Rng rng(2);
  RPNConfig cfg;
  cfg.nms_iou = 0.99;
  cfg.pre_nms_top = 10000;
  cfg.post_nms_top = 10000;
  auto out = rpn_forward<double>({random_tensor<double>(rng, {7, 7, 8})}, zero_rpn<double>(8, cfg));
  for (double x : out.objectness.data()) EXPECT_EQ(x, 0.0);
  for (double x : out.deltas.data()) EXPECT_EQ(x, 0.0);
  const auto anchors = generate_anchors(7, 56, 56, cfg.anchors);
  const auto props = propose(out, anchors, cfg, 56, 56);
  ASSERT_EQ(props.size(), anchors.size());
  for (std::size_t i = 0; i < props.size(); ++i) {
    EXPECT_EQ(props[i].objectness, 0.5);
    EXPECT_EQ(props[i].box, clip_box(anchors[i], 56, 56));
  }
}

TEST(Rpn, TopOneKeepsTheBestAnchor) {
  Rng rng(3);
  RPNConfig cfg;
  cfg.pre_nms_top = 1;
  cfg.post_nms_top = 1;
  auto w = zero_rpn<double>(4, cfg);
  auto out = rpn_forward<double>({random_tensor<double>(rng, {5, 5, 4})}, w);
  auto logits = out.objectness.data();
  for (auto& x : logits) x = rng.uniform(-3, 3);
  const std::size_t best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const auto anchors = generate_anchors(5, 40, 40, cfg.anchors);
  const auto props = propose(out, anchors, cfg, 40, 40);
  ASSERT_EQ(props.size(), 1u);
  EXPECT_EQ(props[0].box, clip_box(anchors[best], 40, 40));
  EXPECT_DOUBLE_EQ(props[0].objectness, 1.0 / (1.0 + std::exp(-logits[best])));
}

TEST(Rpn, ProposalsMatchStraightLineOracle) {
  Rng rng(4);
  RPNConfig cfg;
  cfg.pre_nms_top = 60;
  cfg.post_nms_top = 25;
  cfg.nms_iou = 0.6;
  const std::size_t g = 6, d = 5;
  const double size = 48;
  auto w = init_rpn<double>(d, cfg, rng);
  // Larger head weights so deltas move boxes visibly.
  for (auto& x : w.delta_w.data()) x *= 30.0;
  for (auto& x : w.obj_w.data()) x *= 100.0;
  auto out = rpn_forward<double>({random_tensor<double>(rng, {g, g, d})}, w);
  const auto anchors = generate_anchors(g, size, size, cfg.anchors);
  const auto got = propose(out, anchors, cfg, size, size);
  EXPECT_EQ(propose(out, anchors, cfg, size, size).size(), got.size());

  struct Cand {
    BBox box;
    double score;
    std::size_t order;
  };
  std::vector<Cand> cands;
  const auto logit = out.objectness.data();
  const auto delta = out.deltas.data();
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const BBox& a = anchors[i];
    const double aw = a.x_max - a.x_min, ah = a.y_max - a.y_min;
    const double cx = (a.x_min + a.x_max) / 2 + delta[4 * i] * aw;
    const double cy = (a.y_min + a.y_max) / 2 + delta[4 * i + 1] * ah;
    const double bw = aw * std::exp(std::min(delta[4 * i + 2], std::log(1000.0 / 16.0)));
    const double bh = ah * std::exp(std::min(delta[4 * i + 3], std::log(1000.0 / 16.0)));
    BBox b{std::clamp(cx - bw / 2, 0.0, size), std::clamp(cy - bh / 2, 0.0, size), std::clamp(cx + bw / 2, 0.0, size),
           std::clamp(cy + bh / 2, 0.0, size)};
    if (!(b.x_max > b.x_min && b.y_max > b.y_min)) continue;
    cands.push_back({b, 1.0 / (1.0 + std::exp(-logit[i])), cands.size()});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
  cands.resize(std::min<std::size_t>(cands.size(), 60));
  std::vector<Cand> kept;
  for (const auto& c : cands) {
    bool suppressed = false;
    for (const auto& k : kept) suppressed = suppressed || iou(c.box, k.box) > 0.6;
    if (!suppressed) kept.push_back(c);
  }
  kept.resize(std::min<std::size_t>(kept.size(), 25));
  ASSERT_EQ(got.size(), kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    EXPECT_NEAR(got[i].box.x_min, kept[i].box.x_min, 1e-9);
    EXPECT_NEAR(got[i].box.y_max, kept[i].box.y_max, 1e-9);
    EXPECT_DOUBLE_EQ(got[i].objectness, kept[i].score);
  }
}

TEST(Rpn, GradientsMatchFiniteDifferences) {
  const auto report = run_gradcheck("rpn_forward", {.instances = 5});
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(RoiAlign, SingleCellBoxSamplesThatCell) {
  Rng rng(5);
  const std::size_t g = 7;
  auto map = random_tensor<double>(rng, {g, g, 4});
  // Image 56 px, 8 px per cell; cell (2, 5) spans x [40, 48], y [16, 24].
  auto pooled = roi_pool<double>({map}, BBox{40, 16, 48, 24}, 1, 56, 56);
  ASSERT_EQ(pooled.shape(), (Shape{1, 1, 4}));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(pooled.data()[c], map.data()[(2 * g + 5) * 4 + c], 1e-12);
}

TEST(RoiAlign, ConstantMapGivesConstantOutput) {
  Rng rng(6);
  auto map = TensorD::full({7, 7, 3}, 2.5);
  for (int t = 0; t < 50; ++t) {
    const double x = rng.uniform(-10, 50), y = rng.uniform(-10, 50);
    const BBox box{x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30)};
    if (box.x_max <= 0 || box.y_max <= 0 || box.x_min >= 56 || box.y_min >= 56) {
      EXPECT_THROW(roi_pool<double>({map}, box, 3, 56, 56), GeometryError);
      continue;
    }
    const auto pooled = roi_pool<double>({map}, box, 3, 56, 56);
    for (double v : pooled.data()) EXPECT_NEAR(v, 2.5, 1e-12);
  }
  EXPECT_THROW(roi_pool<double>({map}, BBox{60, 60, 70, 70}, 2, 56, 56), GeometryError);
}

TEST(RoiAlign, GradientMatchesFiniteDifferences) {
  const auto report = run_gradcheck("roi_align", {.instances = 5});
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(Head, ZeroWeightsGiveUniformPosterior) {
  Rng rng(7);
  HeadConfig cfg;
  const std::size_t in = 7 * 7 * 64;
  HeadWeights<double> w{TensorD::zeros({in, 128}), TensorD::zeros({128}), TensorD::zeros({128, 128}),
                        TensorD::zeros({128}),     TensorD::zeros({128, 4}), TensorD::zeros({4}),
                        TensorD::zeros({128, 12}), TensorD::zeros({12})};
  auto out = detection_head(random_tensor<double>(rng, {3, in}), w);
  EXPECT_EQ(out.class_logits.shape(), (Shape{3, 4}));
  EXPECT_EQ(out.box_deltas.shape(), (Shape{3, 12}));
  auto probs = softmax(out.class_logits, 1);
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Head, InitializedShapesAndGradient) {
  Rng rng(8);
  HeadConfig cfg;
  auto w = init_head<float>(64, cfg, rng);
  auto out = detection_head(random_tensor<float>(rng, {5, 7 * 7 * 64}), w);
  EXPECT_EQ(out.class_logits.shape(), (Shape{5, 4}));
  EXPECT_EQ(out.box_deltas.shape(), (Shape{5, 12}));
  const auto report = run_gradcheck("detection_head", {.instances = 5});
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(Postprocess, ThresholdNmsAndOrdering) {
  HeadConfig cfg;
  cfg.num_classes = 2;
  cfg.score_threshold = 0.3;
  cfg.nms_iou = 0.5;
  const std::vector<Proposal> props{{{0, 0, 10, 10}, 0.9}, {{1, 1, 11, 11}, 0.8}, {{20, 20, 30, 30}, 0.7}};
  // Class 0 wins the first two overlapping ROIs, class 1 the third.
  auto logits = TensorD::from_vector({3, 3}, {3, 0, 0, 2, 0, 0, 0, 2, 0});
  HeadOutput<double> head{logits, TensorD::zeros({3, 8})};
  const auto dets = postprocess_detections<double>(props, head, cfg, 40, 40);
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[0].class_id, 0u);
  EXPECT_EQ(dets[0].box, props[0].box);
  EXPECT_EQ(dets[1].class_id, 1u);
  EXPECT_EQ(dets[1].box, props[2].box);
  EXPECT_GT(dets[0].score, dets[1].score);
  for (const auto& d : dets) {
    EXPECT_GT(d.score, cfg.score_threshold);
    EXPECT_LT(d.class_id, cfg.num_classes);
  }
}

TEST(Model, InferenceIsDeterministicAndShaped) {
  ModelConfig cfg;
  cfg.encoder.depth = 1;
  auto model = DetTransNet<float>::create(cfg, 11);
  EXPECT_EQ(model.anchors.size(), 11u * 11u * 3u);
  Rng rng(9);
  auto img = random_tensor<float>(rng, {96, 96, 3});
  auto a = run_inference(model, img);
  auto b = run_inference(model, img);
  EXPECT_EQ(a.features.values.shape(), (Shape{11, 11, 64}));
  EXPECT_EQ(a.rpn.objectness.shape(), (Shape{11, 11, 3}));
  EXPECT_EQ(a.rpn.deltas.shape(), (Shape{11, 11, 12}));
  EXPECT_LE(a.proposals.size(), cfg.rpn.post_nms_top);
  ASSERT_EQ(a.proposals.size(), b.proposals.size());
  for (std::size_t i = 0; i < a.proposals.size(); ++i) EXPECT_EQ(a.proposals[i].box, b.proposals[i].box);
  ASSERT_EQ(a.detections.size(), b.detections.size());
  for (const auto& d : a.detections) {
    EXPECT_TRUE(d.box.valid());
    EXPECT_GE(d.box.x_min, 0.0);
    EXPECT_LE(d.box.x_max, 96.0);
  }
}
