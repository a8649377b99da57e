#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "dtn/backbone.hpp"
#include "dtn/errors.hpp"
#include "dtn/gradcheck.hpp"
#include "dtn/ops.hpp"
#include "dtn/random.hpp"

using namespace dtn;

namespace {

TensorD random_tensor(Rng& rng, Shape shape, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return TensorD::from_vector(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST(Tensor, ShapeAndDataInvariants) {
  auto t = TensorD::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.data().size(), shape_numel(t.shape()));
  EXPECT_FALSE(t.has_grad());
  t.zero_grad();
  EXPECT_EQ(t.grad().size(), t.data().size());
  EXPECT_THROW(TensorD::from_vector({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Matmul, IdentityAndZero) {
  Rng rng(1);
  auto m = random_tensor(rng, {3, 3});
  auto eye = TensorD::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(eye, m).to_vector(), m.to_vector());
  auto z = matmul(TensorD::zeros({2, 3}), TensorD::full({3, 2}, 1.0));
  EXPECT_EQ(z.shape(), (Shape{2, 2}));
  for (double x : z.data()) EXPECT_EQ(x, 0.0);
}

TEST(Matmul, InnerExtentMismatchNamesDimensions) {
  try {
    matmul(TensorD::zeros({2, 3}), TensorD::zeros({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("4"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {4, 2}, true);
  const double err = max_gradient_error([](const auto& in) { return matmul(in[0], in[1]); }, {a, b}, rng);
  EXPECT_LT(err, 1e-4);
}

TEST(Softmax, UniformAndStable) {
  auto s = softmax(TensorD::zeros({4}), 0);
  for (double x : s.data()) EXPECT_DOUBLE_EQ(x, 0.25);
  auto big = softmax(TensorD::from_vector({2}, {1000.0, 1000.0}), 0);
  EXPECT_DOUBLE_EQ(big.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(big.data()[1], 0.5);
}

TEST(Softmax, RowsSumToOneProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.uniform_index(5), c = 1 + rng.uniform_index(8);
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.uniform(-50.0, 50.0);
    const auto axis = rng.uniform_index(2);
    auto s = softmax(TensorD::from_vector({r, c}, v), axis);
    const auto d = s.data();
    const std::size_t outer = axis == 0 ? c : r, inner = axis == 0 ? r : c;
    for (std::size_t o = 0; o < outer; ++o) {
      double total = 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        const double x = axis == 0 ? d[i * c + o] : d[o * c + i];
        EXPECT_GE(x, 0.0);
        total += x;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto x = random_tensor(rng, {8}, true);
  EXPECT_LT(max_gradient_error([](const auto& in) { return softmax(in[0], 0); }, {x}, rng), 1e-4);
}

TEST(LayerNorm, ConstantRowAndDegenerateGain) {
  auto out = layernorm(TensorD::full({1, 4}, 5.0), TensorD::full({4}, 1.0), TensorD::zeros({4}), 1e-6);
  for (double x : out.data()) EXPECT_DOUBLE_EQ(x, 0.0);
  Rng rng(5);
  auto row = random_tensor(rng, {2, 6});
  auto b = random_tensor(rng, {6});
  auto degenerate = layernorm(row, TensorD::zeros({6}), b, 1e-6);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(degenerate.data()[r * 6 + i], b.data()[i]);
}

TEST(LayerNorm, PreAffineMomentsProperty) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 2 + rng.uniform_index(10);
    auto x = random_tensor(rng, {3, c});
    auto y = layernorm(x, TensorD::full({c}, 1.0), TensorD::zeros({c}), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < c; ++i) mean += y.data()[r * c + i];
      mean /= static_cast<double>(c);
      for (std::size_t i = 0; i < c; ++i) var += std::pow(y.data()[r * c + i] - mean, 2);
      var /= static_cast<double>(c);
      EXPECT_NEAR(mean, 0.0, 1e-5);
      EXPECT_NEAR(var, 1.0, 1e-5);
    }
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto x = random_tensor(rng, {1, 6}, true);
  auto g = random_tensor(rng, {6}, true);
  auto b = random_tensor(rng, {6}, true);
  const double err =
      max_gradient_error([](const auto& in) { return layernorm(in[0], in[1], in[2], 1e-6); }, {x, g, b}, rng);
  EXPECT_LT(err, 1e-4);
}

TEST(Elementwise, Examples) {
  EXPECT_EQ(relu(TensorD::from_vector({3}, {-1, 0, 2})).to_vector(), (std::vector<double>{0, 0, 2}));
  Rng rng(8);
  auto x = random_tensor(rng, {2, 3, 4});
  EXPECT_EQ(reshape(reshape(x, {6, 4}), {2, 3, 4}).to_vector(), x.to_vector());
  EXPECT_THROW(add(TensorD::zeros({2, 3}), TensorD::zeros({3, 2})), ShapeError);
  EXPECT_THROW(mul(TensorD::zeros({2}), TensorD::zeros({1})), ShapeError);
}

TEST(Conv2d, IdentityKernelLeavesInputUnchanged) {
  Rng rng(9);
  const std::size_t c = 3;
  auto x = random_tensor(rng, {5, 4, c});
  auto w = TensorD::zeros({3, 3, c, c});
  for (std::size_t i = 0; i < c; ++i) w.data()[((1 * 3 + 1) * c + i) * c + i] = 1.0;
  EXPECT_EQ(conv2d(x, w, TensorD()).to_vector(), x.to_vector());
}

TEST(Conv2d, MatchesDirectConvolutionOracle) {
  Rng rng(10);
  const std::size_t h = 4, wd = 5, ci = 2, co = 3, k = 3;
  auto x = random_tensor(rng, {h, wd, ci});
  auto w = random_tensor(rng, {k, k, ci, co});
  auto b = random_tensor(rng, {co});
  auto y = conv2d(x, w, b);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < wd; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        double acc = b.data()[o];
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const auto yy = static_cast<long>(i + dy) - 1, xx = static_cast<long>(j + dx) - 1;
            if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(wd)) continue;
            for (std::size_t c = 0; c < ci; ++c)
              acc += x.data()[(yy * wd + xx) * ci + c] * w.data()[((dy * k + dx) * ci + c) * co + o];
          }
        EXPECT_NEAR(y.data()[(i * wd + j) * co + o], acc, 1e-12);
      }
}

TEST(Autodiff, ComposedGraphMatchesHandChainedGradient) {
  Rng rng(11);
  auto x = random_tensor(rng, {3, 4}, true);
  auto w = random_tensor(rng, {4, 2}, true);
  auto loss = sum(matmul(relu(x), w));
  loss.backward();
  // dL/dw[k][c] = sum_r relu(x)[r][k]; dL/dx[r][k] = [x > 0] * sum_c w[k][c].
  for (std::size_t k = 0; k < 4; ++k) {
    double col = 0.0;
    for (std::size_t r = 0; r < 3; ++r) col += std::max(0.0, x.data()[r * 4 + k]);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(w.grad()[k * 2 + c], col, 1e-12);
  }
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 4; ++k) {
      const double expect = x.data()[r * 4 + k] > 0 ? w.data()[k * 2] + w.data()[k * 2 + 1] : 0.0;
      EXPECT_NEAR(x.grad()[r * 4 + k], expect, 1e-12);
    }
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto x = TensorD::from_vector({1}, {3.0}, true);
  auto y = mul(x, x);
  auto z = add(y, y);
  z.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);  // d(2x^2)/dx
}

TEST(Autodiff, GradientsAccumulateUntilZeroed) {
  auto x = TensorD::from_vector({2}, {1.0, 2.0}, true);
  sum(scale(x, 3.0)).backward();
  sum(scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Autodiff, ZeroUpstreamGivesZeroGradientForLinearOps) {
  Rng rng(12);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {4, 5}, true);
  auto bias = random_tensor(rng, {5}, true);
  auto out = add_rowwise(transpose(transpose(matmul(a, b))), bias);
  auto sliced = concat<double>({slice(out, 1, 0, 2), slice(out, 1, 2, 5)}, 1);
  auto shaped = reshape(scale(sliced, 2.5), {15});
  std::vector<double> zeros(15, 0.0);
  shaped.backward(zeros);
  for (auto* t : {&a, &b, &bias})
    for (double g : t->grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, BackwardPopulatesEveryRequiresGradLeaf) {
  Rng rng(13);
  auto a = random_tensor(rng, {2, 3}, true);
  auto b = random_tensor(rng, {3, 2}, true);
  auto unused_by_gradient = random_tensor(rng, {2, 2}, true);
  auto loss = sum(add(matmul(a, b), scale(unused_by_gradient, 0.0)));
  loss.backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_TRUE(unused_by_gradient.has_grad());
}

TEST(ComputationTape, VisitsEachOpOnceInDependencyOrder) {
  auto x = TensorD::from_vector({2}, {1.0, -2.0}, true);
  auto y = relu(x);
  auto z = add(mul(y, y), y);
  auto loss = sum(z);
  ComputationTape<double> tape(loss);
  std::set<const void*> seen;
  for (auto* node : tape.ops()) EXPECT_TRUE(seen.insert(node).second);
  EXPECT_EQ(tape.ops().back(), loss.node().get());
  // the leaf x, then relu, mul, add, sum
  EXPECT_EQ(tape.size(), 5u);
  EXPECT_EQ(tape.ops().front(), x.node().get());
}

TEST(Tensor, NonFiniteResultFromFiniteInputsThrows) {
  EXPECT_THROW(log(TensorD::from_vector({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(exp(TensorD::from_vector({1}, {1000.0})), NumericError);
}

TEST(Tensor, ForwardIsBitIdenticalForIdenticalSeeds) {
  auto run = [] {
    Rng rng(99);
    PatchConfig pc{32, 32, 3, 8, 4};
    EncoderConfig ec;
    ec.embed_dim = 16;
    ec.depth = 2;
    ec.heads = 2;
    auto w = init_backbone<float>(pc, ec, 2, rng);
    std::vector<float> img(32 * 32 * 3);
    for (auto& v : img) v = static_cast<float>(rng.uniform(-1, 1));
    return backbone_forward(TensorF::from_vector({32, 32, 3}, img), pc, ec, w).values.to_vector();
  };
  EXPECT_EQ(run(), run());
}

TEST(GradMode, NoGradGuardSkipsRecording) {
  auto x = TensorD::from_vector({1}, {2.0}, true);
  {
    NoGradGuard guard;
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(mul(x, x).requires_grad());
}
