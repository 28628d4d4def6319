#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace lmnet;
using lmnet::testing::naive_bn_eval;
using lmnet::testing::naive_conv2d;
using lmnet::testing::random_tensor;

namespace {

struct ConvCase {
  Shape x, w;
  Conv2dGeometry g;
  bool bias;
};

const std::vector<ConvCase> kConvCases = {
    {{1, 1, 5, 5}, {1, 1, 3, 3}, {1, 1, 1, 1, 1}, false},
    {{2, 3, 9, 7}, {5, 3, 3, 3}, {1, 1, 1, 1, 1}, true},    // channel remainder after blocks of 4
    {{1, 6, 8, 8}, {8, 6, 3, 3}, {2, 2, 1, 1, 1}, false},   // strided
    {{1, 4, 7, 9}, {4, 1, 3, 1}, {1, 1, 1, 0, 4}, false},   // depthwise 3x1
    {{1, 4, 7, 9}, {4, 1, 1, 3}, {1, 1, 0, 1, 4}, true},    // depthwise 1x3
    {{1, 8, 9, 9}, {8, 1, 5, 5}, {1, 1, 2, 2, 8}, false},   // depthwise 5x5
    {{1, 6, 6, 5}, {9, 2, 3, 3}, {1, 2, 1, 1, 3}, true},    // grouped, anisotropic stride
    {{2, 7, 20, 17}, {9, 7, 1, 1}, {1, 1, 0, 0, 1}, true},  // pointwise over more than one pixel block
    {{1, 2, 3, 3}, {3, 2, 5, 5}, {1, 1, 2, 2, 1}, false},   // kernel larger than the map
    {{1, 3, 6, 6}, {2, 3, 2, 2}, {1, 1, 0, 0, 1}, false},   // even kernel, no padding
};

}  // namespace

TEST(Conv2d, BitExactAgainstSixLoopReferenceF32) {
  std::mt19937_64 rng(11);
  for (const auto& c : kConvCases) {
    auto x = random_tensor<float>(c.x, rng);
    auto w = random_tensor<float>(c.w, rng);
    auto b = random_tensor<float>({c.w[0]}, rng);
    const Tensor<float>* bp = c.bias ? &b : nullptr;
    auto got = kernels::conv2d_forward(x, w, bp, c.g);
    auto want = naive_conv2d(x, w, bp, c.g);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_EQ(got.vec(), want.vec()) << "x " << shape_string(c.x) << " w " << shape_string(c.w);
  }
}

TEST(Conv2d, BitExactAgainstSixLoopReferenceF64) {
  std::mt19937_64 rng(12);
  for (const auto& c : kConvCases) {
    auto x = random_tensor<double>(c.x, rng);
    auto w = random_tensor<double>(c.w, rng);
    auto got = kernels::conv2d_forward(x, w, nullptr, c.g);
    EXPECT_EQ(got.vec(), naive_conv2d(x, w, static_cast<const Tensor<double>*>(nullptr), c.g).vec());
  }
}

// <conv(x), g> = <x, conv_input_adjoint(g)> and likewise for the kernel.
TEST(Conv2d, BackwardIsTheAdjoint) {
  std::mt19937_64 rng(13);
  for (const auto& c : kConvCases) {
    auto x = random_tensor<double>(c.x, rng);
    auto w = random_tensor<double>(c.w, rng);
    auto y = kernels::conv2d_forward(x, w, nullptr, c.g);
    auto g = random_tensor<double>(y.shape(), rng);
    auto gx = kernels::conv2d_backward_input(g, w, x.shape(), c.g);
    auto gw = kernels::conv2d_backward_weight(g, x, w.shape(), c.g);
    double lhs = 0, rx = 0, rw = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
    for (std::size_t i = 0; i < x.size(); ++i) rx += x[i] * gx[i];
    for (std::size_t i = 0; i < w.size(); ++i) rw += w[i] * gw[i];
    EXPECT_NEAR(lhs, rx, 1e-9 * (1 + std::abs(lhs)));
    EXPECT_NEAR(lhs, rw, 1e-9 * (1 + std::abs(lhs)));
  }
}

TEST(Conv2d, RejectsBadShapes) {
  Conv2dGeometry g;
  g.groups = 2;
  EXPECT_THROW(kernels::conv2d_forward(Tensor<float>({1, 3, 4, 4}), Tensor<float>({2, 1, 1, 1}), nullptr, g),
               ShapeError);
  EXPECT_THROW(kernels::conv2d_forward(Tensor<float>({1, 2, 4, 4}), Tensor<float>({2, 3, 1, 1}), nullptr, {}),
               ShapeError);
}

TEST(BatchNorm, EvalModeHandValues) {
  auto bn = BnParams<double>::identity(1);
  bn.gamma = parameter(Tensor<double>({1}, 2.0));
  bn.beta = parameter(Tensor<double>({1}, 0.5));
  bn.running_mean = Tensor<double>({1}, 1.0);
  bn.running_var = Tensor<double>({1}, 4.0 - 1e-5);  // delta = 2
  auto x = constant(Tensor<double>({1, 1, 1, 3}, std::vector<double>{1.0, 3.0, -1.0}));
  auto y = batch_norm(x, bn, Mode::eval).value();
  EXPECT_NEAR(y[0], 0.5, 1e-12);
  EXPECT_NEAR(y[1], 2.5, 1e-12);
  EXPECT_NEAR(y[2], -1.5, 1e-12);
}

TEST(BatchNorm, EvalMatchesElementwiseFormula) {
  std::mt19937_64 rng(14);
  auto b = lmnet::testing::random_branch<double>(3, 3, 3, 1, rng);
  auto x = random_tensor<double>({2, 3, 4, 5}, rng);
  auto y = batch_norm(constant(x), b.bn, Mode::eval).value();
  EXPECT_LT(max_abs_diff(y, naive_bn_eval(x, b.bn)), 1e-14);
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  auto bn = BnParams<double>::identity(1);
  auto x = constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  auto y = batch_norm(x, bn, Mode::train).value();
  double m = 0, v = 0;
  for (double e : y.vec()) m += e / 4;
  for (double e : y.vec()) v += (e - m) * (e - m) / 4;
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v, 1.25 / (1.25 + 1e-5), 1e-9);
  // momentum 0.1 towards mean 2.5 and unbiased variance 5/3
  EXPECT_NEAR(bn.running_mean[0], 0.25, 1e-12);
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(BilinearResize, HalfPixelGrid) {
  // 1x2 -> 1x4: sample points at -0.25, 0.25, 0.75, 1.25 in source pixels,
  // clamped at the edges.
  auto x = constant(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.0, 1.0}));
  auto y = bilinear_resize(x, 1, 4).value();
  EXPECT_EQ(y.vec(), (std::vector<double>{0.0, 0.25, 0.75, 1.0}));
}

TEST(BilinearResize, PreservesConstantsAndIdentity) {
  auto c = constant(Tensor<double>({1, 2, 3, 5}, 0.7));
  const auto resized = bilinear_resize(c, 7, 2).value();
  for (double v : resized.vec()) EXPECT_NEAR(v, 0.7, 1e-15);
  std::mt19937_64 rng(15);
  auto x = random_tensor<double>({1, 2, 4, 4}, rng);
  EXPECT_EQ(bilinear_resize(constant(x), 4, 4).value(), x);
}

TEST(BilinearResize, IntegerDownscaleAveragesPairs) {
  auto x = constant(Tensor<double>({1, 1, 1, 4}, std::vector<double>{1, 3, 5, 9}));
  auto y = bilinear_resize(x, 1, 2).value();
  EXPECT_EQ(y.vec(), (std::vector<double>{2, 7}));
}

TEST(MaxPool, PicksWindowMaximum) {
  auto x = constant(Tensor<double>({1, 1, 2, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, 8, 7}));
  EXPECT_EQ(max_pool2(x).value().vec(), (std::vector<double>{5, 8}));
  EXPECT_THROW(max_pool2(constant(Tensor<double>({1, 1, 3, 4}))), ShapeError);
}

TEST(Softmax, RowsSumToOneAndAreShiftInvariant) {
  std::mt19937_64 rng(16);
  auto x = random_tensor<double>({4, 6}, rng, -50, 50);
  auto p = kernels::softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += p.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto shifted = kernels::softmax(add_scalar(x, 1000.0), 1);
  EXPECT_LT(max_abs_diff(p, shifted), 1e-12);
  auto two = kernels::softmax(Tensor<double>({1, 2}, std::vector<double>{0.0, std::log(3.0)}), 1);
  EXPECT_NEAR(two[0], 0.25, 1e-15);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(17);
  auto x = random_tensor<double>({3, 8}, rng, -4, 4);
  auto y = layer_norm(constant(x), constant(Tensor<double>::ones({8})), constant(Tensor<double>::zeros({8}))).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 8; ++j) m += y.at(r, j) / 8;
    for (std::size_t j = 0; j < 8; ++j) v += (y.at(r, j) - m) * (y.at(r, j) - m) / 8;
    EXPECT_NEAR(m, 0, 1e-12);
    EXPECT_NEAR(v, 1, 1e-4);
  }
}

TEST(SqueezeExcitation, ZeroWeightsGateAtOneHalf) {
  std::mt19937_64 rng(18);
  auto x = random_tensor<double>({2, 8, 3, 3}, rng);
  auto se = make_se_params<double>(8, 4);
  auto y = se_block(constant(x), se).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
  EXPECT_THROW(make_se_params<double>(6, 4), ShapeError);
}

TEST(SqueezeExcitation, MatchesHandComputedGate) {
  // One channel pair, reduction 2: hidden = relu(mean(F)·r), s = sigmoid(hidden·e).
  auto x = Tensor<double>({1, 2, 1, 2}, std::vector<double>{1, 3, -2, 0});
  SeParams<double> se{constant(Tensor<double>({2, 1}, std::vector<double>{1.0, 0.5})),
                      constant(Tensor<double>({1, 2}, std::vector<double>{2.0, -1.0}))};
  const double hidden = std::max(0.0, 2.0 * 1.0 + (-1.0) * 0.5);
  const double s0 = 1 / (1 + std::exp(-2.0 * hidden)), s1 = 1 / (1 + std::exp(hidden));
  auto y = se_block(constant(x), se).value();
  EXPECT_NEAR(y[0], 1 * s0, 1e-15);
  EXPECT_NEAR(y[1], 3 * s0, 1e-15);
  EXPECT_NEAR(y[2], -2 * s1, 1e-15);
  EXPECT_NEAR(y[3], 0, 1e-15);
}

TEST(Gelu, KnownValues) {
  auto y = gelu(constant(Tensor<double>({3}, std::vector<double>{0.0, 1.0, -1.0}))).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.8413447460685429, 1e-6);
  EXPECT_NEAR(y[2], -0.15865525393145707, 1e-6);
}
