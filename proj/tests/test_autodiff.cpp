#include <gtest/gtest.h>

#include "support.hpp"

using namespace lmnet;
using lmnet::testing::random_tensor;

TEST(Autodiff, SquareAtThree) {
  auto x = parameter(Tensor<double>::scalar(3.0));
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Autodiff, ReusedInputAccumulates) {
  auto x = parameter(Tensor<double>({3}, std::vector<double>{1, 2, 3}));
  // d/dx sum(x*x + 2x) = 2x + 2
  backward(sum(add(mul(x, x), mul_scalar(x, 2.0))));
  EXPECT_EQ(x.grad().vec(), (std::vector<double>{4, 6, 8}));
}

TEST(Autodiff, GradientIsLinearInTheLoss) {
  std::mt19937_64 rng(5);
  auto a0 = random_tensor<double>({4, 3}, rng);
  auto b0 = random_tensor<double>({3, 2}, rng);
  auto run = [&](double scale) {
    auto a = parameter(a0);
    auto b = parameter(b0);
    backward(mul_scalar(sum(matmul(a, b)), scale));
    return a.grad();
  };
  auto g1 = run(1.0), g3 = run(3.0);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g3[i], 3.0 * g1[i], 1e-12);
  // d/da sum(a b) is the row sums of b broadcast to every row of a.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g1.at(i, j), b0.at(j, 0) + b0.at(j, 1), 1e-12);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  auto x = parameter(Tensor<double>::scalar(2.0));
  auto c = constant(Tensor<double>::scalar(5.0));
  backward(mul(x, c));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_FALSE(c.has_grad());
}

TEST(Autodiff, NoGradRecordsNothing) {
  auto x = parameter(Tensor<double>::scalar(2.0));
  Var<double> y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Autodiff, BackwardNeedsScalarRoot) {
  auto x = parameter(Tensor<double>({2}));
  EXPECT_THROW(backward(add(x, x)), ValueError);
}

TEST(Autodiff, DeepChainDoesNotOverflowStack) {
  auto x = parameter(Tensor<double>::scalar(1.0));
  Var<double> y = x;
  for (int i = 0; i < 20000; ++i) y = add_scalar(y, 0.0);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(GradCheck, RejectsNondeterministicFunction) {
  int calls = 0;
  auto f = [&](const std::vector<Var<double>>& v) { return mul_scalar(sum(v[0]), static_cast<double>(++calls)); };
  EXPECT_THROW(grad_check(f, {Tensor<double>({2}, 1.0)}), ValueError);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A deliberately broken op: forward x^2, backward claims 3x.
  auto f = [](const std::vector<Var<double>>& v) {
    Tensor<double> out = mul(v[0].value(), v[0].value());
    return sum(record<double>("bad_square", out, {v[0]}, [](Node<double>& s) {
      push_grad(s, 0, mul_scalar(s.parents[0]->value, 3.0 * 1.0) /* wrong */);
    }));
  };
  auto r = grad_check(f, {Tensor<double>({3}, std::vector<double>{0.5, 1.0, -2.0})});
  EXPECT_FALSE(r.passed);
}

TEST(GradCheck, RefinesStepAcrossKink) {
  // relu kink 3e-6 away: a 1e-5 step straddles it.
  auto f = [](const std::vector<Var<double>>& v) { return sum(relu(v[0])); };
  const std::vector<Tensor<double>> x{Tensor<double>({2}, std::vector<double>{3e-6, -0.5})};
  EXPECT_FALSE(grad_check(f, x).passed);
  GradCheckOptions opt;
  opt.refine_kinks = true;
  const auto r = grad_check(f, x, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_EQ(r.refined, 1u);
}

TEST(GradCheck, RefinementStillCatchesWrongGradient) {
  auto f = [](const std::vector<Var<double>>& v) {
    Tensor<double> out = mul(v[0].value(), v[0].value());
    return sum(record<double>("bad_square", out, {v[0]}, [](Node<double>& s) {
      push_grad(s, 0, mul_scalar(s.parents[0]->value, 3.0));
    }));
  };
  GradCheckOptions opt;
  opt.refine_kinks = true;
  EXPECT_FALSE(grad_check(f, {Tensor<double>({3}, std::vector<double>{0.5, 1.0, -2.0})}, opt).passed);
}

TEST(GradCheck, WholeNetworkSampled) {
  const auto r = run_grad_case(network_grad_case(3, 1), 3);
  EXPECT_TRUE(r.report.passed) << r.report.max_rel_error << " at input " << r.report.worst.input;
  EXPECT_GT(r.report.checked, 300u);
}

class PrimitiveGrad : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGrad, MatchesFiniteDifferences) {
  static const auto cases = primitive_grad_cases();
  const auto& c = cases.at(GetParam());
  const auto r = run_grad_case(c);
  EXPECT_TRUE(r.report.passed) << c.name << " max rel error " << r.report.max_rel_error << " at input "
                               << r.report.worst.input << "[" << r.report.worst.index << "] analytic "
                               << r.report.worst.analytic << " numeric " << r.report.worst.numeric;
  EXPECT_GT(r.report.checked, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGrad, ::testing::Range<std::size_t>(0, primitive_grad_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return primitive_grad_cases().at(info.param).name;
                         });
