#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lmnet/attention.hpp"
#include "lmnet/grad_check.hpp"
#include "lmnet/loss.hpp"
#include "lmnet/model.hpp"
#include "lmnet/nn_ops.hpp"

// Finite-difference checks for every differentiable op plus a whole small
// network, all in double precision.

namespace lmnet {

using GradFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCase {
  std::string name;
  std::vector<Tensor<double>> inputs;
  GradFn fn;
  double tolerance = 1e-4;
  std::size_t max_per_input = 0;
  bool refine_kinks = false;
};

struct GradCaseResult {
  std::string name;
  double tolerance = 0;
  GradCheckReport report;
};

namespace detail {

inline Tensor<double> uniform_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Scalar readout sum(y * R) with R a fixed pseudo-random tensor of y's
// shape, so every output element gets a distinct, non-trivial cotangent.
inline Var<double> readout(const Var<double>& y) {
  std::mt19937_64 rng(0x5eed);
  return sum(mul(y, constant(uniform_tensor(y.shape(), rng))));
}

inline GradCase unary_case(std::string name, Shape shape, std::mt19937_64& rng,
                           std::function<Var<double>(const Var<double>&)> op, double lo = -1.0, double hi = 1.0) {
  return {std::move(name), {uniform_tensor(std::move(shape), rng, lo, hi)},
          [op](const std::vector<Var<double>>& v) { return readout(op(v[0])); }};
}

inline GradCase conv_case(std::string name, Shape x, Shape w, bool bias, Conv2dGeometry g, std::mt19937_64& rng) {
  std::vector<Tensor<double>> in{uniform_tensor(x, rng), uniform_tensor(w, rng)};
  if (bias) in.push_back(uniform_tensor({w[0]}, rng));
  return {std::move(name), std::move(in), [g, bias](const std::vector<Var<double>>& v) {
            return readout(conv2d(v[0], v[1], bias ? v[2] : Var<double>(), g));
          }};
}

/// One unfused multi-branch module in train mode under the class-weighted
/// loss; the input and all of its parameters are perturbed.
inline GradCase multi_branch_case(std::mt19937_64& rng) {
  LmNetConfig cfg;
  Initializer<double> init(rng());
  auto m = std::make_shared<MultiBranchModule<double>>(make_multi_branch<double>(2, 3, cfg, init, false));
  GradCase c;
  c.name = "multi_branch_block";
  c.inputs.push_back(uniform_tensor({2, 2, 5, 5}, rng));
  std::vector<Var<double>*> slots;
  m->visit("m", [&](const TensorSlot<double>& s) {
    if (!s.param) return;
    c.inputs.push_back(s.param->value());
    slots.push_back(s.param);
  });
  std::vector<SegmentationMask> masks;
  std::uniform_int_distribution<std::int32_t> cls(0, 2);
  for (int i = 0; i < 2; ++i) {
    SegmentationMask mk(5, 5);
    for (auto& l : mk.labels) l = cls(rng);
    masks.push_back(mk);
  }
  c.fn = [m, slots, masks](const std::vector<Var<double>>& v) {
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = v[i + 1];
    return weighted_cross_entropy(multi_branch_forward(v[0], *m, Mode::train), masks, {1.0, 2.0, 0.5});
  };
  return c;
}

}  // namespace detail

/// The per-op cases, each checked at relative tolerance 1e-4.
inline std::vector<GradCase> primitive_grad_cases(std::uint64_t seed = 7) {
  using detail::readout;
  using detail::uniform_tensor;
  using V = std::vector<Var<double>>;
  std::mt19937_64 rng(seed);
  std::vector<GradCase> cases;

  cases.push_back({"add", {uniform_tensor({3, 4}, rng), uniform_tensor({3, 4}, rng)},
                   [](const V& v) { return readout(add(v[0], v[1])); }});
  cases.push_back({"sub", {uniform_tensor({3, 4}, rng), uniform_tensor({3, 4}, rng)},
                   [](const V& v) { return readout(sub(v[0], v[1])); }});
  cases.push_back({"mul", {uniform_tensor({3, 4}, rng), uniform_tensor({3, 4}, rng)},
                   [](const V& v) { return readout(mul(v[0], v[1])); }});
  cases.push_back({"div", {uniform_tensor({3, 4}, rng), uniform_tensor({3, 4}, rng, 0.5, 2.0)},
                   [](const V& v) { return readout(div(v[0], v[1])); }});
  cases.push_back(detail::unary_case("add_scalar", {5}, rng, [](const Var<double>& x) { return add_scalar(x, 0.3); }));
  cases.push_back(detail::unary_case("mul_scalar", {5}, rng, [](const Var<double>& x) { return mul_scalar(x, -1.7); }));
  cases.push_back(detail::unary_case("relu", {4, 5}, rng, [](const Var<double>& x) { return relu(x); }));
  cases.push_back(detail::unary_case("sigmoid", {4, 5}, rng, [](const Var<double>& x) { return sigmoid(x); }, -3, 3));
  cases.push_back(detail::unary_case("exp", {4, 5}, rng, [](const Var<double>& x) { return exp(x); }));
  cases.push_back(detail::unary_case("ln", {4, 5}, rng, [](const Var<double>& x) { return ln(x); }, 0.5, 2.0));
  cases.push_back(detail::unary_case("gelu", {4, 5}, rng, [](const Var<double>& x) { return gelu(x); }, -3, 3));
  cases.push_back(detail::unary_case("sum", {3, 4}, rng, [](const Var<double>& x) { return sum(x); }));
  cases.push_back(detail::unary_case("mean", {3, 4}, rng, [](const Var<double>& x) { return mean(x); }));
  cases.push_back({"matmul", {uniform_tensor({3, 5}, rng), uniform_tensor({5, 4}, rng)},
                   [](const V& v) { return readout(matmul(v[0], v[1])); }});
  cases.push_back(detail::unary_case("transpose2d", {3, 5}, rng, [](const Var<double>& x) { return transpose2d(x); }));
  cases.push_back(
      detail::unary_case("reshape", {2, 6}, rng, [](const Var<double>& x) { return reshape(x, Shape{3, 4}); }));
  cases.push_back(detail::unary_case("permute", {2, 3, 4}, rng,
                                     [](const Var<double>& x) { return permute(x, {2, 0, 1}); }));
  cases.push_back({"concat", {uniform_tensor({2, 3}, rng), uniform_tensor({2, 2}, rng)},
                   [](const V& v) { return readout(concat(v, 1)); }});
  cases.push_back(
      detail::unary_case("slice", {4, 5}, rng, [](const Var<double>& x) { return slice(x, 1, 1, 4); }));

  cases.push_back(detail::conv_case("conv2d_3x3_bias", {2, 3, 5, 6}, {4, 3, 3, 3}, true, {1, 1, 1, 1, 1}, rng));
  cases.push_back(detail::conv_case("conv2d_stride2", {1, 3, 7, 6}, {2, 3, 3, 3}, false, {2, 2, 1, 1, 1}, rng));
  cases.push_back(detail::conv_case("conv2d_depthwise_3x1", {1, 4, 5, 5}, {4, 1, 3, 1}, false, {1, 1, 1, 0, 4}, rng));
  cases.push_back(detail::conv_case("conv2d_grouped_1x3", {1, 4, 6, 5}, {6, 2, 1, 3}, true, {2, 1, 0, 1, 2}, rng));
  cases.push_back(detail::conv_case("conv2d_pointwise", {2, 5, 3, 4}, {3, 5, 1, 1}, true, {}, rng));
  cases.push_back(detail::conv_case("conv2d_5x5", {1, 2, 6, 6}, {2, 2, 5, 5}, false, {1, 1, 2, 2, 1}, rng));

  cases.push_back({"batch_norm_train",
                   {uniform_tensor({2, 3, 3, 4}, rng), uniform_tensor({3}, rng, 0.5, 1.5), uniform_tensor({3}, rng)},
                   [](const V& v) {
                     BnParams<double> bn = BnParams<double>::identity(3);
                     bn.gamma = v[1];
                     bn.beta = v[2];
                     return readout(batch_norm(v[0], bn, Mode::train));
                   }});
  {
    Tensor<double> mu = uniform_tensor({3}, rng), var = uniform_tensor({3}, rng, 0.5, 2.0);
    cases.push_back({"batch_norm_eval",
                     {uniform_tensor({2, 3, 3, 4}, rng), uniform_tensor({3}, rng, 0.5, 1.5), uniform_tensor({3}, rng)},
                     [mu, var](const V& v) {
                       BnParams<double> bn = BnParams<double>::identity(3);
                       bn.gamma = v[1];
                       bn.beta = v[2];
                       bn.running_mean = mu;
                       bn.running_var = var;
                       return readout(batch_norm(v[0], bn, Mode::eval));
                     }});
  }
  cases.push_back(detail::unary_case("max_pool2", {2, 2, 4, 6}, rng, [](const Var<double>& x) { return max_pool2(x); }));
  cases.push_back(detail::unary_case("bilinear_up", {1, 2, 3, 4}, rng,
                                     [](const Var<double>& x) { return bilinear_resize(x, 7, 5); }));
  cases.push_back(detail::unary_case("bilinear_down", {1, 2, 8, 8}, rng,
                                     [](const Var<double>& x) { return bilinear_resize(x, 3, 5); }));
  cases.push_back(
      detail::unary_case("global_avg_pool", {2, 3, 4, 4}, rng, [](const Var<double>& x) { return global_avg_pool(x); }));
  cases.push_back({"scale_channels", {uniform_tensor({2, 3, 4, 4}, rng), uniform_tensor({2, 3, 1, 1}, rng)},
                   [](const V& v) { return readout(scale_channels(v[0], v[1])); }});
  cases.push_back({"layer_norm",
                   {uniform_tensor({2, 5, 6}, rng), uniform_tensor({6}, rng, 0.5, 1.5), uniform_tensor({6}, rng)},
                   [](const V& v) { return readout(layer_norm(v[0], v[1], v[2])); }});
  cases.push_back({"linear", {uniform_tensor({2, 3, 4}, rng), uniform_tensor({4, 5}, rng), uniform_tensor({5}, rng)},
                   [](const V& v) { return readout(linear(v[0], v[1], v[2])); }});
  cases.push_back(
      detail::unary_case("softmax_rows", {3, 5}, rng, [](const Var<double>& x) { return softmax(x, 1); }, -2, 2));
  cases.push_back(
      detail::unary_case("softmax_cols", {4, 3}, rng, [](const Var<double>& x) { return softmax(x, 0); }, -2, 2));
  cases.push_back({"se_block",
                   {uniform_tensor({2, 8, 3, 3}, rng), uniform_tensor({8, 2}, rng), uniform_tensor({2, 8}, rng)},
                   [](const V& v) { return readout(se_block(v[0], SeParams<double>{v[1], v[2]})); }});
  cases.push_back({"scaled_dot_attention",
                   {uniform_tensor({2, 5, 4}, rng), uniform_tensor({2, 5, 4}, rng), uniform_tensor({2, 5, 4}, rng)},
                   [](const V& v) { return readout(scaled_dot_attention(v[0], v[1], v[2], 2)); }});
  cases.push_back({"neighborhood_attention",
                   {uniform_tensor({1, 12, 4}, rng), uniform_tensor({1, 12, 4}, rng), uniform_tensor({1, 12, 4}, rng)},
                   [](const V& v) { return readout(neighborhood_attention(v[0], v[1], v[2], 3, 4, 2, 3)); }});
  {
    std::vector<Tensor<double>> in{uniform_tensor({1, 6, 4}, rng)};
    for (int i = 0; i < 4; ++i) in.push_back(uniform_tensor({4, 4}, rng, -0.7, 0.7));
    cases.push_back({"mhsa", std::move(in), [](const V& v) {
                       AttentionConfig cfg;
                       cfg.channels = 4;
                       cfg.heads = 2;
                       return readout(mhsa(v[0], AttentionParams<double>{v[1], v[2], v[3], v[4]}, cfg));
                     }});
  }
  {
    AttentionConfig cfg;
    cfg.channels = 4;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.window = 3;
    std::vector<Tensor<double>> in{uniform_tensor({1, 12, 4}, rng)};
    for (Shape s : {Shape{4}, Shape{4}, Shape{4, 4}, Shape{4, 4}, Shape{4, 4}, Shape{4, 4}, Shape{4}, Shape{4},
                    Shape{4, 8}, Shape{8}, Shape{8, 4}, Shape{4}})
      in.push_back(uniform_tensor(s, rng, -0.7, 0.7));
    cases.push_back({"transformer_block_windowed", std::move(in), [cfg](const V& v) {
                       TransformerParams<double> p{v[1], v[2], {v[3], v[4], v[5], v[6]}, v[7], v[8], v[9], v[10], v[11], v[12]};
                       return readout(transformer_block(v[0], p, cfg, 3, 4));
                     }});
  }
  {
    std::vector<SegmentationMask> masks;
    std::uniform_int_distribution<std::int32_t> cls(0, 2);
    for (int i = 0; i < 2; ++i) {
      SegmentationMask m(3, 4);
      for (auto& l : m.labels) l = cls(rng);
      masks.push_back(m);
    }
    cases.push_back({"weighted_cross_entropy", {uniform_tensor({2, 3, 3, 4}, rng, -2, 2)}, [masks](const V& v) {
                       return weighted_cross_entropy(v[0], masks, {0.5, 1.0, 2.0});
                     }});
  }
  cases.push_back(detail::multi_branch_case(rng));
  return cases;
}

/// Smallest network with every component, sized for the whole-model check.
inline LmNetConfig grad_check_model_config() {
  LmNetConfig c;
  c.base_channels = 4;
  c.input_h = c.input_w = 32;
  c.gft.mlp_ratio = 2;
  for (auto& l : c.lft) {
    l.window = 3;
    l.mlp_ratio = 2;
  }
  return c;
}

/// Whole network on a 3x32x32 input: the input image and every trainable
/// tensor are perturbed, large tensors are sampled. BN runs on running
/// statistics calibrated by a few train-mode passes. With batch statistics
/// any shift feeding a later BN is normalized away, so those gradients are
/// exactly zero and finite differences only see rounding noise there.
/// Batch-statistic BN is covered by batch_norm_train and multi_branch_block.
inline GradCase network_grad_case(std::uint64_t seed = 7, std::size_t per_tensor = 3) {
  auto net = std::make_shared<LmNet<double>>(grad_check_model_config(), seed);
  std::mt19937_64 rng(seed);
  net->set_mode(Mode::train);
  {
    NoGradGuard guard;
    for (int i = 0; i < 4; ++i) net->forward(constant(detail::uniform_tensor({2, 3, 32, 32}, rng, 0.0, 1.0)));
  }
  net->set_mode(Mode::eval);
  GradCase c;
  c.name = "lmnet_tiny_full";
  c.tolerance = 1e-3;
  c.max_per_input = per_tensor;
  c.refine_kinks = true;  // random-init ReLU nets have many kinks within 1e-5
  c.inputs.push_back(detail::uniform_tensor({1, 3, 32, 32}, rng, 0.0, 1.0));
  std::vector<Var<double>*> slots;
  net->visit([&](const TensorSlot<double>& s) {
    if (!s.param) return;
    c.inputs.push_back(s.param->value());
    slots.push_back(s.param);
  });
  c.fn = [net, slots](const std::vector<Var<double>>& v) {
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = v[i + 1];
    return detail::readout(net->forward(v[0]));
  };
  return c;
}

inline GradCaseResult run_grad_case(const GradCase& c, std::uint64_t seed = 0) {
  GradCheckOptions opt;
  opt.tolerance = c.tolerance;
  opt.max_per_input = c.max_per_input;
  opt.seed = seed;
  opt.refine_kinks = c.refine_kinks;
  return {c.name, c.tolerance, grad_check(c.fn, c.inputs, opt)};
}

}  // namespace lmnet
