#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "lmnet/nn_ops.hpp"

// Structural re-parameterization of parallel conv+BN branches.
//
// A branch computes bn(conv(F, K)). In eval mode BN is the per-channel
// affine map (x - mu) * eta / delta + beta, so by homogeneity of the
// convolution the branch equals conv(F, (eta/delta) K) + (beta - mu eta/delta).
// Branches with odd kernels padded by (h-1)/2 produce aligned outputs, and
// zero-padding a kernel at its centre leaves its output unchanged, so by
// additivity n branches collapse into one convolution whose kernel and bias
// are the sums of the per-branch folded kernels and biases.

namespace lmnet {

/// One train-time branch: a bias-free convolution followed by batch norm.
template <class T>
struct BranchSpec {
  ConvParams<T> conv;
  BnParams<T> bn;
};

/// Inference-time replacement for one or more branches. Kernel extents are
/// odd and the convolution always carries a bias.
template <class T>
struct FusedConv {
  ConvParams<T> conv;
};

/// Folds eval-mode batch norm into the preceding convolution.
template <class T>
FusedConv<T> fuse_conv_bn(const BranchSpec<T>& branch) {
  const Tensor<T>& k = branch.conv.weight.value();
  const std::size_t d = k.dim(0);
  if (branch.bn.channels() != d) {
    throw ShapeError("fuse_conv_bn: batch norm has " + std::to_string(branch.bn.channels()) + " channels, conv has " +
                     std::to_string(d));
  }
  const std::size_t per_out = k.size() / d;
  Tensor<T> kf(k.shape());
  Tensor<T> bias({d});
  const Tensor<T>& eta = branch.bn.gamma.value();
  const Tensor<T>& beta = branch.bn.beta.value();
  for (std::size_t o = 0; o < d; ++o) {
    const T scale = eta[o] / branch.bn.delta(o);
    for (std::size_t j = 0; j < per_out; ++j) kf[o * per_out + j] = scale * k[o * per_out + j];
    T b = -branch.bn.running_mean[o] * scale + beta[o];
    if (branch.conv.has_bias()) b += scale * branch.conv.bias.value()[o];
    bias[o] = b;
  }
  FusedConv<T> out;
  out.conv.weight = parameter(std::move(kf));
  out.conv.bias = parameter(std::move(bias));
  out.conv.geom = branch.conv.geom;
  return out;
}

/// Zero-pads a [D, Cg, h, w] kernel to [D, Cg, target_h, target_w] with the
/// original placed at the spatial centre.
template <class T>
Tensor<T> pad_kernel_center(const Tensor<T>& k, std::size_t target_h, std::size_t target_w) {
  if (k.rank() != 4) throw ShapeError("pad_kernel_center expects a rank-4 kernel");
  const std::size_t d = k.dim(0), cg = k.dim(1), h = k.dim(2), w = k.dim(3);
  if (h % 2 == 0 || w % 2 == 0 || target_h % 2 == 0 || target_w % 2 == 0) {
    throw ShapeError("pad_kernel_center requires odd extents, got " + std::to_string(h) + "x" + std::to_string(w) +
                     " -> " + std::to_string(target_h) + "x" + std::to_string(target_w));
  }
  if (target_h < h || target_w < w) throw ShapeError("pad_kernel_center target smaller than kernel");
  const std::size_t oy = (target_h - h) / 2, ox = (target_w - w) / 2;
  Tensor<T> out({d, cg, target_h, target_w});
  for (std::size_t p = 0; p < d * cg; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(p * target_h + y + oy) * target_w + x + ox] = k[(p * h + y) * w + x];
  return out;
}

namespace detail {

inline Conv2dGeometry centered_geometry(std::size_t kh, std::size_t kw, const Conv2dGeometry& like) {
  Conv2dGeometry g = like;
  g.pad_h = (kh - 1) / 2;
  g.pad_w = (kw - 1) / 2;
  return g;
}

template <class T>
void check_branch_compatible(const ConvParams<T>& ref, const ConvParams<T>& c) {
  const auto& a = ref.geom;
  const auto& b = c.geom;
  if (a.stride_h != b.stride_h || a.stride_w != b.stride_w || a.groups != b.groups ||
      ref.out_channels() != c.out_channels() || ref.in_channels() != c.in_channels()) {
    throw ShapeError("incompatible branches: stride, groups and channel counts must match");
  }
  if (c.kernel_h() % 2 == 0 || c.kernel_w() % 2 == 0) {
    throw ShapeError("branch kernels must have odd extents to align, got " + std::to_string(c.kernel_h()) + "x" +
                     std::to_string(c.kernel_w()));
  }
  if (b.pad_h != (c.kernel_h() - 1) / 2 || b.pad_w != (c.kernel_w() - 1) / 2) {
    throw ShapeError("branch padding must be (k-1)/2 per axis for aligned outputs");
  }
}

}  // namespace detail

/// Sum of two fused convolutions as one, padding both kernels to the
/// larger extent.
template <class T>
FusedConv<T> add_fused(const FusedConv<T>& a, const FusedConv<T>& b) {
  detail::check_branch_compatible(a.conv, b.conv);
  const std::size_t kh = std::max(a.conv.kernel_h(), b.conv.kernel_h());
  const std::size_t kw = std::max(a.conv.kernel_w(), b.conv.kernel_w());
  FusedConv<T> out;
  out.conv.weight = parameter(add(pad_kernel_center(a.conv.weight.value(), kh, kw),
                                  pad_kernel_center(b.conv.weight.value(), kh, kw)));
  out.conv.bias = parameter(add(a.conv.bias.value(), b.conv.bias.value()));
  out.conv.geom = detail::centered_geometry(kh, kw, a.conv.geom);
  return out;
}

/// Merges n parallel conv+BN branches into one biased convolution:
/// K' = sum_i (eta_i/delta_i) pad(K_i), b = sum_i (beta_i - mu_i eta_i/delta_i).
template <class T>
FusedConv<T> merge_branches(const std::vector<BranchSpec<T>>& branches) {
  if (branches.empty()) throw ValueError("merge_branches needs at least one branch");
  std::size_t kh = 0, kw = 0;
  for (const auto& b : branches) {
    detail::check_branch_compatible(branches.front().conv, b.conv);
    kh = std::max(kh, b.conv.kernel_h());
    kw = std::max(kw, b.conv.kernel_w());
  }
  const ConvParams<T>& ref = branches.front().conv;
  Tensor<T> kernel({ref.out_channels(), ref.weight.shape()[1], kh, kw});
  Tensor<T> bias({ref.out_channels()});
  for (const auto& b : branches) {
    FusedConv<T> f = fuse_conv_bn(b);
    add_into(kernel, pad_kernel_center(f.conv.weight.value(), kh, kw));
    add_into(bias, f.conv.bias.value());
  }
  FusedConv<T> out;
  out.conv.weight = parameter(std::move(kernel));
  out.conv.bias = parameter(std::move(bias));
  out.conv.geom = detail::centered_geometry(kh, kw, ref.geom);
  return out;
}

/// Eval-mode forward of unfused branches: sum of bn_i(conv_i(x)) in
/// branch order.
template <class T>
Var<T> branches_forward(const Var<T>& x, std::vector<BranchSpec<T>>& branches, Mode mode) {
  Var<T> acc;
  for (auto& b : branches) {
    Var<T> y = batch_norm(conv2d(x, b.conv), b.bn, mode);
    acc = acc.defined() ? add(acc, y) : y;
  }
  return acc;
}

}  // namespace lmnet
