#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "lmnet/autodiff.hpp"
#include "lmnet/cost.hpp"
#include "lmnet/tensor.hpp"

namespace lmnet {

enum class Mode { train, eval };

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t groups = 1;
};

/// Convolution parameters. weight is [D, C/groups, h, w]; bias, when
/// defined, is [D]. Padding is zeros on each side.
template <class T>
struct ConvParams {
  Var<T> weight;
  Var<T> bias;
  Conv2dGeometry geom;

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1] * geom.groups; }
  std::size_t kernel_h() const { return weight.shape()[2]; }
  std::size_t kernel_w() const { return weight.shape()[3]; }
  bool has_bias() const { return bias.defined(); }
};

/// Batch-norm affine (gamma, beta) and running statistics. The effective
/// standard deviation is sqrt(running_var + eps).
template <class T>
struct BnParams {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  static BnParams identity(std::size_t channels) {
    BnParams bn;
    bn.gamma = parameter(Tensor<T>::ones({channels}));
    bn.beta = parameter(Tensor<T>::zeros({channels}));
    bn.running_mean = Tensor<T>::zeros({channels});
    bn.running_var = Tensor<T>::ones({channels});
    return bn;
  }

  std::size_t channels() const { return gamma.shape()[0]; }
  T delta(std::size_t c) const { return std::sqrt(running_var[c] + eps); }
};

namespace kernels {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) {
    throw ShapeError("kernel extent " + std::to_string(k) + " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Output positions [lo, hi) along one axis whose input tap at kernel offset
// `k` lands inside [0, in).
inline void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad, std::size_t k,
                        std::size_t& lo, std::size_t& hi) {
  // need 0 <= o*stride + k - pad < in
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  std::ptrdiff_t l = shift >= 0 ? 0 : (-shift + s - 1) / s;
  std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(in) - 1 - shift);
  h = h < 0 ? 0 : h / s + 1;
  l = std::min<std::ptrdiff_t>(l, static_cast<std::ptrdiff_t>(out));
  h = std::clamp<std::ptrdiff_t>(h, l, static_cast<std::ptrdiff_t>(out));
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

// Fixed-order dot product with eight interleaved partial sums.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T tail{0};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

struct ConvShape {
  std::size_t n, c, h, w;     // input
  std::size_t d, kh, kw;      // output channels, kernel
  std::size_t ho, wo;         // output spatial
  std::size_t cg, dg;         // per-group channels
};

template <class T>
ConvShape conv_shape(const Tensor<T>& x, const Tensor<T>& w, const Conv2dGeometry& g) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_string(x.shape()) + " and " +
                     shape_string(w.shape()));
  }
  if (g.groups == 0) throw ShapeError("conv2d groups must be positive");
  ConvShape s{};
  s.n = x.dim(0);
  s.c = x.dim(1);
  s.h = x.dim(2);
  s.w = x.dim(3);
  s.d = w.dim(0);
  s.kh = w.dim(2);
  s.kw = w.dim(3);
  if (s.c % g.groups || s.d % g.groups) {
    throw ShapeError("conv2d channels " + std::to_string(s.c) + "->" + std::to_string(s.d) +
                     " not divisible by groups " + std::to_string(g.groups));
  }
  s.cg = s.c / g.groups;
  s.dg = s.d / g.groups;
  if (w.dim(1) != s.cg) {
    throw ShapeError("conv2d weight " + shape_string(w.shape()) + " expects " + std::to_string(w.dim(1) * g.groups) +
                     " input channels, got " + std::to_string(s.c));
  }
  if (g.stride_h == 0 || g.stride_w == 0) throw ShapeError("conv2d stride must be positive");
  s.ho = conv_out_extent(s.h, s.kh, g.stride_h, g.pad_h);
  s.wo = conv_out_extent(s.w, s.kw, g.stride_w, g.pad_w);
  return s;
}

/// Cross-correlation with zero padding. Every output sums its taps in
/// (input channel, kernel row, kernel col) order from zero; the bias is
/// added last.
// acc[j][o] += w[j] * src[o * step] for o in [lo, hi), j < MR.
template <class T, std::size_t MR>
inline void axpy_rows(T* const* acc, const T* w, const T* __restrict src, std::size_t step, std::size_t lo,
                      std::size_t hi) {
  if constexpr (MR == 4) {
    T* __restrict a0 = acc[0];
    T* __restrict a1 = acc[1];
    T* __restrict a2 = acc[2];
    T* __restrict a3 = acc[3];
    const T w0 = w[0], w1 = w[1], w2 = w[2], w3 = w[3];
    if (step == 1) {
      for (std::size_t o = lo; o < hi; ++o) {
        const T v = src[o];
        a0[o] += w0 * v;
        a1[o] += w1 * v;
        a2[o] += w2 * v;
        a3[o] += w3 * v;
      }
    } else {
      for (std::size_t o = lo; o < hi; ++o) {
        const T v = src[o * step];
        a0[o] += w0 * v;
        a1[o] += w1 * v;
        a2[o] += w2 * v;
        a3[o] += w3 * v;
      }
    }
  } else {
    static_assert(MR == 1);
    T* __restrict a0 = acc[0];
    const T w0 = w[0];
    if (step == 1) {
      for (std::size_t o = lo; o < hi; ++o) a0[o] += w0 * src[o];
    } else {
      for (std::size_t o = lo; o < hi; ++o) a0[o] += w0 * src[o * step];
    }
  }
}

// Accumulates MR output channels of one convolution row (or, for 1x1
// kernels, one block of pixels) into `acc`, sharing each input load.
// Every output sums its taps in (ci, ky, kx) order starting from zero.
template <class T, std::size_t MR>
void conv_row_block(const T* in0, std::size_t in_plane, const T* const* wk, std::size_t cg, const ConvShape& s,
                    const Conv2dGeometry& g, std::size_t oh, T* const* acc) {
  for (std::size_t j = 0; j < MR; ++j) std::fill(acc[j], acc[j] + s.wo, T{0});
  const std::size_t taps = s.kh * s.kw;
  for (std::size_t ci = 0; ci < cg; ++ci) {
    const T* in = in0 + ci * in_plane;
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
      if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h)) continue;
      const T* irow = in + static_cast<std::size_t>(ih) * s.w;
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        T wv[MR];
        for (std::size_t j = 0; j < MR; ++j) wv[j] = wk[j][ci * taps + ky * s.kw + kx];
        std::size_t ow_lo, ow_hi;
        valid_range(s.w, s.wo, g.stride_w, g.pad_w, kx, ow_lo, ow_hi);
        if (ow_lo >= ow_hi) continue;
        // First valid tap sits at ow_lo * stride + kx - pad >= 0.
        const T* src = irow + (ow_lo * g.stride_w + kx - g.pad_w);
        T* shifted[MR];
        for (std::size_t j = 0; j < MR; ++j) shifted[j] = acc[j] + ow_lo;
        axpy_rows<T, MR>(shifted, wv, src, g.stride_w, 0, ow_hi - ow_lo);
      }
    }
  }
}

template <class T, std::size_t MR>
void pointwise_block(const T* in0, std::size_t in_plane, const T* const* wk, std::size_t cg, std::size_t p0,
                     std::size_t len, T* const* acc) {
  for (std::size_t j = 0; j < MR; ++j) std::fill(acc[j], acc[j] + len, T{0});
  for (std::size_t ci = 0; ci < cg; ++ci) {
    const T* in = in0 + ci * in_plane + p0;
    T wv[MR];
    for (std::size_t j = 0; j < MR; ++j) wv[j] = wk[j][ci];
    axpy_rows<T, MR>(acc, wv, in, 1, 0, len);
  }
}

/// Forward convolution (cross-correlation, zero padding). Per output the
/// taps are summed in (ci, ky, kx) order from zero and the bias is added
/// last, which the reference loops in the tests reproduce exactly.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias,
                         const Conv2dGeometry& g) {
  const ConvShape s = conv_shape(x, w, g);
  if (bias && (bias->rank() != 1 || bias->dim(0) != s.d)) {
    throw ShapeError("conv2d bias " + shape_string(bias->shape()) + " does not match " + std::to_string(s.d) +
                     " output channels");
  }
  report_macs(static_cast<std::uint64_t>(s.n) * s.d * s.ho * s.wo * s.cg * s.kh * s.kw);
  Tensor<T> out({s.n, s.d, s.ho, s.wo});
  const std::size_t in_plane = s.h * s.w;
  const std::size_t out_plane = s.ho * s.wo;
  const std::size_t ksize = s.cg * s.kh * s.kw;
  const bool pointwise = s.kh == 1 && s.kw == 1 && g.stride_h == 1 && g.stride_w == 1 && g.pad_h == 0 && g.pad_w == 0;
  constexpr std::size_t kMr = 4;
  constexpr std::size_t kBlock = 256;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* in0 = x.ptr() + (n * s.c + grp * s.cg) * in_plane;
      const std::size_t d_begin = grp * s.dg, d_end = d_begin + s.dg;
      const std::size_t pieces = pointwise ? (out_plane + kBlock - 1) / kBlock : s.ho;
      for (std::size_t piece = 0; piece < pieces; ++piece) {
        for (std::size_t d = d_begin; d < d_end;) {
          const std::size_t mr = d_end - d >= kMr ? kMr : 1;
          const T* wk[kMr];
          T* acc[kMr];
          const std::size_t p0 = pointwise ? piece * kBlock : piece * s.wo;
          const std::size_t len = pointwise ? std::min(kBlock, out_plane - p0) : s.wo;
          for (std::size_t j = 0; j < mr; ++j) {
            wk[j] = w.ptr() + (d + j) * ksize;
            acc[j] = out.ptr() + (n * s.d + d + j) * out_plane + p0;
          }
          if (pointwise) {
            if (mr == kMr)
              pointwise_block<T, kMr>(in0, in_plane, wk, s.cg, p0, len, acc);
            else
              pointwise_block<T, 1>(in0, in_plane, wk, s.cg, p0, len, acc);
          } else {
            if (mr == kMr)
              conv_row_block<T, kMr>(in0, in_plane, wk, s.cg, s, g, piece, acc);
            else
              conv_row_block<T, 1>(in0, in_plane, wk, s.cg, s, g, piece, acc);
          }
          d += mr;
        }
      }
    }
    if (bias) {
      for (std::size_t d = 0; d < s.d; ++d) {
        T* o = out.ptr() + (n * s.d + d) * out_plane;
        const T b = (*bias)[d];
        for (std::size_t p = 0; p < out_plane; ++p) o[p] += b;
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> conv2d_backward_input(const Tensor<T>& gout, const Tensor<T>& w, const Shape& x_shape,
                                const Conv2dGeometry& g) {
  Tensor<T> gx(x_shape);
  const ConvShape s = conv_shape(gx, w, g);
  if (g.stride_h == 1 && g.stride_w == 1 && g.pad_h < s.kh && g.pad_w < s.kw) {
    // Stride 1: the input gradient is a forward convolution of the output
    // gradient with the flipped, channel-transposed kernel.
    Tensor<T> wt({s.c, s.dg, s.kh, s.kw});
    for (std::size_t d = 0; d < s.d; ++d) {
      const std::size_t grp = d / s.dg, dd = d % s.dg;
      for (std::size_t ci = 0; ci < s.cg; ++ci) {
        const T* src = w.ptr() + (d * s.cg + ci) * s.kh * s.kw;
        T* dst = wt.ptr() + ((grp * s.cg + ci) * s.dg + dd) * s.kh * s.kw;
        for (std::size_t t = 0; t < s.kh * s.kw; ++t) dst[t] = src[s.kh * s.kw - 1 - t];
      }
    }
    Conv2dGeometry tg{1, 1, s.kh - 1 - g.pad_h, s.kw - 1 - g.pad_w, g.groups};
    Tensor<T> r;
    {
      CostScope silent(nullptr);
      r = conv2d_forward(gout, wt, static_cast<const Tensor<T>*>(nullptr), tg);
    }
    if (r.shape() == x_shape) return r;
  }
  const std::size_t in_plane = s.h * s.w;
  const std::size_t out_plane = s.ho * s.wo;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* gi = gx.ptr() + (n * s.c + c) * in_plane;
      const std::size_t grp = c / s.cg;
      const std::size_t ci = c % s.cg;
      for (std::size_t dd = 0; dd < s.dg; ++dd) {
        const std::size_t d = grp * s.dg + dd;
        const T* go = gout.ptr() + (n * s.d + d) * out_plane;
        const T* wk = w.ptr() + ((d * s.cg + ci) * s.kh) * s.kw;
        for (std::size_t ky = 0; ky < s.kh; ++ky) {
          std::size_t oh_lo, oh_hi;
          valid_range(s.h, s.ho, g.stride_h, g.pad_h, ky, oh_lo, oh_hi);
          for (std::size_t kx = 0; kx < s.kw; ++kx) {
            const T wv = wk[ky * s.kw + kx];
            std::size_t ow_lo, ow_hi;
            valid_range(s.w, s.wo, g.stride_w, g.pad_w, kx, ow_lo, ow_hi);
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              T* irow = gi + (oh * g.stride_h + ky - g.pad_h) * s.w;
              const T* orow = go + oh * s.wo;
              if (g.stride_w == 1) {
                T* dst = irow + kx - g.pad_w;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += wv * orow[ow];
              } else {
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) irow[ow * g.stride_w + kx - g.pad_w] += wv * orow[ow];
              }
            }
          }
        }
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& gout, const Tensor<T>& x, const Shape& w_shape,
                                 const Conv2dGeometry& g) {
  Tensor<T> gw(w_shape);
  const ConvShape s = conv_shape(x, gw, g);
  const std::size_t in_plane = s.h * s.w;
  const std::size_t out_plane = s.ho * s.wo;
  const std::size_t taps = s.kh * s.kw;
  const bool pointwise = s.kh == 1 && s.kw == 1 && g.stride_h == 1 && g.stride_w == 1 && g.pad_h == 0 && g.pad_w == 0;
  if (!pointwise && g.groups == 1) {
    // Dense kernels: unfold each image into [C*kh*kw, H'*W'] patches and
    // take row dot products with the output gradient.
    const std::size_t k = s.cg * taps;
    std::vector<T> cols(k * out_plane);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* in = x.ptr() + n * s.c * in_plane;
      for (std::size_t ci = 0; ci < s.cg; ++ci)
        for (std::size_t ky = 0; ky < s.kh; ++ky)
          for (std::size_t kx = 0; kx < s.kw; ++kx) {
            T* col = cols.data() + ((ci * s.kh + ky) * s.kw + kx) * out_plane;
            std::size_t ow_lo, ow_hi;
            valid_range(s.w, s.wo, g.stride_w, g.pad_w, kx, ow_lo, ow_hi);
            for (std::size_t oh = 0; oh < s.ho; ++oh) {
              T* crow = col + oh * s.wo;
              const std::ptrdiff_t ih =
                  static_cast<std::ptrdiff_t>(oh * g.stride_h + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h)) {
                std::fill(crow, crow + s.wo, T{0});
                continue;
              }
              const T* irow = in + (ci * s.h + static_cast<std::size_t>(ih)) * s.w;
              for (std::size_t ow = 0; ow < s.wo; ++ow)
                crow[ow] = ow >= ow_lo && ow < ow_hi ? irow[ow * g.stride_w + kx - g.pad_w] : T{0};
            }
          }
      for (std::size_t d = 0; d < s.d; ++d) {
        const T* go = gout.ptr() + (n * s.d + d) * out_plane;
        T* gk = gw.ptr() + d * k;
        for (std::size_t j = 0; j < k; ++j) gk[j] += dot(go, cols.data() + j * out_plane, out_plane);
      }
    }
    return gw;
  }
  // Per-tap partial sums are kept lane-wise along the output row and
  // reduced once at the end.
  std::vector<T> lanes(pointwise ? 0 : taps * s.wo);
  for (std::size_t d = 0; d < s.d; ++d) {
    const std::size_t grp = d / s.dg;
    for (std::size_t ci = 0; ci < s.cg; ++ci) {
      T* gk = gw.ptr() + (d * s.cg + ci) * taps;
      if (pointwise) {
        T acc{0};
        for (std::size_t n = 0; n < s.n; ++n) {
          acc += dot(gout.ptr() + (n * s.d + d) * out_plane, x.ptr() + (n * s.c + grp * s.cg + ci) * in_plane,
                     out_plane);
        }
        gk[0] = acc;
        continue;
      }
      std::fill(lanes.begin(), lanes.end(), T{0});
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* go = gout.ptr() + (n * s.d + d) * out_plane;
        const T* in = x.ptr() + (n * s.c + grp * s.cg + ci) * in_plane;
        for (std::size_t oh = 0; oh < s.ho; ++oh) {
          const T* __restrict orow = go + oh * s.wo;
          for (std::size_t ky = 0; ky < s.kh; ++ky) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(oh * g.stride_h + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h)) continue;
            const T* irow = in + static_cast<std::size_t>(ih) * s.w;
            for (std::size_t kx = 0; kx < s.kw; ++kx) {
              std::size_t ow_lo, ow_hi;
              valid_range(s.w, s.wo, g.stride_w, g.pad_w, kx, ow_lo, ow_hi);
              if (ow_lo >= ow_hi) continue;
              T* __restrict lane = lanes.data() + (ky * s.kw + kx) * s.wo;
              const T* __restrict src = irow + (ow_lo * g.stride_w + kx - g.pad_w);
              const std::size_t step = g.stride_w;
              if (step == 1) {
                for (std::size_t o = 0; o < ow_hi - ow_lo; ++o) lane[ow_lo + o] += orow[ow_lo + o] * src[o];
              } else {
                for (std::size_t o = 0; o < ow_hi - ow_lo; ++o) lane[ow_lo + o] += orow[ow_lo + o] * src[o * step];
              }
            }
          }
        }
      }
      for (std::size_t t = 0; t < taps; ++t) {
        T acc{0};
        for (std::size_t o = 0; o < s.wo; ++o) acc += lanes[t * s.wo + o];
        gk[t] = acc;
      }
    }
  }
  return gw;
}

template <class T>
Tensor<T> sum_per_channel(const Tensor<T>& t) {
  const std::size_t n = t.dim(0), c = t.dim(1);
  const std::size_t plane = t.size() / std::max<std::size_t>(1, n * c);
  Tensor<T> out({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const T* p = t.ptr() + (i * c + k) * plane;
      T acc{0};
      for (std::size_t j = 0; j < plane; ++j) acc += p[j];
      out[k] += acc;
    }
  return out;
}

}  // namespace kernels

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const Conv2dGeometry& geom) {
  const Tensor<T>* b = bias.defined() ? &bias.value() : nullptr;
  Tensor<T> out = kernels::conv2d_forward(x.value(), weight.value(), b, geom);
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return record<T>("conv2d", std::move(out), std::move(inputs), [geom](Node<T>& s) {
    const auto& xv = s.parents[0]->value;
    const auto& wv = s.parents[1]->value;
    if (wants_grad(s, 0)) push_grad(s, 0, kernels::conv2d_backward_input(s.grad, wv, xv.shape(), geom));
    if (wants_grad(s, 1)) push_grad(s, 1, kernels::conv2d_backward_weight(s.grad, xv, wv.shape(), geom));
    if (s.parents.size() > 2 && wants_grad(s, 2)) push_grad(s, 2, kernels::sum_per_channel(s.grad));
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const ConvParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.geom);
}

/// Batch normalization over (N, H, W) per channel. Train mode normalizes
/// with batch statistics and updates the running estimates (unbiased
/// variance); eval mode computes (x - mean) * gamma / delta + beta.
template <class T>
Var<T> batch_norm(const Var<T>& x, BnParams<T>& bn, Mode mode) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != bn.channels()) {
    throw ShapeError("batch_norm: input " + shape_string(xv.shape()) + " does not match " +
                     std::to_string(bn.channels()) + " channels");
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  const std::size_t count = n * plane;
  Tensor<T> out(xv.shape());
  const Tensor<T>& gamma = bn.gamma.value();
  const Tensor<T>& beta = bn.beta.value();

  if (mode == Mode::eval) {
    Tensor<T> scale({c});
    for (std::size_t k = 0; k < c; ++k) scale[k] = gamma[k] / bn.delta(k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        const T* src = xv.ptr() + (i * c + k) * plane;
        T* dst = out.ptr() + (i * c + k) * plane;
        const T mu = bn.running_mean[k], sc = scale[k], b = beta[k];
        for (std::size_t j = 0; j < plane; ++j) dst[j] = (src[j] - mu) * sc + b;
      }
    Tensor<T> mean = bn.running_mean;
    Tensor<T> delta({c});
    for (std::size_t k = 0; k < c; ++k) delta[k] = bn.delta(k);
    return record<T>("batch_norm_eval", std::move(out), {x, bn.gamma, bn.beta},
                     [mean, delta, scale, n, c, plane](Node<T>& s) {
                       const auto& xin = s.parents[0]->value;
                       if (wants_grad(s, 0)) {
                         Tensor<T> gx(xin.shape());
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t k = 0; k < c; ++k) {
                             const std::size_t off = (i * c + k) * plane;
                             for (std::size_t j = 0; j < plane; ++j) gx[off + j] = s.grad[off + j] * scale[k];
                           }
                         push_grad(s, 0, gx);
                       }
                       Tensor<T> gg({c}), gb({c});
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < c; ++k) {
                           const std::size_t off = (i * c + k) * plane;
                           T sg{0}, sb{0};
                           for (std::size_t j = 0; j < plane; ++j) {
                             sg += s.grad[off + j] * (xin[off + j] - mean[k]) / delta[k];
                             sb += s.grad[off + j];
                           }
                           gg[k] += sg;
                           gb[k] += sb;
                         }
                       push_grad(s, 1, gg);
                       push_grad(s, 2, gb);
                     });
  }

  if (count < 2) throw ValueError("batch_norm in train mode needs more than one value per channel");
  Tensor<T> xhat(xv.shape());
  Tensor<T> invstd({c});
  for (std::size_t k = 0; k < c; ++k) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = xv.ptr() + (i * c + k) * plane;
      for (std::size_t j = 0; j < plane; ++j) sum += src[j];
    }
    const double mu = sum / static_cast<double>(count);
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = xv.ptr() + (i * c + k) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double dlt = src[j] - mu;
        sq += dlt * dlt;
      }
    }
    const double var = sq / static_cast<double>(count);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(bn.eps));
    invstd[k] = static_cast<T>(is);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + k) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const T xh = static_cast<T>((xv[off + j] - mu) * is);
        xhat[off + j] = xh;
        out[off + j] = xh * gamma[k] + beta[k];
      }
    }
    const T m = bn.momentum;
    const double unbiased = sq / static_cast<double>(count - 1);
    bn.running_mean[k] = (T{1} - m) * bn.running_mean[k] + m * static_cast<T>(mu);
    bn.running_var[k] = (T{1} - m) * bn.running_var[k] + m * static_cast<T>(unbiased);
  }
  return record<T>("batch_norm_train", std::move(out), {x, bn.gamma, bn.beta},
                   [xhat, invstd, n, c, plane](Node<T>& s) {
                     const std::size_t cnt = n * plane;
                     const auto& gamma_v = s.parents[1]->value;
                     Tensor<T> gg({c}), gb({c}), gx(s.grad.shape());
                     for (std::size_t k = 0; k < c; ++k) {
                       double sdy = 0, sdyx = 0;
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t off = (i * c + k) * plane;
                         for (std::size_t j = 0; j < plane; ++j) {
                           sdy += s.grad[off + j];
                           sdyx += s.grad[off + j] * xhat[off + j];
                         }
                       }
                       gg[k] = static_cast<T>(sdyx);
                       gb[k] = static_cast<T>(sdy);
                       const double mean_dy = sdy / cnt, mean_dyx = sdyx / cnt;
                       const double scale = gamma_v[k] * invstd[k];
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t off = (i * c + k) * plane;
                         for (std::size_t j = 0; j < plane; ++j) {
                           gx[off + j] = static_cast<T>(scale * (s.grad[off + j] - mean_dy - xhat[off + j] * mean_dyx));
                         }
                       }
                     }
                     if (wants_grad(s, 0)) push_grad(s, 0, gx);
                     push_grad(s, 1, gg);
                     push_grad(s, 2, gb);
                   });
}

/// 2x2 max pooling with stride 2; ties resolve to the first position in
/// row-major window order.
template <class T>
Var<T> max_pool2(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("max_pool2 expects rank 4");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 || w % 2) throw ShapeError("max_pool2 requires even extents, got " + shape_string(xv.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> out({n, c, ho, wo});
  std::vector<std::uint32_t> arg(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.ptr() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t q : cand)
          if (src[q] > src[best]) best = q;
        const std::size_t o = p * ho * wo + oy * wo + ox;
        out[o] = src[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  }
  return record<T>("max_pool2", std::move(out), {x}, [arg = std::move(arg), h, w, ho, wo](Node<T>& s) {
    Tensor<T> g(s.parents[0]->value.shape());
    const std::size_t planes = g.size() / (h * w);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < ho * wo; ++i) g[p * h * w + arg[p * ho * wo + i]] += s.grad[p * ho * wo + i];
    push_grad(s, 0, g);
  });
}

namespace kernels {

// Half-pixel (align_corners = false) sampling taps along one axis.
struct LinearTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    t.i0[d] = lo;
    t.i1[d] = std::min(lo + 1, in - 1);
    t.frac[d] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace kernels

template <class T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t target_h, std::size_t target_w) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("bilinear_resize expects rank 4");
  if (target_h == 0 || target_w == 0) throw ShapeError("bilinear_resize target must be at least 1x1");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h == target_h && w == target_w) {
    return record<T>("resize_identity", xv, {x}, [](Node<T>& s) { push_grad(s, 0, s.grad); });
  }
  auto ty = kernels::linear_taps(h, target_h);
  auto tx = kernels::linear_taps(w, target_w);
  Tensor<T> out({n, c, target_h, target_w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.ptr() + p * h * w;
    T* dst = out.ptr() + p * target_h * target_w;
    for (std::size_t oy = 0; oy < target_h; ++oy) {
      const T ly = static_cast<T>(ty.frac[oy]);
      const T* r0 = src + ty.i0[oy] * w;
      const T* r1 = src + ty.i1[oy] * w;
      for (std::size_t ox = 0; ox < target_w; ++ox) {
        const T lx = static_cast<T>(tx.frac[ox]);
        const T top = (T{1} - lx) * r0[tx.i0[ox]] + lx * r0[tx.i1[ox]];
        const T bot = (T{1} - lx) * r1[tx.i0[ox]] + lx * r1[tx.i1[ox]];
        dst[oy * target_w + ox] = (T{1} - ly) * top + ly * bot;
      }
    }
  }
  return record<T>("bilinear_resize", std::move(out), {x}, [ty, tx, h, w, target_h, target_w](Node<T>& s) {
    Tensor<T> g(s.parents[0]->value.shape());
    const std::size_t planes = g.size() / (h * w);
    for (std::size_t p = 0; p < planes; ++p) {
      T* dst = g.ptr() + p * h * w;
      const T* go = s.grad.ptr() + p * target_h * target_w;
      for (std::size_t oy = 0; oy < target_h; ++oy) {
        const T ly = static_cast<T>(ty.frac[oy]);
        for (std::size_t ox = 0; ox < target_w; ++ox) {
          const T lx = static_cast<T>(tx.frac[ox]);
          const T v = go[oy * target_w + ox];
          dst[ty.i0[oy] * w + tx.i0[ox]] += (T{1} - ly) * (T{1} - lx) * v;
          dst[ty.i0[oy] * w + tx.i1[ox]] += (T{1} - ly) * lx * v;
          dst[ty.i1[oy] * w + tx.i0[ox]] += ly * (T{1} - lx) * v;
          dst[ty.i1[oy] * w + tx.i1[ox]] += ly * lx * v;
        }
      }
    }
    push_grad(s, 0, g);
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("global_avg_pool expects rank 4");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out({n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc{0};
    for (std::size_t j = 0; j < plane; ++j) acc += xv[p * plane + j];
    out[p] = acc / static_cast<T>(plane);
  }
  return record<T>("global_avg_pool", std::move(out), {x}, [plane](Node<T>& s) {
    Tensor<T> g(s.parents[0]->value.shape());
    for (std::size_t p = 0; p < s.grad.size(); ++p) {
      const T v = s.grad[p] / static_cast<T>(plane);
      for (std::size_t j = 0; j < plane; ++j) g[p * plane + j] = v;
    }
    push_grad(s, 0, g);
  });
}

/// y[n,c,h,w] = x[n,c,h,w] * scale[n,c] (scale given as [N,C,1,1]).
template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& scale) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = scale.value();
  if (xv.rank() != 4 || sv.size() != xv.dim(0) * xv.dim(1)) {
    throw ShapeError("scale_channels: " + shape_string(xv.shape()) + " vs scale " + shape_string(sv.shape()));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out(xv.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t j = 0; j < plane; ++j) out[p * plane + j] = xv[p * plane + j] * sv[p];
  return record<T>("scale_channels", std::move(out), {x, scale}, [planes, plane](Node<T>& s) {
    const auto& xin = s.parents[0]->value;
    const auto& sin = s.parents[1]->value;
    if (wants_grad(s, 0)) {
      Tensor<T> gx(xin.shape());
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t j = 0; j < plane; ++j) gx[p * plane + j] = s.grad[p * plane + j] * sin[p];
      push_grad(s, 0, gx);
    }
    if (wants_grad(s, 1)) {
      Tensor<T> gs(sin.shape());
      for (std::size_t p = 0; p < planes; ++p) gs[p] = kernels::dot(s.grad.ptr() + p * plane, xin.ptr() + p * plane, plane);
      push_grad(s, 1, gs);
    }
  });
}

/// Normalizes each row over the last axis, then applies gamma/beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm axis out of range for a scalar");
  const std::size_t c = xv.shape().back();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("layer_norm affine does not match last extent " + std::to_string(c));
  }
  const std::size_t rows = c ? xv.size() / c : 0;
  Tensor<T> out(xv.shape()), xhat(xv.shape());
  std::vector<T> invstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.ptr() + r * c;
    double mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += src[j];
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    invstd[r] = static_cast<T>(is);
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = static_cast<T>((src[j] - mu) * is);
      xhat[r * c + j] = xh;
      out[r * c + j] = xh * gamma.value()[j] + beta.value()[j];
    }
  }
  return record<T>("layer_norm", std::move(out), {x, gamma, beta}, [xhat, invstd, rows, c](Node<T>& s) {
    const auto& g = s.parents[1]->value;
    Tensor<T> gx(s.grad.shape()), gg({c}), gb({c});
    for (std::size_t r = 0; r < rows; ++r) {
      double sdy = 0, sdyx = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const double dxh = s.grad[r * c + j] * g[j];
        sdy += dxh;
        sdyx += dxh * xhat[r * c + j];
        gg[j] += s.grad[r * c + j] * xhat[r * c + j];
        gb[j] += s.grad[r * c + j];
      }
      const double md = sdy / c, mdx = sdyx / c;
      for (std::size_t j = 0; j < c; ++j) {
        const double dxh = s.grad[r * c + j] * g[j];
        gx[r * c + j] = static_cast<T>(invstd[r] * (dxh - md - xhat[r * c + j] * mdx));
      }
    }
    if (wants_grad(s, 0)) push_grad(s, 0, gx);
    push_grad(s, 1, gg);
    push_grad(s, 2, gb);
  });
}

/// Y = X·W + b over the last axis of X. W is [in, out]; b is optional.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = Var<T>()) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (xv.rank() == 0 || wv.rank() != 2 || xv.shape().back() != wv.dim(0)) {
    throw ShapeError("linear: input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  }
  const std::size_t in = wv.dim(0), outc = wv.dim(1);
  const std::size_t rows = in ? xv.size() / in : 0;
  report_macs(static_cast<std::uint64_t>(rows) * in * outc);
  Tensor<T> y2 = matmul(xv.reshape({rows, in}), wv);
  if (bias.defined()) {
    if (bias.value().size() != outc) throw ShapeError("linear bias does not match output width");
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outc; ++j) y2[r * outc + j] += bias.value()[j];
  }
  Shape out_shape = xv.shape();
  out_shape.back() = outc;
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return record<T>("linear", y2.reshape(out_shape), std::move(inputs), [rows, in, outc](Node<T>& s) {
    const Tensor<T> g2 = s.grad.reshape({rows, outc});
    const auto& xin = s.parents[0]->value;
    if (wants_grad(s, 0)) push_grad(s, 0, matmul(g2, transpose2d(s.parents[1]->value)).reshape(xin.shape()));
    if (wants_grad(s, 1)) push_grad(s, 1, matmul(transpose2d(xin.reshape({rows, in})), g2));
    if (s.parents.size() > 2 && wants_grad(s, 2)) {
      Tensor<T> gb({outc});
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outc; ++j) gb[j] += g2[r * outc + j];
      push_grad(s, 2, gb);
    }
  });
}

namespace kernels {

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax axis " + std::to_string(axis) + " out of range");
  std::size_t outer, inner;
  detail::split_axis(x.shape(), axis, outer, inner);
  const std::size_t len = x.shape()[axis];
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = x[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T total{0};
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= total;
    }
  return y;
}

}  // namespace kernels

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  Tensor<T> y = kernels::softmax(x.value(), axis);
  return record<T>("softmax", std::move(y), {x}, [axis](Node<T>& s) {
    std::size_t outer, inner;
    detail::split_axis(s.value.shape(), axis, outer, inner);
    const std::size_t len = s.value.shape()[axis];
    Tensor<T> g(s.value.shape());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T dotp{0};
        for (std::size_t k = 0; k < len; ++k) dotp += s.grad[base + k * inner] * s.value[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t q = base + k * inner;
          g[q] = s.value[q] * (s.grad[q] - dotp);
        }
      }
    push_grad(s, 0, g);
  });
}

/// Squeeze-and-excitation gate weights: reduce is [C, C/r], expand is
/// [C/r, C]. Both bias-free.
template <class T>
struct SeParams {
  Var<T> reduce;
  Var<T> expand;

  std::size_t channels() const { return reduce.shape()[0]; }
};

/// s = sigmoid(relu(gap(F)·reduce)·expand); returns F scaled per channel by s.
template <class T>
Var<T> se_block(const Var<T>& x, const SeParams<T>& se) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != se.channels()) {
    throw ShapeError("se_block: input " + shape_string(xv.shape()) + " vs " + std::to_string(se.channels()) +
                     " channels");
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  Var<T> pooled = reshape(global_avg_pool(x), {n, c});
  Var<T> hidden = relu(linear(pooled, se.reduce));
  Var<T> gate = sigmoid(linear(hidden, se.expand));
  return scale_channels(x, reshape(gate, {n, c, 1, 1}));
}

template <class T>
SeParams<T> make_se_params(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction) {
    throw ShapeError("SE channels " + std::to_string(channels) + " not divisible by reduction " +
                     std::to_string(reduction));
  }
  const std::size_t hidden = channels / reduction;
  return {parameter(Tensor<T>::zeros({channels, hidden})), parameter(Tensor<T>::zeros({hidden, channels}))};
}

}  // namespace lmnet
