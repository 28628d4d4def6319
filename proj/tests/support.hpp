#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "lmnet/lmnet.hpp"

namespace lmnet::testing {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Six nested loops straight from the definition of a grouped, strided,
// zero-padded cross-correlation. Summation runs over (ci, ky, kx) from
// zero with the bias added last, the same order the kernels use.
template <class T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const Conv2dGeometry& g) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t d = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (h + 2 * g.pad_h - kh) / g.stride_h + 1;
  const std::size_t wo = (wd + 2 * g.pad_w - kw) / g.stride_w + 1;
  const std::size_t dg = d / g.groups;
  (void)c;
  Tensor<T> out({n, d, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xo = 0; xo < wo; ++xo) {
          T acc{0};
          const std::size_t grp = o / dg;
          for (std::size_t ci = 0; ci < cg; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride_h + ky) -
                                          static_cast<std::ptrdiff_t>(g.pad_h);
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride_w + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad_w);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd))
                  continue;
                acc += w.at(o, ci, ky, kx) * x.at(b, grp * cg + ci, iy, ix);
              }
          if (bias) acc += (*bias)[o];
          out.at(b, o, y, xo) = acc;
        }
  return out;
}

// Eval-mode batch norm written out per element.
template <class T>
Tensor<T> naive_bn_eval(const Tensor<T>& x, const BnParams<T>& bn) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (b * c + k) * plane + p;
        out[i] = (x[i] - bn.running_mean[k]) * bn.gamma.value()[k] / bn.delta(k) + bn.beta.value()[k];
      }
  return out;
}

// Branch with random kernel and non-trivial batch-norm statistics.
template <class T>
BranchSpec<T> random_branch(std::size_t channels, std::size_t kh, std::size_t kw, std::size_t groups,
                            std::mt19937_64& rng) {
  BranchSpec<T> b;
  b.conv.weight = parameter(random_tensor<T>({channels, channels / groups, kh, kw}, rng));
  b.conv.geom.pad_h = (kh - 1) / 2;
  b.conv.geom.pad_w = (kw - 1) / 2;
  b.conv.geom.groups = groups;
  b.bn = BnParams<T>::identity(channels);
  b.bn.gamma = parameter(random_tensor<T>({channels}, rng, 0.5, 1.5));
  b.bn.beta = parameter(random_tensor<T>({channels}, rng));
  b.bn.running_mean = random_tensor<T>({channels}, rng);
  b.bn.running_var = random_tensor<T>({channels}, rng, 0.5, 2.0);
  return b;
}

// A small network that still has every component: C=4 at 32x32.
inline LmNetConfig tiny_config(std::size_t size = 32) {
  LmNetConfig c;
  c.base_channels = 4;
  c.input_h = c.input_w = size;
  c.lft.fill(LftConfig{0, 3, 2, 1});
  c.gft.mlp_ratio = 2;
  return c;
}

inline SegmentationMask random_mask(std::size_t h, std::size_t w, std::size_t classes, std::mt19937_64& rng,
                                    double fg_bias = 0.5) {
  SegmentationMask m(h, w);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> cls(1, static_cast<std::int32_t>(classes) - 1);
  for (auto& v : m.labels) v = u(rng) < fg_bias ? cls(rng) : 0;
  return m;
}

}  // namespace lmnet::testing
