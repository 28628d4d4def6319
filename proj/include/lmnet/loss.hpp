#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lmnet/autodiff.hpp"
#include "lmnet/errors.hpp"
#include "lmnet/metrics.hpp"

namespace lmnet {

/// Mean over all N·H·W pixels of w[y] · (-log softmax(logits)[y]), with
/// logits [N, K, H, W] and one mask per batch item. The log-softmax uses
/// the max-shifted log-sum-exp.
template <class T>
Var<T> weighted_cross_entropy(const Var<T>& logits, const std::vector<SegmentationMask>& targets,
                              const std::vector<double>& class_weights) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 4) throw ShapeError("weighted_cross_entropy expects [N,K,H,W] logits, got " + shape_string(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1), h = z.dim(2), w = z.dim(3);
  const std::size_t plane = h * w;
  if (targets.size() != n) throw ShapeError("weighted_cross_entropy: " + std::to_string(targets.size()) +
                                            " masks for a batch of " + std::to_string(n));
  if (class_weights.size() != k) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(class_weights.size()) + " weights for " +
                     std::to_string(k) + " classes");
  }
  for (double cw : class_weights) {
    if (!(cw > 0)) throw ValueError("class weights must be positive");
  }
  for (const auto& m : targets) {
    if (m.height != h || m.width != w) throw ShapeError("weighted_cross_entropy: mask extent differs from logits");
    for (std::int32_t v : m.labels) {
      if (v < 0 || static_cast<std::size_t>(v) >= k) throw ValueError("label " + std::to_string(v) + " out of range");
    }
  }

  // probs holds softmax per pixel for the backward rule.
  Tensor<T> probs(z.shape());
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* zi = z.ptr() + i * k * plane;
    T* pi = probs.ptr() + i * k * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T m = zi[p];
      for (std::size_t c = 1; c < k; ++c) m = std::max(m, zi[c * plane + p]);
      T sum{0};
      for (std::size_t c = 0; c < k; ++c) {
        const T e = std::exp(zi[c * plane + p] - m);
        pi[c * plane + p] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < k; ++c) pi[c * plane + p] /= sum;
      const std::size_t y = static_cast<std::size_t>(targets[i].labels[p]);
      const double nll = static_cast<double>(std::log(sum) + m - zi[y * plane + p]);
      total += class_weights[y] * nll;
    }
  }
  const double count = static_cast<double>(n * plane);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / count));
  return record<T>("weighted_cross_entropy", std::move(out), {logits},
                   [probs, targets, class_weights, n, k, plane, count](Node<T>& s) {
                     const T g = s.grad[0];
                     Tensor<T> gz(probs.shape());
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t p = 0; p < plane; ++p) {
                         const std::size_t y = static_cast<std::size_t>(targets[i].labels[p]);
                         const T scale = static_cast<T>(class_weights[y] / count) * g;
                         for (std::size_t c = 0; c < k; ++c) {
                           const std::size_t off = (i * k + c) * plane + p;
                           const T target = c == y ? T{1} : T{0};
                           gz[off] = scale * (probs[off] - target);
                         }
                       }
                     push_grad(s, 0, gz);
                   });
}

struct ClassWeights {
  std::vector<double> weights;
  std::vector<std::string> warnings;
};

/// Effective-number class weights w_c = (1 - beta) / (1 - beta^n_c),
/// normalized to mean 1 over the classes that occur. A class with no
/// pixels is dropped from the weighting: it gets weight 1 and a warning.
inline ClassWeights class_weights(const std::vector<std::uint64_t>& pixel_counts, double beta = 0.9999) {
  if (!(beta >= 0 && beta < 1)) throw ValueError("class weight beta must lie in [0, 1)");
  ClassWeights r;
  r.weights.assign(pixel_counts.size(), 1.0);
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < pixel_counts.size(); ++c) {
    if (pixel_counts[c] == 0) {
      r.warnings.push_back("class " + std::to_string(c) + " has no pixels; dropped from weighting");
      continue;
    }
    const double effective = 1.0 - std::pow(beta, static_cast<double>(pixel_counts[c]));
    r.weights[c] = (1.0 - beta) / effective;
    sum += r.weights[c];
    ++present;
  }
  if (present == 0) return r;
  const double mean = sum / static_cast<double>(present);
  for (std::size_t c = 0; c < pixel_counts.size(); ++c) {
    if (pixel_counts[c] != 0) r.weights[c] /= mean;
  }
  return r;
}

}  // namespace lmnet
