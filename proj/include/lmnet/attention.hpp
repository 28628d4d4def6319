#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lmnet/autodiff.hpp"
#include "lmnet/cost.hpp"
#include "lmnet/nn_ops.hpp"

namespace lmnet {

struct AttentionConfig {
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t mlp_ratio = 4;
  std::optional<std::size_t> window;  // present => local window attention

  std::size_t head_dim() const { return channels / heads; }

  void validate() const {
    if (heads == 0 || channels % heads) {
      throw ShapeError("attention channels " + std::to_string(channels) + " not divisible by heads " +
                       std::to_string(heads));
    }
    if (window && (*window == 0 || *window % 2 == 0)) {
      throw ValueError("attention window must be odd and positive, got " + std::to_string(*window));
    }
  }
};

/// Q/K/V/output projections, each [C, C], no bias.
template <class T>
struct AttentionParams {
  Var<T> wq, wk, wv, wo;
};

template <class T>
struct TransformerParams {
  Var<T> ln1_gamma, ln1_beta;
  AttentionParams<T> attn;
  Var<T> ln2_gamma, ln2_beta;
  Var<T> fc1_w, fc1_b;  // [C, ratio*C], [ratio*C]
  Var<T> fc2_w, fc2_b;  // [ratio*C, C], [C]
};

namespace detail {

template <class T>
Var<T> batch_item(const Var<T>& x, std::size_t n) {
  const Shape& s = x.shape();
  return reshape(slice(x, 0, n, n + 1), Shape{s[1], s[2]});
}

}  // namespace detail

/// Per-head softmax(QKᵀ/√d)·V on already projected [N, T, C] tensors,
/// heads concatenated along channels.
template <class T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                            std::vector<Tensor<T>>* weights_out = nullptr) {
  const Shape& s = q.shape();
  if (s.size() != 3 || k.shape() != s || v.shape() != s) throw ShapeError("attention expects matching [N,T,C] inputs");
  const std::size_t n_batch = s[0], tokens = s[1], c = s[2];
  if (tokens == 0) throw ShapeError("attention over zero tokens");
  if (heads == 0 || c % heads) throw ShapeError("attention channels not divisible by heads");
  const std::size_t d = c / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  report_macs(static_cast<std::uint64_t>(n_batch) * heads * tokens * tokens * d * 2);
  std::vector<Var<T>> batch;
  for (std::size_t n = 0; n < n_batch; ++n) {
    Var<T> qn = detail::batch_item(q, n), kn = detail::batch_item(k, n), vn = detail::batch_item(v, n);
    std::vector<Var<T>> outs;
    for (std::size_t m = 0; m < heads; ++m) {
      Var<T> qh = slice(qn, 1, m * d, (m + 1) * d);
      Var<T> kh = slice(kn, 1, m * d, (m + 1) * d);
      Var<T> vh = slice(vn, 1, m * d, (m + 1) * d);
      Var<T> att = softmax(mul_scalar(matmul(qh, transpose2d(kh)), scale), 1);
      if (weights_out) weights_out->push_back(att.value());
      outs.push_back(matmul(att, vh));
    }
    batch.push_back(reshape(concat(outs, 1), Shape{1, tokens, c}));
  }
  return concat(batch, 0);
}

/// Global multi-head self-attention over X [N, T, C] (or [T, C]).
template <class T>
Var<T> mhsa(const Var<T>& x, const AttentionParams<T>& p, const AttentionConfig& cfg,
            std::vector<Tensor<T>>* weights_out = nullptr) {
  cfg.validate();
  const bool flat = x.shape().size() == 2;
  Var<T> xx = flat ? reshape(x, Shape{1, x.shape()[0], x.shape()[1]}) : x;
  if (xx.shape().size() != 3 || xx.shape()[2] != cfg.channels) {
    throw ShapeError("mhsa input " + shape_string(x.shape()) + " does not match " + std::to_string(cfg.channels) +
                     " channels");
  }
  Var<T> att = scaled_dot_attention(linear(xx, p.wq), linear(xx, p.wk), linear(xx, p.wv), cfg.heads, weights_out);
  Var<T> out = linear(att, p.wo);
  return flat ? reshape(out, x.shape()) : out;
}

namespace kernels {

// Clamp-and-shift neighborhood along one axis: [start, start + extent).
inline std::size_t window_start(std::size_t i, std::size_t length, std::size_t window) {
  const std::size_t extent = std::min(window, length);
  const std::size_t half = window / 2;
  const std::size_t lo = i > half ? i - half : 0;
  return std::min(lo, length - extent);
}

}  // namespace kernels

/// Neighborhood attention on projected [N, H*W, C] tensors. Each query at
/// (y, x) attends to the window x window block centred on it, shifted to
/// stay inside the map, so every query sees exactly min(k,H)·min(k,W) keys.
template <class T>
Var<T> neighborhood_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t height,
                              std::size_t width, std::size_t heads, std::size_t window) {
  const Shape& s = q.shape();
  if (s.size() != 3 || k.shape() != s || v.shape() != s) throw ShapeError("attention expects matching [N,T,C] inputs");
  if (s[1] != height * width) throw ShapeError("token count does not match spatial extent");
  if (window == 0 || window % 2 == 0) throw ValueError("attention window must be odd, got " + std::to_string(window));
  if (heads == 0 || s[2] % heads) throw ShapeError("attention channels not divisible by heads");
  const std::size_t nb = s[0], tokens = s[1], c = s[2], d = c / heads;
  const std::size_t kh = std::min(window, height), kw = std::min(window, width), nk = kh * kw;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  report_macs(static_cast<std::uint64_t>(nb) * heads * tokens * nk * d * 2);

  // Key index table shared by all heads and batch items.
  std::vector<std::uint32_t> keys(tokens * nk);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t y0 = kernels::window_start(y, height, window);
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t x0 = kernels::window_start(x, width, window);
      std::uint32_t* dst = keys.data() + (y * width + x) * nk;
      for (std::size_t dy = 0; dy < kh; ++dy)
        for (std::size_t dx = 0; dx < kw; ++dx) *dst++ = static_cast<std::uint32_t>((y0 + dy) * width + x0 + dx);
    }
  }

  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  Tensor<T> out(s);
  std::vector<T> probs(nb * heads * tokens * nk);
  std::vector<T> logits(nk);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t m = 0; m < heads; ++m)
      for (std::size_t t = 0; t < tokens; ++t) {
        const T* qt = qv.ptr() + (n * tokens + t) * c + m * d;
        const std::uint32_t* kt = keys.data() + t * nk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          const T* kj = kv.ptr() + (n * tokens + kt[j]) * c + m * d;
          T acc{0};
          for (std::size_t e = 0; e < d; ++e) acc += qt[e] * kj[e];
          logits[j] = acc * scale;
          mx = std::max(mx, logits[j]);
        }
        T total{0};
        for (std::size_t j = 0; j < nk; ++j) {
          logits[j] = std::exp(logits[j] - mx);
          total += logits[j];
        }
        T* pr = probs.data() + ((n * heads + m) * tokens + t) * nk;
        T* ot = out.ptr() + (n * tokens + t) * c + m * d;
        for (std::size_t j = 0; j < nk; ++j) {
          pr[j] = logits[j] / total;
          const T* vj = vv.ptr() + (n * tokens + kt[j]) * c + m * d;
          for (std::size_t e = 0; e < d; ++e) ot[e] += pr[j] * vj[e];
        }
      }

  return record<T>("neighborhood_attention", std::move(out), {q, k, v},
                   [keys = std::move(keys), probs = std::move(probs), nb, heads, tokens, c, d, nk,
                    scale](Node<T>& s) {
                     const Tensor<T>& qv = s.parents[0]->value;
                     const Tensor<T>& kv = s.parents[1]->value;
                     const Tensor<T>& vv = s.parents[2]->value;
                     Tensor<T> gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
                     std::vector<T> dp(nk);
                     for (std::size_t n = 0; n < nb; ++n)
                       for (std::size_t m = 0; m < heads; ++m)
                         for (std::size_t t = 0; t < tokens; ++t) {
                           const std::size_t row = (n * tokens + t) * c + m * d;
                           const T* go = s.grad.ptr() + row;
                           const T* pr = probs.data() + ((n * heads + m) * tokens + t) * nk;
                           const std::uint32_t* kt = keys.data() + t * nk;
                           T weighted{0};
                           for (std::size_t j = 0; j < nk; ++j) {
                             const std::size_t krow = (n * tokens + kt[j]) * c + m * d;
                             T acc{0};
                             for (std::size_t e = 0; e < d; ++e) acc += go[e] * vv[krow + e];
                             dp[j] = acc;
                             weighted += pr[j] * acc;
                             for (std::size_t e = 0; e < d; ++e) gv[krow + e] += pr[j] * go[e];
                           }
                           for (std::size_t j = 0; j < nk; ++j) {
                             const T dl = pr[j] * (dp[j] - weighted) * scale;
                             const std::size_t krow = (n * tokens + kt[j]) * c + m * d;
                             for (std::size_t e = 0; e < d; ++e) {
                               gq[row + e] += dl * kv[krow + e];
                               gk[krow + e] += dl * qv[row + e];
                             }
                           }
                         }
                     push_grad(s, 0, gq);
                     push_grad(s, 1, gk);
                     push_grad(s, 2, gv);
                   });
}

/// Token-level attention dispatch: global MHSA when cfg has no window,
/// neighborhood attention on the (height x width) grid otherwise.
template <class T>
Var<T> attention(const Var<T>& x, const AttentionParams<T>& p, const AttentionConfig& cfg, std::size_t height,
                 std::size_t width) {
  if (!cfg.window) return mhsa(x, p, cfg);
  cfg.validate();
  Var<T> att = neighborhood_attention(linear(x, p.wq), linear(x, p.wk), linear(x, p.wv), height, width, cfg.heads,
                                      *cfg.window);
  return linear(att, p.wo);
}

/// Local window attention on a single feature map X [C, H, W]; returns
/// [C, H, W].
template <class T>
Var<T> local_window_attention(const Var<T>& x, const AttentionParams<T>& p, const AttentionConfig& cfg) {
  if (!cfg.window) throw ValueError("local_window_attention requires a window size");
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != cfg.channels) throw ShapeError("local_window_attention expects [C,H,W]");
  const std::size_t c = s[0], h = s[1], w = s[2];
  Var<T> tokens = reshape(permute(reshape(x, Shape{c, h * w}), {1, 0}), Shape{1, h * w, c});
  Var<T> y = attention(tokens, p, cfg, h, w);
  return reshape(permute(reshape(y, Shape{h * w, c}), {1, 0}), Shape{c, h, w});
}

/// X_a = X + Attn(LN(X)); X_o = X_a + MLP(LN(X_a)) with a GELU MLP.
/// `height`/`width` describe the token grid for windowed attention.
template <class T>
Var<T> transformer_block(const Var<T>& x, const TransformerParams<T>& p, const AttentionConfig& cfg,
                         std::size_t height = 0, std::size_t width = 0) {
  const bool flat = x.shape().size() == 2;
  Var<T> xx = flat ? reshape(x, Shape{1, x.shape()[0], x.shape()[1]}) : x;
  if (cfg.window && height * width != xx.shape()[1]) {
    throw ShapeError("windowed transformer block needs the token grid extent");
  }
  Var<T> xa = add(xx, attention(layer_norm(xx, p.ln1_gamma, p.ln1_beta), p.attn, cfg, height, width));
  Var<T> hidden = gelu(linear(layer_norm(xa, p.ln2_gamma, p.ln2_beta), p.fc1_w, p.fc1_b));
  Var<T> xo = add(xa, linear(hidden, p.fc2_w, p.fc2_b));
  return flat ? reshape(xo, x.shape()) : xo;
}

template <class T>
TransformerParams<T> make_transformer_params(const AttentionConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, hidden = cfg.mlp_ratio * cfg.channels;
  TransformerParams<T> p;
  p.ln1_gamma = parameter(Tensor<T>::ones({c}));
  p.ln1_beta = parameter(Tensor<T>::zeros({c}));
  p.ln2_gamma = parameter(Tensor<T>::ones({c}));
  p.ln2_beta = parameter(Tensor<T>::zeros({c}));
  p.attn.wq = parameter(Tensor<T>::zeros({c, c}));
  p.attn.wk = parameter(Tensor<T>::zeros({c, c}));
  p.attn.wv = parameter(Tensor<T>::zeros({c, c}));
  p.attn.wo = parameter(Tensor<T>::zeros({c, c}));
  p.fc1_w = parameter(Tensor<T>::zeros({c, hidden}));
  p.fc1_b = parameter(Tensor<T>::zeros({hidden}));
  p.fc2_w = parameter(Tensor<T>::zeros({hidden, c}));
  p.fc2_b = parameter(Tensor<T>::zeros({c}));
  return p;
}

}  // namespace lmnet
