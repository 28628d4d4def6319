#pragma once

#include <cstdint>

#include "lmnet/cost.hpp"
#include "lmnet/model.hpp"
#include "lmnet/reparam.hpp"

namespace lmnet {

/// Replaces the depthwise branches of one module by their merged
/// convolution. Returns false when the module was already fused.
template <class T>
bool fuse_module(MultiBranchModule<T>& m) {
  if (m.is_fused()) return false;
  m.fused = merge_branches(m.branches);
  m.branches.clear();
  return true;
}

/// Inference copy of `net` with every multi-branch group merged into one
/// convolution. Everything else is copied unchanged. `changed`, when
/// given, reports whether any module was rewritten (false on a model that
/// was already fused).
template <class T>
LmNet<T> fuse_model(const LmNet<T>& net, bool* changed = nullptr) {
  if (net.mode() != Mode::eval) throw ValueError("fuse_model: model contains train-mode batch norm; switch to eval");
  LmNet<T> out = net.clone();
  bool any = false;
  out.for_each_multi_branch([&](MultiBranchModule<T>& m) { any = fuse_module(m) || any; });
  if (changed) *changed = any;
  return out;
}

struct CostReport {
  std::uint64_t params = 0;   // trainable scalars
  std::uint64_t buffers = 0;  // batch-norm running statistics
  std::uint64_t macs = 0;     // multiply-accumulates for one forward pass

  std::uint64_t params_with_buffers() const { return params + buffers; }
};

/// Parameter count plus MACs of one eval forward on an [n, 3, h, w] input.
/// Convolutions count N·D·H'·W'·(C/groups)·kh·kw, linear layers
/// rows·in·out, attention both QKᵀ and AV products. Normalization,
/// activations and resizing are not counted.
template <class T>
CostReport count_cost(const LmNet<T>& net, std::size_t n, std::size_t h, std::size_t w) {
  LmNet<T> probe = net.clone();
  CostReport r;
  probe.visit([&](const TensorSlot<T>& s) {
    if (s.param)
      r.params += s.param->value().size();
    else
      r.buffers += s.buffer->size();
  });
  if (!probe.is_fused()) probe.set_mode(Mode::eval);
  CostMeter meter;
  {
    CostScope scope(meter);
    NoGradGuard guard;
    probe.forward(constant(Tensor<T>::zeros({n, 3, h, w})));
  }
  r.macs = meter.macs;
  return r;
}

template <class T>
CostReport count_cost(const LmNet<T>& net) {
  return count_cost(net, 1, net.config().input_h, net.config().input_w);
}

}  // namespace lmnet
