#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmnet/data.hpp"
#include "lmnet/loss.hpp"
#include "lmnet/metrics.hpp"
#include "lmnet/model.hpp"
#include "lmnet/serialize.hpp"

namespace lmnet {

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct RunConfig {
  LmNetConfig model;
  OptimizerConfig optimizer;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  double class_weight_beta = 0.9999;
  std::string manifest;  // dataset manifest path
  std::string out;       // checkpoint path

  void validate() const {
    model.validate();
    if (!(optimizer.lr > 0)) throw ValueError("optimizer.lr must be positive");
    if (optimizer.weight_decay < 0) throw ValueError("optimizer.weight_decay must be non-negative");
    if (batch_size < 1) throw ValueError("batch_size must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = {{"lr", o.lr}, {"weight_decay", o.weight_decay}, {"betas", {o.beta1, o.beta2}}, {"eps", o.eps}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  detail::reject_unknown_keys(j, {"lr", "weight_decay", "betas", "eps"}, "optimizer config");
  o.lr = j.value("lr", o.lr);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2) throw ValueError("optimizer.betas must have two entries");
    o.beta1 = b[0].get<double>();
    o.beta2 = b[1].get<double>();
  }
  o.eps = j.value("eps", o.eps);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"optimizer", c.optimizer},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"augment", c.augment},
       {"class_weight_beta", c.class_weight_beta},
       {"manifest", c.manifest},
       {"out", c.out}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  detail::reject_unknown_keys(j,
                              {"model", "optimizer", "batch_size", "epochs", "seed", "augment", "class_weight_beta",
                               "manifest", "out"},
                              "run config");
  if (j.contains("model")) c.model = j.at("model").get<LmNetConfig>();
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
  c.class_weight_beta = j.value("class_weight_beta", c.class_weight_beta);
  c.manifest = j.value("manifest", c.manifest);
  c.out = j.value("out", c.out);
}

/// Reads a run config; relative manifest/out paths resolve against the
/// config file's directory.
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  RunConfig c;
  try {
    c = nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("invalid config " + path.string() + ": " + e.what());
  }
  const auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (path.parent_path() / p).string();
  };
  resolve(c.manifest);
  resolve(c.out);
  c.validate();
  return c;
}

/// Cosine annealing: lr_t = 0.5 · lr · (1 + cos(π t / T)).
inline double cosine_lr(double base, std::size_t t, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

/// AdamW with decoupled weight decay, applied only to slots flagged for
/// decay (conv and linear weights; norms and biases are exempt).
template <class T>
class AdamW {
 public:
  AdamW(LmNet<T>& net, OptimizerConfig cfg) : cfg_(cfg) {
    net.visit([&](const TensorSlot<T>& s) {
      if (!s.param) return;
      entries_.push_back({s.param, s.decay, std::vector<double>(s.param->value().size(), 0.0),
                          std::vector<double>(s.param->value().size(), 0.0)});
    });
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& e : entries_) {
      if (!e.param->has_grad()) continue;
      Tensor<T>& p = e.param->mutable_value();
      const Tensor<T>& g = e.param->grad();
      const double decay = e.decay ? lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        e.m[i] = cfg_.beta1 * e.m[i] + (1 - cfg_.beta1) * gi;
        e.v[i] = cfg_.beta2 * e.v[i] + (1 - cfg_.beta2) * gi * gi;
        double w = static_cast<double>(p[i]);
        w -= decay * w;
        w -= lr * (e.m[i] / bc1) / (std::sqrt(e.v[i] / bc2) + cfg_.eps);
        p[i] = static_cast<T>(w);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct Entry {
    Var<T>* param;
    bool decay;
    std::vector<double> m, v;
  };
  OptimizerConfig cfg_;
  std::vector<Entry> entries_;
  std::size_t t_ = 0;
};

template <class T>
Tensor<T> stack_images(const std::vector<const Tensor<T>*>& images) {
  if (images.empty()) throw ValueError("cannot stack an empty batch");
  const Shape& s = images.front()->shape();
  Tensor<T> out({images.size(), s[0], s[1], s[2]});
  const std::size_t each = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ShapeError("batch images differ in shape");
    std::copy(images[i]->ptr(), images[i]->ptr() + each, out.ptr() + i * each);
  }
  return out;
}

/// Per-pixel argmax over classes; ties go to the lower class index.
template <class T>
std::vector<SegmentationMask> argmax_masks(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t plane = h * w;
  std::vector<SegmentationMask> out;
  for (std::size_t i = 0; i < n; ++i) {
    SegmentationMask m(h, w);
    const T* z = logits.ptr() + i * k * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (z[c * plane + p] > z[best * plane + p]) best = c;
      m.labels[p] = static_cast<std::int32_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Eval-mode predictions for a list of samples, in order.
template <class T>
std::vector<SegmentationMask> predict_masks(LmNet<T>& net, const std::vector<Sample<T>>& samples,
                                            std::size_t batch = 8) {
  const Mode prev = net.mode();
  if (!net.is_fused()) net.set_mode(Mode::eval);
  std::vector<SegmentationMask> out;
  for (std::size_t b = 0; b < samples.size(); b += batch) {
    std::vector<const Tensor<T>*> imgs;
    for (std::size_t i = b; i < std::min(samples.size(), b + batch); ++i) imgs.push_back(&samples[i].image);
    for (auto& m : argmax_masks(net.predict_logits(stack_images(imgs)))) out.push_back(std::move(m));
  }
  if (!net.is_fused()) net.set_mode(prev);
  return out;
}

template <class T>
MetricsReport evaluate(LmNet<T>& net, const std::vector<Sample<T>>& samples, bool foreground_only = false) {
  MetricsAccumulator acc(net.config().num_classes, foreground_only);
  const auto preds = predict_masks(net, samples);
  for (std::size_t i = 0; i < samples.size(); ++i) acc.add(preds[i], samples[i].mask);
  return acc.report();
}

/// One optimisation step on a batch; returns the loss. A non-finite loss
/// aborts with a diagnostic before any parameter changes.
template <class T>
double train_step(LmNet<T>& net, AdamW<T>& opt, const std::vector<Sample<T>>& batch,
                  const std::vector<double>& class_weights, double lr) {
  net.set_mode(Mode::train);
  std::vector<const Tensor<T>*> imgs;
  std::vector<SegmentationMask> masks;
  for (const auto& s : batch) {
    imgs.push_back(&s.image);
    masks.push_back(s.mask);
  }
  Var<T> logits = net.forward(constant(stack_images(imgs)));
  Var<T> loss = weighted_cross_entropy(logits, masks, class_weights);
  const double value = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(value)) {
    throw ValueError("non-finite training loss (" + std::to_string(value) + ") at optimizer step " +
                     std::to_string(opt.steps() + 1) + "; lower the learning rate or check the inputs");
  }
  net.zero_grad();
  backward(loss);
  opt.step(lr);
  net.zero_grad();
  return value;
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;
  double lr = 0;
  double val_mean_dice = 0;
  double val_mean_iou = 0;
  bool improved = false;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochLog> history;
  double best_val_mean_dice = -1;
  std::size_t best_epoch = 0;  // 0 = untrained weights
};

using TrainLogger = std::function<void(const nlohmann::json&)>;

/// Full training run. The best model by validation mDice is kept in
/// `net` at the end and, when `checkpoint` is set, written there each time
/// it improves. With zero epochs the untrained model is written.
template <class T>
TrainResult train(LmNet<T>& net, const RunConfig& cfg, const DatasetManifest& manifest,
                  const std::optional<std::filesystem::path>& checkpoint, const TrainLogger& log = {}) {
  cfg.validate();
  const std::size_t h = net.config().input_h, w = net.config().input_w;
  const auto train_idx = manifest.indices(Split::train);
  if (train_idx.empty()) throw ValueError("the manifest has an empty train split");
  std::vector<Sample<T>> train_set, val_set;
  for (std::size_t i : train_idx) train_set.push_back(load_pair<T>(manifest.entries[i], manifest.palette, h, w));
  for (std::size_t i : manifest.indices(Split::val))
    val_set.push_back(load_pair<T>(manifest.entries[i], manifest.palette, h, w));
  if (manifest.num_classes() > net.config().num_classes) {
    throw ValueError("manifest palette has " + std::to_string(manifest.num_classes()) + " classes, model has " +
                     std::to_string(net.config().num_classes));
  }

  const auto counts = class_pixel_counts(train_set, net.config().num_classes);
  const ClassWeights cw = class_weights(counts, cfg.class_weight_beta);
  if (log) {
    for (const auto& msg : cw.warnings) log({{"event", "warning"}, {"message", msg}});
    log({{"event", "start"},
         {"train", train_set.size()},
         {"val", val_set.size()},
         {"epochs", cfg.epochs},
         {"batch_size", cfg.batch_size},
         {"class_weights", cw.weights}});
  }

  TrainResult result;
  if (cfg.epochs == 0) {
    net.set_mode(Mode::eval);
    if (checkpoint) save_weights(net, *checkpoint);
    return result;
  }

  AdamW<T> opt(net, cfg.optimizer);
  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  std::optional<LmNet<T>> best;
  std::size_t t = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(splitmix64(cfg.seed ^ splitmix64(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    double lr = cfg.optimizer.lr;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<Sample<T>> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
        Sample<T> s = train_set[order[k]];
        auto rng = item_rng(manifest.seed ^ cfg.seed, train_idx[order[k]], epoch);
        augment(s.image, s.mask, rng, cfg.augment);
        batch.push_back(std::move(s));
      }
      lr = cosine_lr(cfg.optimizer.lr, t, total);
      loss_sum += train_step(net, opt, batch, cw.weights, lr);
      ++t;
    }

    EpochLog e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(steps_per_epoch);
    e.lr = lr;
    if (!val_set.empty()) {
      const MetricsReport r = evaluate(net, val_set);
      e.val_mean_dice = r.mean_dice;
      e.val_mean_iou = r.mean_iou;
    }
    // Without a validation split every epoch counts as an improvement, so
    // the last epoch is kept.
    e.improved = val_set.empty() || e.val_mean_dice > result.best_val_mean_dice;
    if (e.improved) {
      result.best_val_mean_dice = e.val_mean_dice;
      result.best_epoch = epoch;
      net.set_mode(Mode::eval);
      best = net.clone();
      if (checkpoint) save_weights(net, *checkpoint);
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(e);
    if (log) {
      log({{"event", "epoch"},
           {"epoch", e.epoch},
           {"loss", e.loss},
           {"lr", e.lr},
           {"val_mean_dice", e.val_mean_dice},
           {"val_mean_iou", e.val_mean_iou},
           {"improved", e.improved},
           {"seconds", e.seconds}});
    }
  }
  if (best) net = std::move(*best);
  net.set_mode(Mode::eval);
  return result;
}

}  // namespace lmnet
