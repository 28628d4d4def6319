#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmnet/errors.hpp"

namespace lmnet {

/// Per-pixel class labels of one image, row-major.
struct SegmentationMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;

  SegmentationMask() = default;
  SegmentationMask(std::size_t h, std::size_t w, std::int32_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::size_t size() const { return labels.size(); }
  std::int32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  bool operator==(const SegmentationMask& o) const = default;
};

struct ConfusionStats {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline void require_same_extent(const SegmentationMask& a, const SegmentationMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("mask extents differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

/// One-vs-rest counts for every class.
inline std::vector<ConfusionStats> confusion_stats(const SegmentationMask& pred, const SegmentationMask& ref,
                                                   std::size_t num_classes) {
  require_same_extent(pred, ref);
  std::vector<ConfusionStats> s(num_classes);
  const auto check = [&](std::int32_t v) {
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
      throw ValueError("label " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  };
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::int32_t p = pred.labels[i], r = ref.labels[i];
    check(p);
    check(r);
    if (p == r) {
      ++s[p].tp;
    } else {
      ++s[p].fp;
      ++s[r].fn;
    }
  }
  const std::uint64_t total = pred.size();
  for (auto& c : s) c.tn = total - c.tp - c.fp - c.fn;
  return s;
}

// A class absent from both masks scores 1.
inline double dice(const ConfusionStats& s) {
  const std::uint64_t den = 2 * s.tp + s.fp + s.fn;
  return den == 0 ? 1.0 : static_cast<double>(2 * s.tp) / static_cast<double>(den);
}

inline double iou(const ConfusionStats& s) {
  const std::uint64_t den = s.tp + s.fp + s.fn;
  return den == 0 ? 1.0 : static_cast<double>(s.tp) / static_cast<double>(den);
}

/// Fraction of correctly labelled pixels.
inline double accuracy(const std::vector<ConfusionStats>& stats) {
  if (stats.empty()) return 1.0;
  const ConfusionStats& s = stats.front();
  const std::uint64_t total = s.tp + s.fp + s.fn + s.tn;
  if (total == 0) return 1.0;
  std::uint64_t correct = 0;
  for (const auto& c : stats) correct += c.tp;
  return static_cast<double>(correct) / static_cast<double>(total);
}

// With nothing predicted, precision is 1 if the reference is empty too and
// 0 otherwise; recall with an empty reference is 1.
inline double precision(const ConfusionStats& s) {
  if (s.tp + s.fp == 0) return s.fn == 0 ? 1.0 : 0.0;
  return static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
}

inline double recall(const ConfusionStats& s) {
  if (s.tp + s.fn == 0) return 1.0;
  return static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
}

/// Boundary pixels of the foreground (label != 0): foreground pixels with
/// at least one 4-neighbour outside the foreground; the image border counts
/// as outside.
inline std::vector<std::uint8_t> boundary_map(const SegmentationMask& m) {
  const std::size_t h = m.height, w = m.width;
  std::vector<std::uint8_t> b(h * w, 0);
  const auto fg = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return false;
    return m.labels[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] != 0;
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
      if (fg(yy, xx) && (!fg(yy - 1, xx) || !fg(yy + 1, xx) || !fg(yy, xx - 1) || !fg(yy, xx + 1))) b[y * w + x] = 1;
    }
  return b;
}

namespace detail {

// Lower envelope of parabolas (q - v)^2 + f(v) over the finite entries of
// f; entries equal to +inf are not sites.
inline void distance_1d(const std::vector<double>& f, std::vector<double>& d) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      any = true;
      continue;
    }
    const double qd = static_cast<double>(q);
    double s;
    while (true) {
      const double vd = static_cast<double>(v[k]);
      s = ((f[q] + qd * qd) - (f[v[k]] + vd * vd)) / (2 * qd - 2 * vd);
      if (s > z[k]) break;  // z[0] = -inf ends the scan
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  d.assign(n, inf);
  if (!any) return;
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const double diff = qd - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `sites` (separable two-pass transform). +inf when no site.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, std::size_t h,
                                                      std::size_t w) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(h * w, inf);
  std::vector<double> f, d;
  f.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = sites[y * w + x] ? 0.0 : inf;
    detail::distance_1d(f, d);
    for (std::size_t y = 0; y < h; ++y) g[y * w + x] = d[y];
  }
  std::vector<double> out(h * w);
  f.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = g[y * w + x];
    detail::distance_1d(f, d);
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = d[x];
  }
  return out;
}

struct HausdorffResult {
  double value = 0;
  bool empty = false;  // a foreground was empty; value is the image diagonal
};

/// Symmetric Hausdorff distance in pixels between the foreground boundary
/// sets of two masks.
inline HausdorffResult hausdorff(const SegmentationMask& pred, const SegmentationMask& ref) {
  require_same_extent(pred, ref);
  const std::size_t h = pred.height, w = pred.width;
  const auto bp = boundary_map(pred);
  const auto br = boundary_map(ref);
  const bool ep = std::find(bp.begin(), bp.end(), 1) == bp.end();
  const bool er = std::find(br.begin(), br.end(), 1) == br.end();
  if (ep || er) {
    return {std::sqrt(static_cast<double>(h * h + w * w)), true};
  }
  const auto dr = squared_distance_transform(br, h, w);
  const auto dp = squared_distance_transform(bp, h, w);
  double worst = 0;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (bp[i]) worst = std::max(worst, dr[i]);
    if (br[i]) worst = std::max(worst, dp[i]);
  }
  return {std::sqrt(worst), false};
}

struct RadResult {
  double value = 0;      // percent, signed
  bool defined = true;   // false when the reference foreground is empty
};

inline std::uint64_t foreground_area(const SegmentationMask& m) {
  return static_cast<std::uint64_t>(std::count_if(m.labels.begin(), m.labels.end(), [](std::int32_t v) { return v != 0; }));
}

/// Relative area difference 100 (area_pred - area_ref) / area_ref.
inline RadResult rad(const SegmentationMask& pred, const SegmentationMask& ref) {
  require_same_extent(pred, ref);
  const std::uint64_t ap = foreground_area(pred), ar = foreground_area(ref);
  if (ar == 0) return {0.0, false};
  return {100.0 * (static_cast<double>(ap) - static_cast<double>(ar)) / static_cast<double>(ar), true};
}

/// Dataset-level report: every score is the ordered mean of per-image
/// scores. mean_dice/mean_iou average over all classes, or over the
/// foreground classes with `foreground_only`. Precision and recall are
/// taken on the foreground class (macro-averaged over foreground classes
/// when there are several).
struct MetricsReport {
  std::size_t num_classes = 0;
  std::size_t images = 0;
  bool foreground_only = false;
  std::vector<double> dice;
  std::vector<double> iou;
  double mean_dice = 0;
  double mean_iou = 0;
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double hausdorff = 0;
  std::size_t hausdorff_empty = 0;  // images scored with the diagonal sentinel
  double rad = 0;
  std::size_t rad_undefined = 0;    // images with an empty reference, excluded from rad
};

class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::size_t num_classes, bool foreground_only = false)
      : num_classes_(num_classes), foreground_only_(foreground_only), dice_(num_classes, 0.0), iou_(num_classes, 0.0) {
    if (num_classes < 2) throw ValueError("metrics need at least two classes");
  }

  void add(const SegmentationMask& pred, const SegmentationMask& ref) {
    const auto stats = confusion_stats(pred, ref, num_classes_);
    for (std::size_t c = 0; c < num_classes_; ++c) {
      dice_[c] += lmnet::dice(stats[c]);
      iou_[c] += lmnet::iou(stats[c]);
    }
    accuracy_ += lmnet::accuracy(stats);
    double p = 0, r = 0;
    for (std::size_t c = 1; c < num_classes_; ++c) {
      p += lmnet::precision(stats[c]);
      r += lmnet::recall(stats[c]);
    }
    precision_ += p / static_cast<double>(num_classes_ - 1);
    recall_ += r / static_cast<double>(num_classes_ - 1);
    const HausdorffResult hd = lmnet::hausdorff(pred, ref);
    hausdorff_ += hd.value;
    if (hd.empty) ++hausdorff_empty_;
    const RadResult ra = lmnet::rad(pred, ref);
    if (ra.defined) {
      rad_ += ra.value;
      ++rad_count_;
    } else {
      ++rad_undefined_;
    }
    ++images_;
  }

  MetricsReport report() const {
    MetricsReport r;
    r.num_classes = num_classes_;
    r.images = images_;
    r.foreground_only = foreground_only_;
    const double n = images_ ? static_cast<double>(images_) : 1.0;
    r.dice.resize(num_classes_);
    r.iou.resize(num_classes_);
    for (std::size_t c = 0; c < num_classes_; ++c) {
      r.dice[c] = images_ ? dice_[c] / n : 0.0;
      r.iou[c] = images_ ? iou_[c] / n : 0.0;
    }
    const std::size_t first = foreground_only_ ? 1 : 0;
    double md = 0, mi = 0;
    for (std::size_t c = first; c < num_classes_; ++c) {
      md += r.dice[c];
      mi += r.iou[c];
    }
    r.mean_dice = md / static_cast<double>(num_classes_ - first);
    r.mean_iou = mi / static_cast<double>(num_classes_ - first);
    r.accuracy = accuracy_ / n;
    r.precision = precision_ / n;
    r.recall = recall_ / n;
    r.hausdorff = hausdorff_ / n;
    r.hausdorff_empty = hausdorff_empty_;
    r.rad = rad_count_ ? rad_ / static_cast<double>(rad_count_) : 0.0;
    r.rad_undefined = rad_undefined_;
    return r;
  }

 private:
  std::size_t num_classes_;
  bool foreground_only_;
  std::vector<double> dice_, iou_;
  double accuracy_ = 0, precision_ = 0, recall_ = 0, hausdorff_ = 0, rad_ = 0;
  std::size_t images_ = 0, hausdorff_empty_ = 0, rad_count_ = 0, rad_undefined_ = 0;
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"num_classes", r.num_classes},
                     {"images", r.images},
                     {"foreground_only", r.foreground_only},
                     {"dice", r.dice},
                     {"iou", r.iou},
                     {"mean_dice", r.mean_dice},
                     {"mean_iou", r.mean_iou},
                     {"accuracy", r.accuracy},
                     {"precision", r.precision},
                     {"recall", r.recall},
                     {"hausdorff", r.hausdorff},
                     {"hausdorff_empty", r.hausdorff_empty},
                     {"rad", r.rad},
                     {"rad_undefined", r.rad_undefined}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("num_classes").get_to(r.num_classes);
  j.at("images").get_to(r.images);
  j.at("foreground_only").get_to(r.foreground_only);
  j.at("dice").get_to(r.dice);
  j.at("iou").get_to(r.iou);
  j.at("mean_dice").get_to(r.mean_dice);
  j.at("mean_iou").get_to(r.mean_iou);
  j.at("accuracy").get_to(r.accuracy);
  j.at("precision").get_to(r.precision);
  j.at("recall").get_to(r.recall);
  j.at("hausdorff").get_to(r.hausdorff);
  j.at("hausdorff_empty").get_to(r.hausdorff_empty);
  j.at("rad").get_to(r.rad);
  j.at("rad_undefined").get_to(r.rad_undefined);
}

}  // namespace lmnet
