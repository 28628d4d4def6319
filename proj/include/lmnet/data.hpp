#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmnet/errors.hpp"
#include "lmnet/json_keys.hpp"
#include "lmnet/image_io.hpp"
#include "lmnet/metrics.hpp"
#include "lmnet/nn_ops.hpp"
#include "lmnet/tensor.hpp"

namespace lmnet {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    default:
      return "test";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValueError("unknown split '" + s + "'");
}

struct DatasetEntry {
  std::filesystem::path image;
  std::filesystem::path mask;
  Split split = Split::train;
};

/// Image/mask pairs with their split, the seed the splits and per-item
/// augmentation streams derive from, and the mask value → class map.
struct DatasetManifest {
  std::vector<DatasetEntry> entries;
  std::uint64_t seed = 0;
  std::map<int, int> palette{{0, 0}, {255, 1}};

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(i);
    return out;
  }

  std::size_t num_classes() const {
    int top = 0;
    for (const auto& [value, cls] : palette) top = std::max(top, cls);
    return static_cast<std::size_t>(top) + 1;
  }
};

/// Partition of n items into train/val/test by a seeded shuffle. The first
/// round(train·n) shuffled items train, the next round(val·n) validate and
/// the rest test.
inline std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed, double train = 0.8, double val = 0.1) {
  if (train < 0 || val < 0 || train + val > 1) throw ValueError("split ratios must be non-negative and sum to <= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(val * static_cast<double>(n))));
  std::vector<Split> out(n, Split::test);
  for (std::size_t k = 0; k < n; ++k) {
    if (k < n_train)
      out[order[k]] = Split::train;
    else if (k < n_train + n_val)
      out[order[k]] = Split::val;
  }
  return out;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m, const std::filesystem::path& base = {}) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    const auto rel = [&](const std::filesystem::path& p) {
      return base.empty() ? p.generic_string() : p.lexically_relative(base).generic_string();
    };
    entries.push_back({{"image", rel(e.image)}, {"mask", rel(e.mask)}, {"split", split_name(e.split)}});
  }
  nlohmann::json palette = nlohmann::json::object();
  for (const auto& [value, cls] : m.palette) palette[std::to_string(value)] = cls;
  return {{"seed", m.seed}, {"palette", palette}, {"entries", entries}};
}

/// Parses a manifest; relative paths resolve against `base`.
inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  DatasetManifest m;
  try {
    m.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("palette")) {
      m.palette.clear();
      for (const auto& [key, cls] : j.at("palette").items()) {
        const int value = std::stoi(key);
        if (value < 0 || value > 255) throw ValueError("palette value " + key + " is not an 8-bit mask value");
        const int c = cls.get<int>();
        if (c < 0) throw ValueError("palette class for value " + key + " is negative");
        m.palette[value] = c;
      }
    }
    for (const auto& e : j.at("entries")) {
      DatasetEntry d;
      d.image = e.at("image").get<std::string>();
      d.mask = e.at("mask").get<std::string>();
      if (!base.empty()) {
        if (d.image.is_relative()) d.image = base / d.image;
        if (d.mask.is_relative()) d.mask = base / d.mask;
      }
      d.split = parse_split(e.value("split", std::string("train")));
      m.entries.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("invalid manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ValueError("invalid manifest: palette keys must be integers");
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_json(m, path.parent_path()).dump(2) << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Samples

template <class T>
struct Sample {
  Tensor<T> image;  // [3, H, W], values in [0, 1]
  SegmentationMask mask;
};

/// Bilinear resize of a [C, H, W] image (half-pixel centres).
template <class T>
Tensor<T> resize_image(const Tensor<T>& image, std::size_t h, std::size_t w) {
  if (image.dim(1) == h && image.dim(2) == w) return image;
  NoGradGuard guard;
  Tensor<T> batched = image.reshape({1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor<T> out = bilinear_resize(constant(std::move(batched)), h, w).value();
  return out.reshape({image.dim(0), h, w});
}

/// Nearest-neighbour resize; output pixel y samples source row
/// floor((y + 0.5) · H / h), so no label is ever invented.
inline SegmentationMask resize_mask(const SegmentationMask& m, std::size_t h, std::size_t w) {
  if (m.height == h && m.width == w) return m;
  SegmentationMask out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto sy = std::min(m.height - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) *
                                                                    static_cast<double>(m.height) /
                                                                    static_cast<double>(h)));
    for (std::size_t x = 0; x < w; ++x) {
      const auto sx = std::min(m.width - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) *
                                                                     static_cast<double>(m.width) /
                                                                     static_cast<double>(w)));
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

template <class T>
Tensor<T> image_to_tensor(const Image8& img) {
  if (img.channels != 3) throw ValueError("expected an RGB image");
  Tensor<T> t({3, img.height, img.width});
  const std::size_t plane = img.height * img.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + i] = static_cast<T>(img.pixels[i * 3 + c]) / T{255};
  return t;
}

template <class T>
Image8 tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_image expects [3, H, W]");
  const std::size_t h = t.dim(1), w = t.dim(2), plane = h * w;
  Image8 img{h, w, 3, std::vector<std::uint8_t>(plane * 3)};
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(t[c * plane + i]), 0.0, 1.0);
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

inline SegmentationMask map_mask(const Image8& values, const std::map<int, int>& palette, const std::string& what) {
  SegmentationMask m(values.height, values.width);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto it = palette.find(values.pixels[i]);
    if (it == palette.end()) {
      throw ValueError(what + ": mask value " + std::to_string(values.pixels[i]) + " is not in the palette");
    }
    m.labels[i] = it->second;
  }
  return m;
}

/// Reads one pair, resizing the image (bilinear, scaled to [0,1]) and the
/// mask (nearest, palette-mapped) to h × w.
template <class T>
Sample<T> load_pair(const DatasetEntry& e, const std::map<int, int>& palette, std::size_t h, std::size_t w) {
  if (!std::filesystem::exists(e.image)) throw IoError("missing image " + e.image.string());
  if (!std::filesystem::exists(e.mask)) throw IoError("missing mask " + e.mask.string());
  Sample<T> s;
  s.image = resize_image(image_to_tensor<T>(read_image_rgb(e.image)), h, w);
  s.mask = resize_mask(map_mask(read_mask_values(e.mask), palette, e.mask.string()), h, w);
  return s;
}

template <class T>
std::vector<Sample<T>> load_split(const DatasetManifest& m, Split split, std::size_t h, std::size_t w) {
  std::vector<Sample<T>> out;
  for (std::size_t i : m.indices(split)) out.push_back(load_pair<T>(m.entries[i], m.palette, h, w));
  return out;
}

/// Per-class pixel counts over a set of samples.
template <class T>
std::vector<std::uint64_t> class_pixel_counts(const std::vector<Sample<T>>& samples, std::size_t num_classes) {
  std::vector<std::uint64_t> counts(num_classes, 0);
  for (const auto& s : samples)
    for (std::int32_t v : s.mask.labels) {
      if (v < 0 || static_cast<std::size_t>(v) >= num_classes) throw ValueError("label outside class range");
      ++counts[static_cast<std::size_t>(v)];
    }
  return counts;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  double rotate_p = 0.5;
  double rotate_max_deg = 30.0;
  double scale_p = 0.5;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double translate_p = 0.5;
  double translate_frac = 0.1;
  double blur_p = 0.2;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.5;

  static AugmentConfig none() {
    AugmentConfig c;
    c.hflip_p = c.vflip_p = c.rotate_p = c.scale_p = c.translate_p = c.blur_p = 0.0;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"hflip_p", c.hflip_p},         {"vflip_p", c.vflip_p},
       {"rotate_p", c.rotate_p},       {"rotate_max_deg", c.rotate_max_deg},
       {"scale_p", c.scale_p},         {"scale_min", c.scale_min},
       {"scale_max", c.scale_max},     {"translate_p", c.translate_p},
       {"translate_frac", c.translate_frac}, {"blur_p", c.blur_p},
       {"blur_sigma_min", c.blur_sigma_min}, {"blur_sigma_max", c.blur_sigma_max}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  detail::reject_unknown_keys(j,
                              {"hflip_p", "vflip_p", "rotate_p", "rotate_max_deg", "scale_p", "scale_min", "scale_max",
                               "translate_p", "translate_frac", "blur_p", "blur_sigma_min", "blur_sigma_max"},
                              "augment config");
  const AugmentConfig d;
  c.hflip_p = j.value("hflip_p", d.hflip_p);
  c.vflip_p = j.value("vflip_p", d.vflip_p);
  c.rotate_p = j.value("rotate_p", d.rotate_p);
  c.rotate_max_deg = j.value("rotate_max_deg", d.rotate_max_deg);
  c.scale_p = j.value("scale_p", d.scale_p);
  c.scale_min = j.value("scale_min", d.scale_min);
  c.scale_max = j.value("scale_max", d.scale_max);
  c.translate_p = j.value("translate_p", d.translate_p);
  c.translate_frac = j.value("translate_frac", d.translate_frac);
  c.blur_p = j.value("blur_p", d.blur_p);
  c.blur_sigma_min = j.value("blur_sigma_min", d.blur_sigma_min);
  c.blur_sigma_max = j.value("blur_sigma_max", d.blur_sigma_max);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream for one item in one epoch, so results never depend
/// on processing order.
inline std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t epoch = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed + index) ^ splitmix64(epoch + 0x632be59bd9b4e019ULL)));
}

template <class T>
void flip_horizontal(Tensor<T>& image, SegmentationMask& mask) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y) std::reverse(image.ptr() + (k * h + y) * w, image.ptr() + (k * h + y + 1) * w);
  for (std::size_t y = 0; y < h; ++y)
    std::reverse(mask.labels.begin() + static_cast<std::ptrdiff_t>(y * w),
                 mask.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
}

template <class T>
void flip_vertical(Tensor<T>& image, SegmentationMask& mask) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h / 2; ++y)
      std::swap_ranges(image.ptr() + (k * h + y) * w, image.ptr() + (k * h + y + 1) * w,
                       image.ptr() + (k * h + h - 1 - y) * w);
  for (std::size_t y = 0; y < h / 2; ++y)
    std::swap_ranges(mask.labels.begin() + static_cast<std::ptrdiff_t>(y * w),
                     mask.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * w),
                     mask.labels.begin() + static_cast<std::ptrdiff_t>((h - 1 - y) * w));
}

/// Similarity transform about the image centre: rotation by `degrees`,
/// isotropic `scale`, then a shift of (tx, ty) pixels. Output pixels are
/// pulled back through the inverse map; the image is sampled bilinearly,
/// the mask by nearest neighbour, and anything outside the frame is 0.
struct Affine {
  double degrees = 0, scale = 1, tx = 0, ty = 0;
};

template <class T>
void warp_affine(Tensor<T>& image, SegmentationMask& mask, const Affine& a) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cx = static_cast<double>(w) / 2, cy = static_cast<double>(h) / 2;
  const double rad = a.degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  Tensor<T> out(image.shape());
  SegmentationMask mout(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // Continuous coordinates with pixel centres at i + 0.5.
      const double px = static_cast<double>(x) + 0.5 - cx - a.tx;
      const double py = static_cast<double>(y) + 0.5 - cy - a.ty;
      const double sx = (cs * px + sn * py) / a.scale + cx;
      const double sy = (-sn * px + cs * py) / a.scale + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      if (fx >= 0 && fy >= 0 && fx < static_cast<double>(w) && fy < static_cast<double>(h)) {
        mout.at(y, x) = mask.at(static_cast<std::size_t>(fy), static_cast<std::size_t>(fx));
      }
      const double u = sx - 0.5, v = sy - 0.5;
      const double x0 = std::floor(u), y0 = std::floor(v);
      const double ax = u - x0, ay = v - y0;
      const auto sample = [&](std::size_t k, double yy, double xx) -> double {
        if (xx < 0 || yy < 0 || xx >= static_cast<double>(w) || yy >= static_cast<double>(h)) return 0.0;
        return static_cast<double>(image[(k * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)]);
      };
      for (std::size_t k = 0; k < c; ++k) {
        const double val = (1 - ay) * ((1 - ax) * sample(k, y0, x0) + ax * sample(k, y0, x0 + 1)) +
                           ay * ((1 - ax) * sample(k, y0 + 1, x0) + ax * sample(k, y0 + 1, x0 + 1));
        out[(k * h + y) * w + x] = static_cast<T>(val);
      }
    }
  image = std::move(out);
  mask = std::move(mout);
}

/// Separable Gaussian blur with radius ceil(3σ); borders replicate.
template <class T>
void gaussian_blur(Tensor<T>& image, double sigma) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2 * sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : kernel) v /= total;
  const auto clampi = [](std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  std::vector<double> tmp(h * w);
  for (std::size_t k = 0; k < c; ++k) {
    T* p = image.ptr() + k * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 static_cast<double>(p[y * w + clampi(static_cast<std::ptrdiff_t>(x) + i, w)]);
        tmp[y * w + x] = acc;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[clampi(static_cast<std::ptrdiff_t>(y) + i, h) * w + x];
        p[y * w + x] = static_cast<T>(acc);
      }
  }
}

/// Random flips, similarity warp and blur, each applied with its own
/// probability. Every decision and parameter is drawn from `rng` in a fixed
/// order whether or not the op fires.
template <class T>
void augment(Tensor<T>& image, SegmentationMask& mask, std::mt19937_64& rng, const AugmentConfig& cfg = {}) {
  if (image.rank() != 3 || image.dim(1) != mask.height || image.dim(2) != mask.width) {
    throw ShapeError("augment: image " + shape_string(image.shape()) + " and mask extents differ");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const bool hflip = unit(rng) < cfg.hflip_p;
  const bool vflip = unit(rng) < cfg.vflip_p;
  const bool rotate = unit(rng) < cfg.rotate_p;
  const double degrees = draw(-cfg.rotate_max_deg, cfg.rotate_max_deg);
  const bool scale = unit(rng) < cfg.scale_p;
  const double factor = draw(cfg.scale_min, cfg.scale_max);
  const bool translate = unit(rng) < cfg.translate_p;
  const double tx = draw(-cfg.translate_frac, cfg.translate_frac) * static_cast<double>(mask.width);
  const double ty = draw(-cfg.translate_frac, cfg.translate_frac) * static_cast<double>(mask.height);
  const bool blur = unit(rng) < cfg.blur_p;
  const double sigma = draw(cfg.blur_sigma_min, cfg.blur_sigma_max);

  if (hflip) flip_horizontal(image, mask);
  if (vflip) flip_vertical(image, mask);
  if (rotate || scale || translate) {
    Affine a;
    if (rotate) a.degrees = degrees;
    if (scale) a.scale = factor;
    if (translate) {
      a.tx = tx;
      a.ty = ty;
    }
    warp_affine(image, mask, a);
  }
  if (blur) gaussian_blur(image, sigma);
}

// ---------------------------------------------------------------------------
// Synthetic shapes

struct SynthConfig {
  std::size_t n = 200;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  // Per-image foreground fraction is kept inside these bounds by redrawing
  // the shapes.
  double min_foreground = 0.05;
  double max_foreground = 0.5;
};

struct SynthShape {
  bool ellipse = true;
  double cx = 0, cy = 0, a = 0, b = 0, angle = 0;  // centre, half-axes, rotation (radians)

  // Pixel centre (x + 0.5, y + 0.5) inside the shape.
  bool contains(std::size_t x, std::size_t y) const {
    const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
    const double u = std::cos(angle) * dx + std::sin(angle) * dy;
    const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
    if (ellipse) return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    return std::abs(u) <= a && std::abs(v) <= b;
  }
};

struct SynthImage {
  Image8 image;
  Image8 mask;  // 0 background, 255 foreground
  std::vector<SynthShape> shapes;
};

/// One image of 1-2 random ellipses/rectangles over a textured noise
/// background. The mask is the exact rasterization of the shapes at pixel
/// centres.
inline SynthImage synth_image(std::size_t size, std::mt19937_64& rng, const SynthConfig& cfg = {}) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(size);
  SynthImage out;
  std::vector<std::uint8_t> fg(size * size);
  for (int attempt = 0;; ++attempt) {
    out.shapes.clear();
    const int count = unit(rng) < 0.5 ? 1 : 2;
    for (int i = 0; i < count; ++i) {
      SynthShape sh;
      sh.ellipse = unit(rng) < 0.5;
      sh.a = s * (0.08 + 0.17 * unit(rng));
      sh.b = s * (0.08 + 0.17 * unit(rng));
      sh.cx = s * (0.2 + 0.6 * unit(rng));
      sh.cy = s * (0.2 + 0.6 * unit(rng));
      sh.angle = std::numbers::pi * unit(rng);
      out.shapes.push_back(sh);
    }
    std::size_t area = 0;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        bool inside = false;
        for (const auto& sh : out.shapes) inside = inside || sh.contains(x, y);
        fg[y * size + x] = inside ? 1 : 0;
        area += inside;
      }
    const double frac = static_cast<double>(area) / (s * s);
    if ((frac >= cfg.min_foreground && frac <= cfg.max_foreground) || attempt >= 100) break;
  }

  // Background: smooth value noise on a coarse grid plus fine grain, in a
  // random base colour; the shapes get a different colour and their own
  // grain so that texture alone is not a giveaway.
  const std::size_t grid = 5;
  std::vector<double> coarse(grid * grid);
  for (auto& v : coarse) v = unit(rng);
  std::array<double, 3> bg{}, fgc{};
  for (auto& v : bg) v = 0.2 + 0.5 * unit(rng);
  for (std::size_t k = 0; k < 3; ++k) {
    const double shift = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.2 + 0.2 * unit(rng));
    fgc[k] = std::clamp(bg[k] + shift, 0.05, 0.95);
  }
  std::normal_distribution<double> grain(0.0, 0.06);
  out.image = Image8{size, size, 3, std::vector<std::uint8_t>(size * size * 3)};
  out.mask = Image8{size, size, 1, std::vector<std::uint8_t>(size * size)};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double gx = (static_cast<double>(x) + 0.5) / s * static_cast<double>(grid - 1);
      const double gy = (static_cast<double>(y) + 0.5) / s * static_cast<double>(grid - 1);
      const std::size_t ix = std::min<std::size_t>(grid - 2, static_cast<std::size_t>(gx));
      const std::size_t iy = std::min<std::size_t>(grid - 2, static_cast<std::size_t>(gy));
      const double fx = gx - static_cast<double>(ix), fy = gy - static_cast<double>(iy);
      const double tex = (1 - fy) * ((1 - fx) * coarse[iy * grid + ix] + fx * coarse[iy * grid + ix + 1]) +
                         fy * ((1 - fx) * coarse[(iy + 1) * grid + ix] + fx * coarse[(iy + 1) * grid + ix + 1]);
      const bool inside = fg[y * size + x] != 0;
      const double g = grain(rng);
      for (std::size_t k = 0; k < 3; ++k) {
        const double base = inside ? fgc[k] : bg[k];
        const double v = base + 0.25 * (tex - 0.5) + g;
        out.image.pixels[(y * size + x) * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
      }
      out.mask.pixels[y * size + x] = inside ? 255 : 0;
    }
  return out;
}

/// Writes images/NNNN.png, masks/NNNN.png and manifest.json under `dir`
/// and returns the manifest (palette {0: 0, 255: 1}, 0.8/0.1/0.1 splits).
inline DatasetManifest synth_shapes(const SynthConfig& cfg, const std::filesystem::path& dir) {
  if (cfg.n < 1) throw ValueError("synth_shapes needs n >= 1");
  if (cfg.size < 8) throw ValueError("synth_shapes needs size >= 8");
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.seed = cfg.seed;
  m.palette = {{0, 0}, {255, 1}};
  const auto splits = assign_splits(cfg.n, cfg.seed);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    auto rng = item_rng(cfg.seed, i);
    SynthImage s = synth_image(cfg.size, rng, cfg);
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    DatasetEntry e{dir / "images" / name, dir / "masks" / name, splits[i]};
    write_png(e.image, s.image);
    write_png(e.mask, s.mask);
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

}  // namespace lmnet
