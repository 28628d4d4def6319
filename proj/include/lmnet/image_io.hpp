#pragma once

#include <png.h>

#include <array>
#include <cctype>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "lmnet/errors.hpp"

// 8-bit image files. PNG goes through libpng; BMP (uncompressed 8/24/32
// bit) is read directly. Pixels are interleaved, rows top to bottom.

namespace lmnet {

struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const Image8&) const = default;
};

namespace detail {

class PngFile {
 public:
  PngFile(const std::filesystem::path& path, const char* mode) : f_(std::fopen(path.string().c_str(), mode)) {}
  ~PngFile() {
    if (f_) std::fclose(f_);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
  std::FILE* get() const { return f_; }
  bool close() {
    const bool ok = std::fclose(f_) == 0;
    f_ = nullptr;
    return ok;
  }

 private:
  std::FILE* f_;
};

// Decoded PNG before any channel conversion. `palette_indices` is true
// when the pixels are raw palette indices (one channel).
struct RawPng {
  Image8 image;
  bool palette_indices = false;
  std::vector<std::array<std::uint8_t, 3>> palette;
};

// With keep_indices, palette images are returned as indices; otherwise
// they are expanded to RGB. 16-bit samples are reduced to 8, low bit
// depths expanded, alpha dropped.
inline bool read_png_raw(std::FILE* fp, bool keep_indices, RawPng& out, std::string& error) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    error = "libpng initialization failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    error = "libpng initialization failed";
    return false;
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    error = "corrupt or unsupported PNG";
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  out.palette_indices = color == PNG_COLOR_TYPE_PALETTE && keep_indices;
  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_colorp pal = nullptr;
    int count = 0;
    if (png_get_PLTE(png, info, &pal, &count)) {
      for (int i = 0; i < count; ++i) out.palette.push_back({pal[i].red, pal[i].green, pal[i].blue});
    }
    if (out.palette_indices) {
      if (depth < 8) png_set_packing(png);
    } else {
      png_set_palette_to_rgb(png);
    }
  }
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  const std::size_t ch = png_get_channels(png, info);
  out.image.height = h;
  out.image.width = w;
  out.image.channels = ch;
  out.image.pixels.resize(h * w * ch);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = out.image.pixels.data() + y * w * ch;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool write_png_raw(std::FILE* fp, const Image8& img, int color_type,
                          const std::vector<std::array<std::uint8_t, 3>>* palette, std::string& error) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    error = "libpng initialization failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    error = "libpng initialization failed";
    return false;
  }
  std::vector<png_color> pal;
  std::vector<png_bytep> rows(img.height);
  if (palette) {
    for (const auto& c : *palette) pal.push_back(png_color{c[0], c[1], c[2]});
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    error = "PNG encoding failed";
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline std::uint32_t le32(const std::string& b, std::size_t at) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3])) << 24;
}

inline std::uint16_t le16(const std::string& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                    static_cast<unsigned char>(b[at + 1]) << 8);
}

// Uncompressed BMP. 8-bit files keep their indices when `keep_indices`.
inline RawPng read_bmp(const std::filesystem::path& path, bool keep_indices) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw FormatError(path.string() + ": not a BMP file");
  const std::uint32_t data_off = le32(b, 10);
  const std::uint32_t header = le32(b, 14);
  const auto width = static_cast<std::int32_t>(le32(b, 18));
  const auto height = static_cast<std::int32_t>(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (width <= 0 || height == 0 || (compression != 0 && compression != 3) || (bpp != 8 && bpp != 24 && bpp != 32)) {
    throw FormatError(path.string() + ": unsupported BMP layout");
  }
  const std::size_t w = static_cast<std::size_t>(width);
  const bool bottom_up = height > 0;
  const std::size_t h = static_cast<std::size_t>(bottom_up ? height : -height);
  const std::size_t stride = ((w * bpp + 31) / 32) * 4;
  if (data_off + stride * h > b.size()) throw FormatError(path.string() + ": truncated BMP");
  RawPng out;
  if (bpp == 8) {
    std::uint32_t colors = le32(b, 46);
    if (colors == 0) colors = 256;
    const std::size_t pal_off = 14 + header;
    for (std::uint32_t i = 0; i < colors && pal_off + 4 * i + 3 < b.size(); ++i) {
      out.palette.push_back({static_cast<std::uint8_t>(b[pal_off + 4 * i + 2]),
                             static_cast<std::uint8_t>(b[pal_off + 4 * i + 1]),
                             static_cast<std::uint8_t>(b[pal_off + 4 * i])});
    }
  }
  out.palette_indices = bpp == 8 && keep_indices;
  const std::size_t ch = out.palette_indices ? 1 : 3;
  out.image = Image8{h, w, ch, std::vector<std::uint8_t>(h * w * ch)};
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t src_row = bottom_up ? h - 1 - y : y;
    const std::size_t base = data_off + src_row * stride;
    for (std::size_t x = 0; x < w; ++x) {
      std::uint8_t* dst = out.image.pixels.data() + (y * w + x) * ch;
      if (bpp == 8) {
        const auto idx = static_cast<std::uint8_t>(b[base + x]);
        if (out.palette_indices) {
          dst[0] = idx;
        } else {
          if (idx >= out.palette.size()) throw FormatError(path.string() + ": palette index out of range");
          std::memcpy(dst, out.palette[idx].data(), 3);
        }
      } else {
        const std::size_t px = base + x * (bpp / 8);
        dst[0] = static_cast<std::uint8_t>(b[px + 2]);
        dst[1] = static_cast<std::uint8_t>(b[px + 1]);
        dst[2] = static_cast<std::uint8_t>(b[px]);
      }
    }
  }
  return out;
}

inline bool has_bmp_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".bmp";
}

inline RawPng read_raw(const std::filesystem::path& path, bool keep_indices) {
  if (has_bmp_extension(path)) return read_bmp(path, keep_indices);
  PngFile f(path, "rb");
  if (!f.get()) throw IoError("cannot open " + path.string());
  unsigned char sig[8] = {};
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + ": not a PNG file");
  }
  std::rewind(f.get());
  RawPng raw;
  std::string error;
  if (!read_png_raw(f.get(), keep_indices, raw, error)) throw FormatError(path.string() + ": " + error);
  return raw;
}

}  // namespace detail

/// Reads a PNG or BMP as 8-bit RGB (gray is replicated).
inline Image8 read_image_rgb(const std::filesystem::path& path) {
  detail::RawPng raw = detail::read_raw(path, false);
  Image8& img = raw.image;
  if (img.channels == 3) return img;
  if (img.channels != 1) throw FormatError(path.string() + ": unexpected channel count");
  Image8 rgb{img.height, img.width, 3, std::vector<std::uint8_t>(img.height * img.width * 3)};
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    rgb.pixels[3 * i] = rgb.pixels[3 * i + 1] = rgb.pixels[3 * i + 2] = img.pixels[i];
  }
  return rgb;
}

/// Reads a single-channel mask. Palette files yield their indices; RGB
/// files are accepted only when every pixel is gray.
inline Image8 read_mask_values(const std::filesystem::path& path) {
  detail::RawPng raw = detail::read_raw(path, true);
  Image8& img = raw.image;
  if (img.channels == 1) return img;
  Image8 gray{img.height, img.width, 1, std::vector<std::uint8_t>(img.height * img.width)};
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const std::uint8_t* p = img.pixels.data() + i * img.channels;
    if (p[0] != p[1] || p[1] != p[2]) throw FormatError(path.string() + ": mask is not single-channel");
    gray.pixels[i] = p[0];
  }
  return gray;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  int color;
  if (img.channels == 1)
    color = PNG_COLOR_TYPE_GRAY;
  else if (img.channels == 3)
    color = PNG_COLOR_TYPE_RGB;
  else
    throw ValueError("write_png supports 1 or 3 channels");
  if (img.pixels.size() != img.height * img.width * img.channels) throw ValueError("write_png: pixel buffer size");
  detail::PngFile f(path, "wb");
  if (!f.get()) throw IoError("cannot write " + path.string());
  std::string error;
  if (!detail::write_png_raw(f.get(), img, color, nullptr, error)) throw IoError(path.string() + ": " + error);
  if (!f.close()) throw IoError("short write to " + path.string());
}

/// Writes class indices as an 8-bit palette PNG.
inline void write_palette_png(const std::filesystem::path& path, const Image8& indices,
                              const std::vector<std::array<std::uint8_t, 3>>& palette) {
  if (indices.channels != 1) throw ValueError("palette PNG needs one channel of indices");
  if (palette.empty() || palette.size() > 256) throw ValueError("palette must have 1..256 entries");
  for (std::uint8_t v : indices.pixels) {
    if (v >= palette.size()) throw ValueError("index " + std::to_string(v) + " outside the palette");
  }
  detail::PngFile f(path, "wb");
  if (!f.get()) throw IoError("cannot write " + path.string());
  std::string error;
  if (!detail::write_png_raw(f.get(), indices, PNG_COLOR_TYPE_PALETTE, &palette, error)) {
    throw IoError(path.string() + ": " + error);
  }
  if (!f.close()) throw IoError("short write to " + path.string());
}

/// Default colours for class indices: black background, then white and a
/// few distinct hues.
inline std::vector<std::array<std::uint8_t, 3>> default_palette(std::size_t num_classes) {
  static const std::array<std::array<std::uint8_t, 3>, 8> base{{{0, 0, 0},
                                                                 {255, 255, 255},
                                                                 {230, 25, 75},
                                                                 {60, 180, 75},
                                                                 {0, 130, 200},
                                                                 {255, 225, 25},
                                                                 {145, 30, 180},
                                                                 {245, 130, 48}}};
  std::vector<std::array<std::uint8_t, 3>> p;
  for (std::size_t i = 0; i < num_classes; ++i) {
    if (i < base.size()) {
      p.push_back(base[i]);
    } else {
      const auto v = static_cast<std::uint8_t>((i * 37) % 256);
      p.push_back({v, static_cast<std::uint8_t>(255 - v), static_cast<std::uint8_t>((v * 7) % 256)});
    }
  }
  return p;
}

}  // namespace lmnet
