#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmnet/errors.hpp"
#include "lmnet/model.hpp"

// LMW weight container:
//   "LMW1" | u64 LE header length | UTF-8 JSON header | tensor blobs
// The header holds {format_version, config, fused, dtype, tensors}, where
// tensors maps each name to {shape, offset, length} in insertion order;
// offsets count bytes from the first blob. Blobs are little-endian scalars
// stored back to back in table order.

namespace lmnet {

inline constexpr std::array<char, 4> kLmwMagic{'L', 'M', 'W', '1'};
inline constexpr int kLmwVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "LMW I/O assumes a little-endian host");

inline void write_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

/// Serializes the model to an in-memory LMW container.
template <class T>
std::string encode_lmw(LmNet<T>& net) {
  nlohmann::ordered_json table = nlohmann::ordered_json::object();
  std::string blobs;
  net.visit([&](const TensorSlot<T>& s) {
    const Tensor<T>& t = s.tensor();
    if (!all_finite(t)) throw ValueError("refusing to save non-finite tensor '" + s.name + "'");
    const std::size_t bytes = t.size() * sizeof(T);
    table[s.name] = {{"shape", t.shape()}, {"offset", blobs.size()}, {"length", bytes}};
    blobs.append(reinterpret_cast<const char*>(t.ptr()), bytes);
  });
  nlohmann::ordered_json header;
  header["format_version"] = kLmwVersion;
  header["config"] = nlohmann::json(net.config());
  header["fused"] = net.is_fused();
  header["dtype"] = dtype_name<T>();
  header["tensors"] = std::move(table);
  const std::string text = header.dump();
  std::string out(kLmwMagic.begin(), kLmwMagic.end());
  detail::write_u64_le(out, text.size());
  out += text;
  out += blobs;
  return out;
}

struct LmwHeader {
  LmNetConfig config;
  bool fused = false;
  std::string dtype;
  nlohmann::ordered_json tensors;
  std::size_t blob_start = 0;
};

inline LmwHeader parse_lmw_header(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kLmwMagic.data(), 4) != 0) {
    throw FormatError("not an LMW container (bad magic)");
  }
  const std::uint64_t len = detail::read_u64_le(bytes, 4);
  if (len > bytes.size() - 12) throw FormatError("truncated LMW header");
  LmwHeader h;
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupted LMW header: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kLmwVersion) {
      throw FormatError("unsupported LMW version " + j.at("format_version").dump());
    }
    h.config = j.at("config").get<LmNetConfig>();
    h.fused = j.at("fused").get<bool>();
    h.dtype = j.at("dtype").get<std::string>();
    h.tensors = j.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupted LMW header: ") + e.what());
  }
  if (h.dtype != "f32" && h.dtype != "f64") throw FormatError("unknown dtype '" + h.dtype + "'");
  h.blob_start = 12 + len;
  return h;
}

/// Rebuilds a model from an LMW container. Every tensor the config implies
/// must be present with the expected shape. With `expected` the model is
/// built from that config instead of the stored one, so any disagreement
/// surfaces as a ShapeError naming the offending tensor.
template <class T>
LmNet<T> decode_lmw(const std::string& bytes, const LmNetConfig* expected = nullptr) {
  LmwHeader h = parse_lmw_header(bytes);
  if (h.dtype != dtype_name<T>()) {
    throw FormatError("container dtype " + h.dtype + " does not match requested " + dtype_name<T>());
  }
  LmNet<T> net(expected ? *expected : h.config, 0, h.fused);
  std::size_t seen = 0;
  net.visit([&](const TensorSlot<T>& s) {
    if (!h.tensors.contains(s.name)) throw FormatError("missing tensor '" + s.name + "'");
    const auto& e = h.tensors.at(s.name);
    Tensor<T>& t = s.tensor();
    const Shape shape = e.at("shape").template get<Shape>();
    if (shape != t.shape()) {
      throw ShapeError("tensor '" + s.name + "' has shape " + shape_string(shape) + ", config expects " +
                       shape_string(t.shape()));
    }
    const std::uint64_t off = e.at("offset").template get<std::uint64_t>();
    const std::uint64_t length = e.at("length").template get<std::uint64_t>();
    if (length != t.size() * sizeof(T)) throw FormatError("tensor '" + s.name + "' has inconsistent byte length");
    if (h.blob_start + off + length > bytes.size()) throw FormatError("truncated LMW blob for '" + s.name + "'");
    std::memcpy(t.ptr(), bytes.data() + h.blob_start + off, length);
    ++seen;
  });
  if (seen != h.tensors.size()) throw FormatError("LMW container holds tensors the config does not define");
  net.set_mode(Mode::eval);
  return net;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

template <class T>
void save_weights(LmNet<T>& net, const std::filesystem::path& path) {
  write_file_bytes(path, encode_lmw(net));
}

template <class T>
LmNet<T> load_weights(const std::filesystem::path& path) {
  return decode_lmw<T>(read_file_bytes(path));
}

template <class T>
LmNet<T> load_weights(const std::filesystem::path& path, const LmNetConfig& expected) {
  return decode_lmw<T>(read_file_bytes(path), &expected);
}

}  // namespace lmnet
