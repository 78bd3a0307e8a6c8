#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "parefine/errors.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

/// Raw 8-bit raster: 1 channel (P5) or 3 interleaved channels (P6).
struct PnmImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> bytes;
};

namespace pnm_detail {

class Cursor {
 public:
  Cursor(const std::vector<std::uint8_t>& data, std::size_t pos) : data_(data), pos_(pos) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ >= data_.size(); }

  void skip_space_and_comments() {
    while (!at_end()) {
      if (data_[pos_] == '#') {
        while (!at_end() && data_[pos_] != '\n') ++pos_;
      } else if (std::isspace(data_[pos_])) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (!at_end() && std::isdigit(data_[pos_])) {
      v = v * 10 + static_cast<std::size_t>(data_[pos_] - '0');
      if (v > (1u << 30)) throw FormatError(std::string("pnm: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("pnm: expected ") + what, start);
    return v;
  }

  void expect_single_space() {
    if (at_end() || !std::isspace(data_[pos_])) throw FormatError("pnm: expected whitespace before raster", pos_);
    ++pos_;
  }

 private:
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace pnm_detail

/// Parses binary PGM (P5) or PPM (P6) with maxval 255.
inline PnmImage parse_pnm(const std::vector<std::uint8_t>& data) {
  if (data.size() < 2 || data[0] != 'P' || (data[1] != '5' && data[1] != '6')) {
    throw FormatError("pnm: magic must be P5 or P6", 0);
  }
  PnmImage img;
  img.channels = data[1] == '5' ? 1 : 3;
  pnm_detail::Cursor cur(data, 2);
  if (data.size() < 3 || !std::isspace(data[2])) throw FormatError("pnm: expected whitespace after magic", 2);
  img.width = cur.read_uint("width");
  img.height = cur.read_uint("height");
  cur.skip_space_and_comments();
  const std::size_t maxval_at = cur.offset();
  const std::size_t maxval = cur.read_uint("maxval");
  if (maxval != 255) throw FormatError("pnm: unsupported maxval " + std::to_string(maxval) + " (only 255)", maxval_at);
  if (img.width == 0 || img.height == 0) throw FormatError("pnm: zero image extent", maxval_at);
  cur.expect_single_space();
  const std::size_t start = cur.offset();
  const std::size_t need = img.width * img.height * img.channels;
  if (data.size() - start < need) {
    throw FormatError("pnm: raster truncated, expected " + std::to_string(need) + " bytes", data.size());
  }
  img.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(start),
                   data.begin() + static_cast<std::ptrdiff_t>(start + need));
  return img;
}

inline PnmImage read_pnm(const std::filesystem::path& path) { return parse_pnm(pnm_detail::read_file(path)); }

inline std::vector<std::uint8_t> encode_pnm(const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw DimensionError("pnm: channels must be 1 or 3");
  if (img.bytes.size() != img.width * img.height * img.channels) throw DimensionError("pnm: raster size mismatch");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.bytes.begin(), img.bytes.end());
  return out;
}

inline void write_pnm(const std::filesystem::path& path, const PnmImage& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// C x H x W tensor with values byte / 255. Grayscale is replicated to three
/// channels when `rgb` is set.
template <typename T>
Tensor<T> to_tensor(const PnmImage& img, bool rgb = false) {
  const std::size_t C = (rgb ? 3 : img.channels), H = img.height, W = img.width, HW = H * W;
  Tensor<T> t({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t src_c = img.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < HW; ++i) t[c * HW + i] = static_cast<T>(img.bytes[i * img.channels + src_c]) / T(255);
  }
  return t;
}

/// Inverse of to_tensor: values clamped to [0, 1], scaled by 255 and rounded.
template <typename T>
PnmImage from_tensor(const Tensor<T>& t) {
  Shape s = t.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) throw DimensionError("pnm: expected 1 or 3 x H x W tensor, got " + shape_str(t.shape()));
  PnmImage img{s[2], s[1], s[0], {}};
  const std::size_t HW = img.width * img.height;
  img.bytes.resize(HW * img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < HW; ++i) {
      const double v = std::clamp(static_cast<double>(t[c * HW + i]), 0.0, 1.0);
      img.bytes[i * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

template <typename T>
Tensor<T> load_image(const std::filesystem::path& path, bool rgb = false) {
  return to_tensor<T>(read_pnm(path), rgb);
}

template <typename T>
void write_image(const std::filesystem::path& path, const Tensor<T>& t) {
  write_pnm(path, from_tensor(t));
}

}  // namespace parefine
