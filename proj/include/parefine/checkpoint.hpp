#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "parefine/config.hpp"
#include "parefine/errors.hpp"
#include "parefine/param_store.hpp"

namespace parefine {

// Layout (all integers little-endian):
//   "PARF"  u32 version  u32 scalar_bytes
//   u64 n + n bytes of config text (to_text form)
//   u64 iteration  u64 seed  u64 rng_key  u64 rng_counter
//   u64 entry count, then per entry:
//     u32 n + name, u8 trainable, u32 rank, rank x u64 extents,
//     value, adam_m, adam_v as scalar_bytes-wide IEEE values.
// Gradients are not stored; they are zero between optimizer steps.
inline constexpr char kCheckpointMagic[4] = {'P', 'A', 'R', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  TrainConfig config;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
  ParamStore<T> params;
};

namespace ckpt_detail {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void scalars(const Tensor<T>& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if constexpr (sizeof(T) == 4) u32(std::bit_cast<std::uint32_t>(t[i]));
      else u64(std::bit_cast<std::uint64_t>(t[i]));
    }
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint: truncated while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  template <typename T>
  void scalars(Tensor<T>& t, std::uint32_t width, const char* what) {
    need(t.numel() * width, what);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (width == 4) t[i] = static_cast<T>(std::bit_cast<float>(u32(what)));
      else t[i] = static_cast<T>(std::bit_cast<double>(u64(what)));
    }
  }

 private:
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& c) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  ckpt_detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(sizeof(T));
  const std::string cfg = to_text(c.config);
  w.u64(cfg.size());
  w.bytes(cfg.data(), cfg.size());
  w.u64(c.iteration);
  w.u64(c.seed);
  w.u64(c.rng_key);
  w.u64(c.rng_counter);
  w.u64(c.params.size());
  for (const auto& e : c.params.entries()) {
    w.str32(e.name);
    w.u8(e.trainable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.u64(d);
    w.scalars(e.value);
    w.scalars(e.adam_m);
    w.scalars(e.adam_v);
  }
  return std::move(w.data());
}

/// Parses a checkpoint; values stored at another width are converted to T.
template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& data) {
  ckpt_detail::Reader r(data);
  if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), version_at);
  }
  const std::size_t width_at = r.offset();
  const std::uint32_t width = r.u32("scalar width");
  if (width != 4 && width != 8) throw FormatError("checkpoint: bad scalar width " + std::to_string(width), width_at);

  Checkpoint<T> c;
  const std::size_t cfg_at = r.offset();
  const std::uint64_t cfg_len = r.u64("config length");
  const std::string cfg_text = r.str(cfg_len, "config");
  try {
    c.config = parse_config(cfg_text);
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint: embedded config invalid: ") + e.what(), cfg_at);
  }
  c.iteration = r.u64("iteration");
  c.seed = r.u64("seed");
  c.rng_key = r.u64("rng key");
  c.rng_counter = r.u64("rng counter");
  const std::uint64_t count = r.u64("entry count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const std::uint32_t name_len = r.u32("entry name length");
    const std::string name = r.str(name_len, "entry name");
    const std::uint8_t trainable = r.u8("trainable flag");
    if (trainable > 1) throw FormatError("checkpoint: bad trainable flag for '" + name + "'", r.offset() - 1);
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'", r.offset() - 4);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64("extent");
      if (d > data.size()) throw FormatError("checkpoint: implausible extent for '" + name + "'", r.offset() - 8);
      numel *= d;
      if (numel > data.size()) throw FormatError("checkpoint: entry '" + name + "' larger than file", entry_at);
    }
    r.need(numel * 3 * width, "entry data");
    if (c.params.contains(name)) throw FormatError("checkpoint: duplicate entry '" + name + "'", entry_at);
    c.params.add(name, shape, trainable == 1);
    auto& e = c.params.entry(name);
    r.scalars(e.value, width, "value");
    r.scalars(e.adam_m, width, "adam_m");
    r.scalars(e.adam_v, width, "adam_v");
  }
  if (r.offset() != data.size()) throw FormatError("checkpoint: trailing bytes", r.offset());
  return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& c) {
  const auto bytes = encode_checkpoint(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_checkpoint_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_checkpoint_bytes(path));
}

/// Scalar width recorded in the header (4 or 8).
inline std::uint32_t checkpoint_scalar_bytes(const std::vector<std::uint8_t>& data) {
  ckpt_detail::Reader r(data);
  if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic", 0);
  r.u32("version");
  return r.u32("scalar width");
}

}  // namespace parefine
