#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rdcssl/tensor.hpp"

namespace rdcssl {

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

// Little-endian byte sink.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    bytes_.insert(bytes_.end(), raw.begin(), raw.end());
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void put_floats(std::span<const float> values) {
    for (float v : values) put(v);
  }
  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Little-endian byte source that raises IntegrityError on truncation.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<float> get_floats(std::size_t n) {
    need(n * sizeof(float));
    std::vector<float> out(n);
    for (auto& v : out) v = get<float>();
    return out;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> span(std::size_t from, std::size_t to) const { return bytes_.subspan(from, to - from); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw IntegrityError(context_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                           std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()) + ")");
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// RDTN: "RDTN", u8 version, u8 rank, rank x u64 dims, row-major f32 payload.
inline constexpr std::string_view kTensorMagic = "RDTN";
inline constexpr std::uint8_t kTensorVersion = 1;

inline void encode_tensor(ByteWriter& w, const Tensor<float>& t) {
  w.put_bytes(kTensorMagic);
  w.put<std::uint8_t>(kTensorVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint64_t>(d);
  w.put_floats(t.data());
}

inline Tensor<float> decode_tensor(ByteReader& r) {
  if (r.get_bytes(4) != kTensorMagic) throw FormatError("tensor file: bad magic, expected \"RDTN\"");
  const auto version = r.get<std::uint8_t>();
  if (version != kTensorVersion) {
    throw FormatError("tensor file: unsupported version " + std::to_string(version));
  }
  const auto rank = r.get<std::uint8_t>();
  Shape shape(rank);
  for (auto& d : shape) d = r.get<std::uint64_t>();
  auto data = r.get_floats(numel(shape));
  return Tensor<float>::from(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  ByteWriter w;
  encode_tensor(w, t);
  write_file(path, w.bytes());
}

inline Tensor<float> load_tensor(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  ByteReader r(bytes, path.string());
  auto t = decode_tensor(r);
  if (r.remaining() != 0) throw IntegrityError(path.string() + ": trailing bytes after tensor payload");
  return t;
}

}  // namespace rdcssl
