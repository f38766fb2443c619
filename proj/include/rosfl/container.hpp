#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rosfl/param_set.hpp"

namespace rosfl {

enum class DType : std::uint8_t { F64 = 1, F32 = 2 };

inline std::size_t dtype_size(DType t) { return t == DType::F64 ? 8 : 4; }

/// A named tensor as it appears on disk and on the wire.
struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::variant<std::vector<double>, std::vector<float>> data;

  DType dtype() const { return data.index() == 0 ? DType::F64 : DType::F32; }
  std::size_t count() const {
    return std::visit([](const auto& v) { return v.size(); }, data);
  }

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  // Overwrite a previously written u32 (used for length prefixes).
  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  std::size_t size() const { return buf_.size(); }
  Bytes take() { return std::move(buf_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes buf_;
};

// Reads little-endian values; running past the end is a CorruptionError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const;
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_record(ByteWriter& w, const TensorRecord& rec);
TensorRecord read_record(ByteReader& r);

/// Checkpoint file: "RFCK", u8 version, u32 record count, records.
Bytes encode_checkpoint(std::span<const TensorRecord> records);
std::vector<TensorRecord> decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, std::span<const TensorRecord> records);
std::vector<TensorRecord> load_checkpoint(const std::filesystem::path& path);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

template <typename S>
TensorRecord to_record(std::string name, const Tensor<S>& t, DType dtype) {
  TensorRecord rec;
  rec.name = std::move(name);
  for (Index d : t.shape()) rec.shape.push_back(static_cast<std::uint32_t>(d));
  if (dtype == DType::F64) {
    rec.data = std::vector<double>(t.data(), t.data() + t.size());
  } else {
    rec.data = std::vector<float>(t.data(), t.data() + t.size());
  }
  return rec;
}

template <typename S>
Tensor<S> from_record(const TensorRecord& rec) {
  Shape shape(rec.shape.begin(), rec.shape.end());
  typename Tensor<S>::Vector v(static_cast<Index>(rec.count()));
  std::visit(
      [&](const auto& data) {
        for (std::size_t i = 0; i < data.size(); ++i) v[static_cast<Index>(i)] = static_cast<S>(data[i]);
      },
      rec.data);
  try {
    return Tensor<S>(std::move(shape), std::move(v));
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("record ") + rec.name + ": " + e.what());
  }
}

template <typename S>
std::vector<TensorRecord> to_records(const ParamSet<S>& params, DType dtype) {
  std::vector<TensorRecord> out;
  out.reserve(params.size());
  for (const auto& e : params) out.push_back(to_record(e.name, e.value, dtype));
  return out;
}

template <typename S>
ParamSet<S> from_records(std::span<const TensorRecord> records, Part part, std::uint32_t round = 0) {
  ParamSet<S> out(part, round);
  for (const auto& r : records) out.add(r.name, from_record<S>(r));
  return out;
}

template <typename S>
constexpr DType dtype_of() {
  return sizeof(S) == 8 ? DType::F64 : DType::F32;
}

}  // namespace rosfl
