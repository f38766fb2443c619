#include "rosfl/container.hpp"

#include <fstream>
#include <iterator>

namespace rosfl {

namespace {

constexpr std::uint8_t kCheckpointMagic[4] = {'R', 'F', 'C', 'K'};
constexpr std::uint8_t kCheckpointVersion = 1;
constexpr std::uint8_t kMaxRank = 8;

}  // namespace

void ByteReader::need(std::size_t n) const {
  if (n > remaining()) {
    throw CorruptionError("record data truncated: need " + std::to_string(n) + " bytes, " +
                          std::to_string(remaining()) + " left");
  }
}

void write_record(ByteWriter& w, const TensorRecord& rec) {
  if (rec.name.size() > 0xFFFF) throw ConfigError("record name too long: " + rec.name.substr(0, 32) + "...");
  if (rec.shape.size() > kMaxRank) throw ConfigError("record rank above 8: " + rec.name);
  std::size_t expect = 1;
  for (auto d : rec.shape) expect *= d;
  if (expect != rec.count()) throw ConfigError("record " + rec.name + ": shape does not match value count");

  w.u16(static_cast<std::uint16_t>(rec.name.size()));
  w.raw({reinterpret_cast<const std::uint8_t*>(rec.name.data()), rec.name.size()});
  w.u8(static_cast<std::uint8_t>(rec.dtype()));
  w.u8(static_cast<std::uint8_t>(rec.shape.size()));
  for (auto d : rec.shape) w.u32(d);
  std::visit(
      [&](const auto& v) {
        for (auto x : v) {
          if constexpr (std::is_same_v<std::decay_t<decltype(x)>, double>) {
            w.f64(x);
          } else {
            w.f32(x);
          }
        }
      },
      rec.data);
}

TensorRecord read_record(ByteReader& r) {
  TensorRecord rec;
  const auto name_len = r.u16();
  const auto name = r.raw(name_len);
  rec.name.assign(name.begin(), name.end());
  const auto tag = r.u8();
  if (tag != static_cast<std::uint8_t>(DType::F64) && tag != static_cast<std::uint8_t>(DType::F32)) {
    throw CorruptionError("record " + rec.name + ": unknown dtype tag " + std::to_string(tag));
  }
  const auto rank = r.u8();
  if (rank > kMaxRank) throw CorruptionError("record " + rec.name + ": rank " + std::to_string(rank));
  std::size_t count = 1;
  for (int i = 0; i < rank; ++i) {
    rec.shape.push_back(r.u32());
    count *= rec.shape.back();
  }
  const auto dtype = static_cast<DType>(tag);
  if (count > r.remaining() / dtype_size(dtype)) {
    throw CorruptionError("record " + rec.name + ": declared shape exceeds available payload");
  }
  if (dtype == DType::F64) {
    std::vector<double> v(count);
    for (auto& x : v) x = r.f64();
    rec.data = std::move(v);
  } else {
    std::vector<float> v(count);
    for (auto& x : v) x = r.f32();
    rec.data = std::move(v);
  }
  return rec;
}

Bytes encode_checkpoint(std::span<const TensorRecord> records) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) write_record(w, r);
  return w.take();
}

std::vector<TensorRecord> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kCheckpointMagic))) throw ProtocolError("not a checkpoint file");
  const auto version = r.u8();
  if (version != kCheckpointVersion) throw ProtocolError("unsupported checkpoint version " + std::to_string(version));
  const auto n = r.u32();
  std::vector<TensorRecord> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(read_record(r));
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after checkpoint records");
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(const std::filesystem::path& path, std::span<const TensorRecord> records) {
  write_file(path, encode_checkpoint(records));
}

std::vector<TensorRecord> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace rosfl
