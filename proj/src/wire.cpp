#include "rosfl/wire.hpp"

#include <limits>

namespace rosfl {

namespace {

constexpr std::uint8_t kMagic0 = 'R';
constexpr std::uint8_t kMagic1 = 'F';

bool known_kind(std::uint8_t k) {
  return k >= static_cast<std::uint8_t>(MsgKind::ActUp) && k <= static_cast<std::uint8_t>(MsgKind::Hello);
}

}  // namespace

std::string_view kind_name(MsgKind k) {
  switch (k) {
    case MsgKind::ActUp: return "ActUp";
    case MsgKind::ActDown: return "ActDown";
    case MsgKind::GradUp: return "GradUp";
    case MsgKind::GradDown: return "GradDown";
    case MsgKind::WeightsUp: return "WeightsUp";
    case MsgKind::WeightsDown: return "WeightsDown";
    case MsgKind::RoundBegin: return "RoundBegin";
    case MsgKind::RoundEnd: return "RoundEnd";
    case MsgKind::Shutdown: return "Shutdown";
    case MsgKind::Hello: return "Hello";
  }
  return "?";
}

PayloadSchema payload_schema(MsgKind kind) {
  switch (kind) {
    case MsgKind::ActUp: return {1, 1, "head_out", {}};
    case MsgKind::ActDown: return {1, 1, "body_out", {}};
    case MsgKind::GradUp: return {1, 1, "grad_body_out", {}};
    case MsgKind::GradDown: return {1, 1, "grad_head_out", {}};
    case MsgKind::WeightsUp:
    case MsgKind::WeightsDown:
      return {0, std::numeric_limits<std::uint16_t>::max(), std::nullopt, {"head/", "tail/"}};
    default: return {0, 0, std::nullopt, {}};
  }
}

bool schema_allows(MsgKind kind, std::string_view record_name) {
  const auto s = payload_schema(kind);
  if (s.max_records == 0) return false;
  if (s.exact_name) return record_name == *s.exact_name;
  for (const auto& p : s.allowed_prefixes) {
    if (record_name.starts_with(p) && record_name.size() > p.size()) return true;
  }
  return false;
}

void validate_schema(const WireMessage& msg) {
  const auto s = payload_schema(msg.kind);
  const auto n = msg.payload.size();
  if (n < s.min_records || n > s.max_records) {
    throw ProtocolError(std::string(kind_name(msg.kind)) + " cannot carry " + std::to_string(n) + " records");
  }
  for (const auto& r : msg.payload) {
    if (!schema_allows(msg.kind, r.name)) {
      throw ProtocolError(std::string(kind_name(msg.kind)) + " cannot carry record '" + r.name + "'");
    }
  }
}

Bytes encode(const WireMessage& msg) {
  if (msg.version != kWireVersion) throw ProtocolError("unsupported wire version " + std::to_string(msg.version));
  validate_schema(msg);
  ByteWriter w;
  w.u32(0);
  w.u8(kMagic0);
  w.u8(kMagic1);
  w.u8(msg.version);
  w.u8(static_cast<std::uint8_t>(msg.kind));
  w.u32(msg.round);
  w.u16(msg.client);
  w.u16(msg.epoch);
  w.u32(msg.batch);
  w.u16(static_cast<std::uint16_t>(msg.payload.size()));
  for (const auto& r : msg.payload) write_record(w, r);
  const std::size_t body = w.size() - kLengthPrefixBytes;
  if (body > std::numeric_limits<std::uint32_t>::max()) throw ProtocolError("frame larger than 4 GiB");
  w.patch_u32(0, static_cast<std::uint32_t>(body));
  return w.take();
}

std::optional<std::size_t> frame_length(std::span<const std::uint8_t> stream) {
  if (stream.size() < kLengthPrefixBytes) return std::nullopt;
  ByteReader r(stream.first(kLengthPrefixBytes));
  return kLengthPrefixBytes + r.u32();
}

WireMessage decode(std::span<const std::uint8_t> frame) {
  const auto total = frame_length(frame);
  if (!total) throw FramingError("frame shorter than its length prefix");
  if (frame.size() < *total) {
    throw FramingError("frame declares " + std::to_string(*total - kLengthPrefixBytes) + " bytes but " +
                       std::to_string(frame.size() - kLengthPrefixBytes) + " are available");
  }
  if (frame.size() > *total) throw FramingError("trailing bytes after frame");
  if (*total - kLengthPrefixBytes < kHeaderBytes) throw FramingError("frame shorter than the header");

  ByteReader r(frame.subspan(kLengthPrefixBytes));
  const auto m0 = r.u8();
  const auto m1 = r.u8();
  if (m0 != kMagic0 || m1 != kMagic1) throw ProtocolError("bad frame magic");
  WireMessage msg;
  msg.version = r.u8();
  if (msg.version != kWireVersion) throw ProtocolError("unsupported wire version " + std::to_string(msg.version));
  const auto kind = r.u8();
  if (!known_kind(kind)) throw ProtocolError("unknown message kind " + std::to_string(kind));
  msg.kind = static_cast<MsgKind>(kind);
  msg.round = r.u32();
  msg.client = r.u16();
  msg.epoch = r.u16();
  msg.batch = r.u32();
  const auto count = r.u16();
  for (std::uint16_t i = 0; i < count; ++i) msg.payload.push_back(read_record(r));
  if (r.remaining() != 0) throw CorruptionError("frame length disagrees with record shapes");
  validate_schema(msg);
  return msg;
}

}  // namespace rosfl
