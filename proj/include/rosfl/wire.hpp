#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rosfl/container.hpp"

namespace rosfl {

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kLengthPrefixBytes = 4;
inline constexpr std::size_t kHeaderBytes = 18;

enum class MsgKind : std::uint8_t {
  ActUp = 1,
  ActDown = 2,
  GradUp = 3,
  GradDown = 4,
  WeightsUp = 5,
  WeightsDown = 6,
  RoundBegin = 7,
  RoundEnd = 8,
  Shutdown = 9,
  Hello = 10,
};

inline constexpr MsgKind kAllKinds[] = {MsgKind::ActUp,       MsgKind::ActDown,    MsgKind::GradUp,
                                        MsgKind::GradDown,    MsgKind::WeightsUp,  MsgKind::WeightsDown,
                                        MsgKind::RoundBegin,  MsgKind::RoundEnd,   MsgKind::Shutdown,
                                        MsgKind::Hello};

std::string_view kind_name(MsgKind k);

struct WireMessage {
  std::uint8_t version = kWireVersion;
  MsgKind kind = MsgKind::RoundBegin;
  std::uint32_t round = 0;
  std::uint16_t client = 0;
  std::uint16_t epoch = 0;
  std::uint32_t batch = 0;
  std::vector<TensorRecord> payload;

  friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

/// What a kind may carry. Activation and gradient kinds hold exactly one
/// record with a fixed name; weight kinds hold any number of records whose
/// names start with one of the allowed part prefixes; control kinds hold none.
struct PayloadSchema {
  std::size_t min_records = 0;
  std::size_t max_records = 0;
  std::optional<std::string> exact_name;
  std::vector<std::string> allowed_prefixes;
};

PayloadSchema payload_schema(MsgKind kind);
bool schema_allows(MsgKind kind, std::string_view record_name);

// Throws ProtocolError when the payload does not fit the kind's schema.
void validate_schema(const WireMessage& msg);

/// Full frame including the u32 length prefix.
Bytes encode(const WireMessage& msg);

/// Decodes one complete frame (prefix included). Extra trailing bytes are a
/// framing error; use frame_length() to split a stream.
WireMessage decode(std::span<const std::uint8_t> frame);

// Bytes needed for the frame at the start of `stream`, or nullopt when fewer
// than four bytes are available.
std::optional<std::size_t> frame_length(std::span<const std::uint8_t> stream);

template <typename S>
WireMessage tensor_message(MsgKind kind, std::uint32_t round, std::uint16_t client, std::uint16_t epoch,
                           std::uint32_t batch, const Tensor<S>& t) {
  WireMessage m{kWireVersion, kind, round, client, epoch, batch, {}};
  const auto schema = payload_schema(kind);
  if (!schema.exact_name) throw ProtocolError(std::string(kind_name(kind)) + " does not carry a single tensor");
  m.payload.push_back(to_record(*schema.exact_name, t, dtype_of<S>()));
  return m;
}

template <typename S>
WireMessage weights_message(MsgKind kind, std::uint32_t round, std::uint16_t client, const ParamSet<S>& params) {
  WireMessage m{kWireVersion, kind, round, client, 0, 0, to_records(params, dtype_of<S>())};
  validate_schema(m);
  return m;
}

inline WireMessage control_message(MsgKind kind, std::uint32_t round, std::uint16_t client) {
  return WireMessage{kWireVersion, kind, round, client, 0, 0, {}};
}

template <typename S>
Tensor<S> single_tensor(const WireMessage& m) {
  if (m.payload.size() != 1) throw ProtocolError(std::string(kind_name(m.kind)) + " without exactly one tensor");
  return from_record<S>(m.payload[0]);
}

}  // namespace rosfl
