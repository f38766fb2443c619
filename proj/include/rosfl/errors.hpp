#pragma once

#include <stdexcept>
#include <string>

namespace rosfl {

// Invalid shapes, ranges or settings supplied by the caller.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced or consumed by a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operations invoked out of order (backward before forward, unknown message
// kind, bad magic/version, ...).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Byte stream ended before a complete frame was available.
class FramingError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

// Frame is complete but its contents are inconsistent.
class CorruptionError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

// Sending on a channel whose peer has gone away.
class ChannelClosedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TimeoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A distributed run failed; carries the first diagnostic raised by any party.
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rosfl
