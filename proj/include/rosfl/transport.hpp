#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rosfl/wire.hpp"

namespace rosfl {

using Millis = std::chrono::milliseconds;

/// One ordered, bidirectional link between two parties. recv() returns
/// nullopt when the peer closed the channel or a Shutdown was already
/// received; timeouts raise TimeoutError, bad bytes raise ProtocolError and
/// sending to a departed peer raises ChannelClosedError.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const WireMessage& msg) = 0;
  virtual std::optional<WireMessage> recv(std::optional<Millis> timeout = std::nullopt) = 0;
  virtual void close() = 0;
};

// Channels that move encoded frames.
class FramedChannel : public Channel {
 public:
  void send(const WireMessage& msg) override { send_frame(encode(msg)); }
  std::optional<WireMessage> recv(std::optional<Millis> timeout = std::nullopt) override;

 protected:
  virtual void send_frame(Bytes frame) = 0;
  virtual std::optional<Bytes> recv_frame(std::optional<Millis> timeout) = 0;

 private:
  bool shutdown_seen_ = false;
};

using ChannelPtr = std::unique_ptr<Channel>;

/// Two connected in-process endpoints exchanging encoded frames.
std::pair<ChannelPtr, ChannelPtr> inproc_pair();

class TcpListener {
 public:
  // Port 0 picks an ephemeral port; see port().
  explicit TcpListener(std::uint16_t port = 0, const std::string& host = "127.0.0.1");
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  ChannelPtr accept(std::optional<Millis> timeout = std::nullopt);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

ChannelPtr tcp_connect(const std::string& host, std::uint16_t port, Millis retry_for = Millis(5000));

/// One message observed on a channel, in global send order.
struct TraceEvent {
  std::uint64_t seq = 0;
  std::string from;
  std::string to;
  MsgKind kind{};
  std::uint32_t round = 0;
  std::uint16_t client = 0;
  std::uint16_t epoch = 0;
  std::uint32_t batch = 0;
};

class ProtocolTrace {
 public:
  void record(const std::string& from, const std::string& to, const WireMessage& m);
  std::vector<TraceEvent> events() const;

 private:
  mutable std::mutex mu_;
  std::vector<TraceEvent> events_;
};

// Records every sent message into `trace`, labelled with the two endpoints.
ChannelPtr traced(ChannelPtr inner, ProtocolTrace& trace, std::string self, std::string peer);

struct TraceExpectation {
  std::uint16_t clients = 0;
  std::uint32_t rounds = 0;
  std::uint16_t epochs = 0;
  std::vector<std::uint32_t> batches_per_epoch;  // per client
};

/// Checks a finished run's trace against the protocol: every training batch
/// runs ActUp, ActDown, GradUp, GradDown in order; evaluation batches run
/// ActUp then ActDown; no client starts round k+1 before all WeightsUp of
/// round k were sent; no data message of a round follows that client's
/// WeightsUp. Returns the list of violations.
std::vector<std::string> validate_trace(const std::vector<TraceEvent>& events, const TraceExpectation& expect);

}  // namespace rosfl
