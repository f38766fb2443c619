#include "rosfl/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <map>
#include <thread>
#include <tuple>

namespace rosfl {

std::optional<WireMessage> FramedChannel::recv(std::optional<Millis> timeout) {
  if (shutdown_seen_) return std::nullopt;
  auto frame = recv_frame(timeout);
  if (!frame) return std::nullopt;
  auto msg = decode(*frame);
  if (msg.kind == MsgKind::Shutdown) shutdown_seen_ = true;
  return msg;
}

namespace {

struct FrameQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Bytes> frames;
  bool closed = false;
};

class InprocChannel final : public FramedChannel {
 public:
  InprocChannel(std::shared_ptr<FrameQueue> out, std::shared_ptr<FrameQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  ~InprocChannel() override { close(); }

  void close() override {
    for (auto* q : {out_.get(), in_.get()}) {
      std::lock_guard lock(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 protected:
  void send_frame(Bytes frame) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) throw ChannelClosedError("in-process channel closed");
    out_->frames.push_back(std::move(frame));
    out_->cv.notify_one();
  }

  std::optional<Bytes> recv_frame(std::optional<Millis> timeout) override {
    std::unique_lock lock(in_->mu);
    auto ready = [&] { return !in_->frames.empty() || in_->closed; };
    if (timeout) {
      if (!in_->cv.wait_for(lock, *timeout, ready)) throw TimeoutError("in-process receive timed out");
    } else {
      in_->cv.wait(lock, ready);
    }
    if (in_->frames.empty()) return std::nullopt;
    Bytes f = std::move(in_->frames.front());
    in_->frames.pop_front();
    return f;
  }

 private:
  std::shared_ptr<FrameQueue> out_, in_;
};

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

// Waits until fd is readable; false on timeout.
bool wait_readable(int fd, std::optional<Millis> timeout) {
  pollfd p{fd, POLLIN, 0};
  const int ms = timeout ? static_cast<int>(timeout->count()) : -1;
  for (;;) {
    const int r = ::poll(&p, 1, ms);
    if (r > 0) return true;
    if (r == 0) return false;
    if (errno != EINTR) throw ProtocolError(errno_text("poll"));
  }
}

class TcpChannel final : public FramedChannel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~TcpChannel() override {
    close();
    ::close(fd_);
  }

  void close() override {
    if (!shut_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

 protected:
  void send_frame(Bytes frame) override {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EPIPE || errno == ECONNRESET) throw ChannelClosedError("tcp peer closed");
        throw ProtocolError(errno_text("send"));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  std::optional<Bytes> recv_frame(std::optional<Millis> timeout) override {
    if (!wait_readable(fd_, timeout)) throw TimeoutError("tcp receive timed out");
    Bytes frame(kLengthPrefixBytes);
    const std::size_t got = read_exact(frame.data(), kLengthPrefixBytes);
    if (got == 0) return std::nullopt;
    if (got < kLengthPrefixBytes) throw FramingError("connection closed inside a length prefix");
    const std::size_t total = *frame_length(frame);
    frame.resize(total);
    const std::size_t body = read_exact(frame.data() + kLengthPrefixBytes, total - kLengthPrefixBytes);
    if (body < total - kLengthPrefixBytes) throw FramingError("connection closed inside a frame");
    return frame;
  }

 private:
  std::size_t read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, dst + got, n - got, 0);
      if (r == 0) break;
      if (r < 0) {
        if (errno == EINTR) continue;
        if (errno == ECONNRESET) break;
        throw ProtocolError(errno_text("recv"));
      }
      got += static_cast<std::size_t>(r);
    }
    return got;
  }

  int fd_;
  std::atomic<bool> shut_{false};
};

class TracedChannel final : public Channel {
 public:
  TracedChannel(ChannelPtr inner, ProtocolTrace& trace, std::string self, std::string peer)
      : inner_(std::move(inner)), trace_(trace), self_(std::move(self)), peer_(std::move(peer)) {}

  void send(const WireMessage& msg) override {
    trace_.record(self_, peer_, msg);
    inner_->send(msg);
  }
  std::optional<WireMessage> recv(std::optional<Millis> timeout) override { return inner_->recv(timeout); }
  void close() override { inner_->close(); }

 private:
  ChannelPtr inner_;
  ProtocolTrace& trace_;
  std::string self_, peer_;
};

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw ConfigError("bad IPv4 address: " + host);
  return addr;
}

}  // namespace

std::pair<ChannelPtr, ChannelPtr> inproc_pair() {
  auto a = std::make_shared<FrameQueue>();
  auto b = std::make_shared<FrameQueue>();
  return {std::make_unique<InprocChannel>(a, b), std::make_unique<InprocChannel>(b, a)};
}

TcpListener::TcpListener(std::uint16_t port, const std::string& host) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw ProtocolError(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  auto addr = make_addr(host, port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 || ::listen(fd_, 64) < 0) {
    const auto msg = errno_text("bind/listen");
    ::close(fd_);
    throw ProtocolError(msg);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { ::close(fd_); }

ChannelPtr TcpListener::accept(std::optional<Millis> timeout) {
  if (!wait_readable(fd_, timeout)) throw TimeoutError("no connection within timeout");
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) throw ProtocolError(errno_text("accept"));
  return std::make_unique<TcpChannel>(fd);
}

ChannelPtr tcp_connect(const std::string& host, std::uint16_t port, Millis retry_for) {
  const auto addr = make_addr(host, port);
  const auto deadline = std::chrono::steady_clock::now() + retry_for;
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw ProtocolError(errno_text("socket"));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      return std::make_unique<TcpChannel>(fd);
    }
    ::close(fd);
    if (std::chrono::steady_clock::now() > deadline) {
      throw TimeoutError("cannot connect to " + host + ":" + std::to_string(port));
    }
    std::this_thread::sleep_for(Millis(20));
  }
}

void ProtocolTrace::record(const std::string& from, const std::string& to, const WireMessage& m) {
  std::lock_guard lock(mu_);
  events_.push_back({events_.size(), from, to, m.kind, m.round, m.client, m.epoch, m.batch});
}

std::vector<TraceEvent> ProtocolTrace::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

ChannelPtr traced(ChannelPtr inner, ProtocolTrace& trace, std::string self, std::string peer) {
  return std::make_unique<TracedChannel>(std::move(inner), trace, std::move(self), std::move(peer));
}

std::vector<std::string> validate_trace(const std::vector<TraceEvent>& events, const TraceExpectation& expect) {
  std::vector<std::string> bad;
  auto where = [](const TraceEvent& e) {
    return std::string(kind_name(e.kind)) + " round " + std::to_string(e.round) + " client " +
           std::to_string(e.client) + " epoch " + std::to_string(e.epoch) + " batch " + std::to_string(e.batch);
  };

  using DataKey = std::tuple<std::uint32_t, std::uint16_t, std::uint16_t, std::uint32_t>;
  std::map<DataKey, std::vector<const TraceEvent*>> data;
  std::map<std::pair<std::uint32_t, std::uint16_t>, std::vector<const TraceEvent*>> down, up;

  for (const auto& e : events) {
    const std::string client = "client" + std::to_string(e.client);
    switch (e.kind) {
      case MsgKind::ActUp:
      case MsgKind::GradUp:
        if (e.from != client || e.to != "compute") bad.push_back(where(e) + ": sent " + e.from + " -> " + e.to);
        data[{e.round, e.client, e.epoch, e.batch}].push_back(&e);
        break;
      case MsgKind::ActDown:
      case MsgKind::GradDown:
        if (e.from != "compute" || e.to != client) bad.push_back(where(e) + ": sent " + e.from + " -> " + e.to);
        data[{e.round, e.client, e.epoch, e.batch}].push_back(&e);
        break;
      case MsgKind::WeightsDown:
        if (e.from != "aggregate" || e.to != client) bad.push_back(where(e) + ": sent " + e.from + " -> " + e.to);
        down[{e.round, e.client}].push_back(&e);
        break;
      case MsgKind::WeightsUp:
        if (e.from != client || e.to != "aggregate") bad.push_back(where(e) + ": sent " + e.from + " -> " + e.to);
        up[{e.round, e.client}].push_back(&e);
        break;
      default: break;
    }
  }

  const std::vector<MsgKind> train_seq{MsgKind::ActUp, MsgKind::ActDown, MsgKind::GradUp, MsgKind::GradDown};
  const std::vector<MsgKind> eval_seq{MsgKind::ActUp, MsgKind::ActDown};
  std::map<std::tuple<std::uint32_t, std::uint16_t, std::uint16_t>, std::uint32_t> batches;
  for (const auto& [key, evs] : data) {
    const auto& [round, client, epoch, batch] = key;
    std::vector<MsgKind> kinds;
    for (const auto* e : evs) kinds.push_back(e->kind);
    if (kinds != (epoch == 0 ? eval_seq : train_seq)) bad.push_back(where(*evs.front()) + ": out-of-order exchange");
    if (epoch > 0) ++batches[{round, client, epoch}];

    if (round < 1 || round > expect.rounds + 1 || client >= expect.clients || epoch > expect.epochs ||
        (round == expect.rounds + 1 && epoch != 0)) {
      bad.push_back(where(*evs.front()) + ": outside the schedule");
      continue;
    }
    const auto d = down.find({round, client});
    const auto u = up.find({round, client});
    for (const auto* e : evs) {
      if (d == down.end() || e->seq < d->second.front()->seq) bad.push_back(where(*e) + ": before its WeightsDown");
      if (round <= expect.rounds && (u == up.end() || e->seq > u->second.front()->seq)) {
        bad.push_back(where(*e) + ": after its WeightsUp");
      }
    }
  }

  for (std::uint16_t n = 0; n < expect.clients; ++n) {
    for (std::uint32_t k = 1; k <= expect.rounds + 1; ++k) {
      const auto d = down.find({k, n});
      if (d == down.end() || d->second.size() != 1) {
        bad.push_back("client " + std::to_string(n) + " round " + std::to_string(k) + ": expected one WeightsDown");
      }
      if (k > expect.rounds) continue;
      const auto u = up.find({k, n});
      if (u == up.end() || u->second.size() != 1) {
        bad.push_back("client " + std::to_string(n) + " round " + std::to_string(k) + ": expected one WeightsUp");
      }
      for (std::uint16_t i = 1; i <= expect.epochs; ++i) {
        const auto want = n < expect.batches_per_epoch.size() ? expect.batches_per_epoch[n] : 0;
        const auto it = batches.find({k, n, i});
        const auto got = it == batches.end() ? 0u : it->second;
        if (got != want) {
          bad.push_back("client " + std::to_string(n) + " round " + std::to_string(k) + " epoch " + std::to_string(i) +
                        ": " + std::to_string(got) + " batches, expected " + std::to_string(want));
        }
      }
    }
  }

  for (std::uint32_t k = 1; k <= expect.rounds; ++k) {
    std::uint64_t last_up = 0, first_down = UINT64_MAX;
    for (std::uint16_t n = 0; n < expect.clients; ++n) {
      if (auto u = up.find({k, n}); u != up.end()) last_up = std::max(last_up, u->second.front()->seq);
      if (auto d = down.find({k + 1, n}); d != down.end()) first_down = std::min(first_down, d->second.front()->seq);
    }
    if (first_down < last_up) bad.push_back("round " + std::to_string(k + 1) + " broadcast before the barrier");
  }
  return bad;
}

}  // namespace rosfl
