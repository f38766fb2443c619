#include "doctest.h"

#include <filesystem>
#include <thread>

#include "rosfl/transport.hpp"
#include "support.hpp"

using namespace rosfl;
using namespace std::chrono_literals;
using rosfl::testing::random_message;
using rosfl::testing::random_record;

TEST_CASE("checkpoint container round trip") {
  RngStream rng(1, Purpose::Test, {30});
  std::vector<TensorRecord> recs;
  for (int i = 0; i < 8; ++i) recs.push_back(random_record(rng, "tensor" + std::to_string(i)));
  const auto bytes = encode_checkpoint(recs);
  CHECK(bytes[0] == 'R');
  CHECK(bytes[3] == 'K');
  CHECK(decode_checkpoint(bytes) == recs);
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "rosfl_test_ckpt.bin";
  save_checkpoint(path, recs);
  CHECK(load_checkpoint(path) == recs);
  std::filesystem::remove(path);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), CorruptionError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), ProtocolError);
}

TEST_CASE("param sets convert through records in both precisions") {
  RngStream rng(2, Purpose::Test, {31});
  ParamSet<double> p(Part::Head, 3);
  p.add("head/enc1.conv_a.weight", rosfl::testing::random_tensor(rng, {2, 1, 3, 3}));
  p.add("head/enc1.conv_a.bias", rosfl::testing::random_tensor(rng, {2}));
  const auto back = from_records<double>(to_records(p, DType::F64), Part::Head, 3);
  CHECK(back == p);
  const auto narrow = from_records<float>(to_records(p, DType::F32), Part::Head, 3);
  CHECK(narrow == p.cast<float>());
}

TEST_CASE("empty RoundBegin is a fixed-size frame") {
  const auto m = control_message(MsgKind::RoundBegin, 7, 2);
  const auto bytes = encode(m);
  CHECK(bytes.size() == kLengthPrefixBytes + kHeaderBytes);
  const Bytes expect{0x12, 0x00, 0x00, 0x00, 'R', 'F', 0x01, 0x07, 0x07, 0x00, 0x00, 0x00,
                     0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00};
  CHECK(bytes == expect);
  CHECK(decode(bytes) == m);
}

TEST_CASE("framing and corruption errors") {
  SUBCASE("declared length larger than available") {
    const Bytes partial{0x0A, 0x00, 0x00, 0x00, 'R', 'F'};
    CHECK_THROWS_AS(decode(partial), FramingError);
    CHECK_THROWS_AS(decode(Bytes{0x01, 0x00}), FramingError);
  }
  auto good = encode(tensor_message(MsgKind::ActUp, 1, 0, 1, 0, Tensord::constant({1, 2, 2, 2}, 0.5)));
  SUBCASE("bad magic") {
    good[4] = 'X';
    CHECK_THROWS_AS(decode(good), ProtocolError);
  }
  SUBCASE("bad version") {
    good[6] = 2;
    CHECK_THROWS_AS(decode(good), ProtocolError);
  }
  SUBCASE("unknown kind") {
    good[7] = 77;
    CHECK_THROWS_AS(decode(good), ProtocolError);
  }
  SUBCASE("shape claims more data than the frame holds") {
    // first dimension of the single record: prefix 4 + header 18 + name len 2 + "head_out" 8 + dtype 1 + rank 1
    good[34] = 9;
    CHECK_THROWS_AS(decode(good), CorruptionError);
  }
  SUBCASE("shape claims less data than the frame holds") {
    good[34] = 0;
    CHECK_THROWS_AS(decode(good), CorruptionError);
  }
  SUBCASE("unknown dtype") {
    good[32] = 9;
    CHECK_THROWS_AS(decode(good), CorruptionError);
  }
  SUBCASE("trailing bytes") {
    good.push_back(0);
    CHECK_THROWS_AS(decode(good), FramingError);
  }
}

TEST_CASE("random messages round-trip bit-exactly") {
  RngStream rng(3, Purpose::Test, {32});
  for (int i = 0; i < 1000; ++i) {
    const auto m = random_message(rng);
    const auto bytes = encode(m);
    const auto back = decode(bytes);
    CHECK(back == m);
    CHECK(encode(back) == bytes);
  }
}

TEST_CASE("no message kind can carry client-private tensors") {
  const std::vector<std::string> private_names{"x",      "input", "y",    "label",    "mask",  "target",
                                               "output", "yhat",  "skip", "skip1",    "probs", "image",
                                               "body/mid.conv_a.weight"};
  for (auto kind : kAllKinds) {
    for (const auto& name : private_names) CHECK_FALSE(schema_allows(kind, name));
    const auto schema = payload_schema(kind);
    if (schema.exact_name) {
      CHECK((*schema.exact_name == "head_out" || *schema.exact_name == "body_out" ||
             *schema.exact_name == "grad_head_out" || *schema.exact_name == "grad_body_out"));
    }
    for (const auto& p : schema.allowed_prefixes) CHECK((p == "head/" || p == "tail/"));
  }
  WireMessage m = control_message(MsgKind::RoundEnd, 1, 0);
  m.payload.push_back(to_record("x", Tensord({1}), DType::F64));
  CHECK_THROWS_AS(encode(m), ProtocolError);
  m.kind = MsgKind::ActUp;
  CHECK_THROWS_AS(encode(m), ProtocolError);
}

TEST_CASE("in-process channel is FIFO and signals close") {
  auto [a, b] = inproc_pair();
  const auto m1 = control_message(MsgKind::RoundBegin, 1, 0);
  const auto m2 = control_message(MsgKind::RoundEnd, 1, 0);
  a->send(m1);
  a->send(m2);
  CHECK(*b->recv() == m1);
  CHECK(*b->recv() == m2);
  CHECK_THROWS_AS(b->recv(20ms), TimeoutError);

  a->send(control_message(MsgKind::Shutdown, 2, 0));
  CHECK(b->recv()->kind == MsgKind::Shutdown);
  a->send(m1);
  CHECK_FALSE(b->recv().has_value());

  auto [c, d] = inproc_pair();
  c->send(m1);
  c->close();
  CHECK(*d->recv() == m1);
  CHECK_FALSE(d->recv().has_value());
  CHECK_THROWS_AS(d->send(m1), ChannelClosedError);
}

TEST_CASE("tcp loopback carries a 1 MiB weights message bit-exactly") {
  TcpListener listener;
  ParamSet<double> p(Part::Head, 1);
  RngStream rng(4, Purpose::Test, {33});
  p.add("head/enc1.conv_a.weight", rosfl::testing::random_tensor(rng, {128, 128, 2, 4}));
  const auto msg = weights_message(MsgKind::WeightsUp, 1, 3, p);
  CHECK(encode(msg).size() > (1u << 20));

  std::thread echo([&] {
    auto server = listener.accept(5000ms);
    while (auto m = server->recv()) server->send(*m);
  });
  auto client = tcp_connect("127.0.0.1", listener.port());
  client->send(msg);
  const auto back = client->recv(5000ms);
  REQUIRE(back.has_value());
  CHECK(encode(*back) == encode(msg));
  CHECK(from_records<double>(back->payload, Part::Head) == p);

  client->send(control_message(MsgKind::RoundEnd, 1, 3));
  CHECK(client->recv(5000ms)->kind == MsgKind::RoundEnd);
  client->close();
  echo.join();
}

TEST_CASE("tcp peer close is distinct from corruption") {
  TcpListener listener;
  std::thread peer([&] {
    auto server = listener.accept(5000ms);
    server->send(control_message(MsgKind::Hello, 0, 5));
    server->close();
  });
  auto client = tcp_connect("127.0.0.1", listener.port());
  CHECK(client->recv(5000ms)->client == 5);
  CHECK_FALSE(client->recv(5000ms).has_value());
  peer.join();
  CHECK_THROWS_AS(TcpListener(listener.port()), ProtocolError);
}

namespace {

std::vector<TraceEvent> synthetic_trace(std::uint16_t clients, std::uint32_t rounds, std::uint32_t batches) {
  ProtocolTrace trace;
  auto cname = [](std::uint16_t n) { return "client" + std::to_string(n); };
  auto msg = [](MsgKind k, std::uint32_t r, std::uint16_t n, std::uint16_t e, std::uint32_t b) {
    WireMessage m = control_message(k, r, n);
    m.epoch = e;
    m.batch = b;
    return m;
  };
  for (std::uint32_t k = 1; k <= rounds + 1; ++k) {
    for (std::uint16_t n = 0; n < clients; ++n) trace.record("aggregate", cname(n), msg(MsgKind::WeightsDown, k, n, 0, 0));
    for (std::uint16_t n = 0; n < clients; ++n) {
      trace.record(cname(n), "compute", msg(MsgKind::ActUp, k, n, 0, 0));
      trace.record("compute", cname(n), msg(MsgKind::ActDown, k, n, 0, 0));
      if (k > rounds) continue;
      for (std::uint32_t b = 0; b < batches; ++b) {
        trace.record(cname(n), "compute", msg(MsgKind::ActUp, k, n, 1, b));
        trace.record("compute", cname(n), msg(MsgKind::ActDown, k, n, 1, b));
        trace.record(cname(n), "compute", msg(MsgKind::GradUp, k, n, 1, b));
        trace.record("compute", cname(n), msg(MsgKind::GradDown, k, n, 1, b));
      }
      trace.record(cname(n), "aggregate", msg(MsgKind::WeightsUp, k, n, 0, 0));
    }
  }
  return trace.events();
}

}  // namespace

TEST_CASE("trace validator accepts the protocol and flags violations") {
  const TraceExpectation expect{2, 2, 1, {3, 3}};
  auto events = synthetic_trace(2, 2, 3);
  CHECK(validate_trace(events, expect).empty());

  SUBCASE("swapped exchange") {
    std::swap(events[4].kind, events[5].kind);
    CHECK_FALSE(validate_trace(events, expect).empty());
  }
  SUBCASE("missing batch") {
    events.erase(events.begin() + 4, events.begin() + 8);
    for (std::size_t i = 0; i < events.size(); ++i) events[i].seq = i;
    CHECK_FALSE(validate_trace(events, expect).empty());
  }
  SUBCASE("broadcast before barrier") {
    for (auto& e : events) {
      if (e.kind == MsgKind::WeightsDown && e.round == 2 && e.client == 0) e.seq = 0;
    }
    CHECK_FALSE(validate_trace(events, expect).empty());
  }
  SUBCASE("wrong direction") {
    events[4].from = "compute";
    CHECK_FALSE(validate_trace(events, expect).empty());
  }
}
