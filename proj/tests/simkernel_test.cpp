#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include "selcopy/simkernel.hpp"

using namespace selcopy;
using namespace std::chrono_literals;

namespace {

Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

// Exactly 40 bytes of head.
Bytes message40(std::size_t body) {
  std::string cl = std::to_string(body);
  std::string s = "HTTP/1.0 200\r\nContent-Length: " + std::string(6 - cl.size(), '0') + cl + "\r\n\r\n";
  Bytes b = to_bytes(s);
  for (std::size_t i = 0; i < body; ++i) b.push_back(static_cast<std::uint8_t>('a' + i % 26));
  return b;
}

// origin -> in (proxy) ... out (proxy) -> sink
struct Path {
  Kernel k;
  SockId origin, in, out, sink;

  explicit Path(KernelConfig cfg) : k(cfg) {
    origin = k.socket(SocketRole::Endpoint);
    in = k.socket(SocketRole::Proxy);
    out = k.socket(SocketRole::Proxy);
    sink = k.socket(SocketRole::Endpoint);
    k.connect(origin, in);
    k.connect(out, sink);
  }

  void inject(const Bytes& m) {
    std::size_t off = 0;
    while (off < m.size()) {
      auto r = k.sendmsg(origin, ByteView(m).subspan(off));
      ASSERT_GT(r.accepted, 0u);
      off += r.accepted;
    }
  }

  // Forwards `total` logical bytes from `in` to `out` with a fixed buffer.
  void forward(std::size_t total, std::size_t cap = 4096) {
    Bytes buf(cap);
    std::size_t moved = 0;
    while (moved < total) {
      auto r = k.recvmsg(in, buf);
      ASSERT_FALSE(r.would_block) << "moved " << moved;
      std::size_t sent = 0;
      while (sent < r.logical_len) {
        auto s = k.sendmsg(out, ByteView(buf).first(r.logical_len).subspan(sent));
        ASSERT_GT(s.accepted, 0u);
        sent += s.accepted;
      }
      moved += r.logical_len;
    }
  }

  Bytes drain_sink() {
    Bytes all, buf(1 << 16);
    for (;;) {
      auto r = k.recvmsg(sink, buf);
      if (r.would_block) break;
      all.insert(all.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(r.physical_len));
    }
    return all;
  }
};

KernelConfig selective() {
  KernelConfig c;
  c.mode = KernelMode::Selective;
  return c;
}

}  // namespace

TEST(Recvmsg, SelectiveLargeBodyReturnsHeadAndIdentifier) {
  Path p(selective());
  p.inject(message40(100000));
  Bytes buf(4096);
  auto r = p.k.recvmsg(p.in, buf);
  EXPECT_EQ(r.logical_len, 4096u);
  EXPECT_EQ(r.physical_len, 48u);
  auto snap = p.k.snapshot(p.in);
  EXPECT_EQ(snap->anchored_bytes, 4056u);
  EXPECT_EQ(snap->recv_account.temp_raise, 4056);
  EXPECT_EQ(snap->anchors, 1u);
  EXPECT_EQ(snap->refcount, 2);
  std::span<const std::uint8_t, 8> wire(buf.data() + 40, 8);
  auto hit = p.k.vpimap().lookup(wire);
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->source_sock, p.in);
  EXPECT_EQ(hit->anchored_total, 100000u);
}

TEST(Recvmsg, BaselineCopiesEverything) {
  KernelConfig c;
  c.mode = KernelMode::Baseline;
  Path p(c);
  p.inject(message40(100000));
  Bytes buf(4096);
  auto r = p.k.recvmsg(p.in, buf);
  EXPECT_EQ(r.logical_len, 4096u);
  EXPECT_EQ(r.physical_len, 4096u);
  EXPECT_EQ(p.k.counters().rx_std_bytes, 4096u);
}

TEST(Recvmsg, ShortBodyDrainsQueue) {
  Path p(selective());
  p.inject(to_bytes("HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\nhello"));
  Bytes buf(4096);
  auto r = p.k.recvmsg(p.in, buf);
  EXPECT_EQ(r.logical_len, 43u);
  EXPECT_EQ(r.physical_len, 43u);
  EXPECT_EQ(p.k.snapshot(p.in)->recv_bytes, 0u);
  EXPECT_EQ(p.k.counters().vpis_issued, 0u);
}

TEST(Recvmsg, EmptyQueueWouldBlockAndErrors) {
  Path p(selective());
  Bytes buf(16);
  EXPECT_TRUE(p.k.recvmsg(p.in, buf).would_block);
  EXPECT_THROW(p.k.recvmsg(p.in, MutableByteView{}), SocketError);
  EXPECT_THROW(p.k.sendmsg(p.out, ByteView{}), SocketError);
  p.k.sock_close(p.in);
  try {
    p.k.recvmsg(p.in, buf);
    FAIL();
  } catch (const SocketError& e) {
    EXPECT_EQ(e.kind(), SocketError::Kind::Closed);
  }
  EXPECT_NO_THROW(p.k.sock_close(p.in));
}

TEST(Sendmsg, FastPathIsAcceptedWholeThroughTemporaryRaise) {
  Path p(selective());
  p.inject(message40(100000));
  Bytes buf(4096);
  auto r = p.k.recvmsg(p.in, buf);
  ASSERT_EQ(r.physical_len, 48u);

  p.k.set_send_limit(p.out, 40);  // room for the metadata only
  p.k.set_recv_limit(p.sink, 0);  // hold everything in the send queue
  auto s = p.k.sendmsg(p.out, ByteView(buf).first(48), 4096);
  EXPECT_EQ(s.accepted, 4096u);
  auto snap = p.k.snapshot(p.out);
  EXPECT_EQ(snap->send_account.temp_raise, 4056);
  EXPECT_EQ(snap->send_account.charged, 4096);
  EXPECT_EQ(snap->tx.phase, TxPhase::FastPath);
  EXPECT_EQ(p.k.counters().skb_trans_bytes, 4056u);
  EXPECT_EQ(p.k.counters().fastpath_partial_accepts, 0u);

  p.k.set_recv_limit(p.sink, 1 << 20);
  EXPECT_EQ(p.k.transmit_drain(p.out), 4096u);
  snap = p.k.snapshot(p.out);
  EXPECT_EQ(snap->send_account.temp_raise, 0);
  EXPECT_EQ(snap->send_account.charged, 0);
}

TEST(Sendmsg, TransferIsDeferredWhenMetadataDoesNotFit) {
  Path p(selective());
  p.inject(message40(100000));
  Bytes buf(4096);
  p.k.recvmsg(p.in, buf);
  p.k.set_send_limit(p.out, 30);
  p.k.set_recv_limit(p.sink, 0);
  auto s = p.k.sendmsg(p.out, ByteView(buf).first(48), 4096);
  EXPECT_EQ(s.accepted, 30u);
  EXPECT_EQ(p.k.counters().skb_trans_count, 0u);
  EXPECT_EQ(p.k.snapshot(p.in)->anchored_bytes, 4056u);
}

TEST(Sendmsg, BypassPartialSendsConverge) {
  Path p(selective());
  Bytes msg = to_bytes("HTTP/1.1 200\r\nContent-Length: 8\r\n\r\nnot-vpi!");
  ASSERT_EQ(msg.size(), 43u);
  p.k.set_send_limit(p.out, 10);
  std::size_t sent = 0;
  std::vector<std::size_t> accepted;
  while (sent < msg.size()) {
    auto s = p.k.sendmsg(p.out, ByteView(msg).subspan(sent));
    accepted.push_back(s.accepted);
    sent += s.accepted;
    if (sent == 10) {
      auto snap = p.k.snapshot(p.out);
      EXPECT_EQ(snap->tx.phase, TxPhase::FallbackBypass);
      EXPECT_EQ(snap->tx.cumulative_sent, 10u);
    }
  }
  EXPECT_EQ(accepted, (std::vector<std::size_t>{10, 10, 10, 10, 3}));
  EXPECT_EQ(p.k.counters().vpi_misses, 1u);
  EXPECT_EQ(p.k.counters().bypass_messages, 1u);
  EXPECT_EQ(p.drain_sink(), msg);
  EXPECT_EQ(p.k.snapshot(p.out)->tx.phase, TxPhase::Default);
}

TEST(Sendmsg, ShortMessagePassesThrough) {
  Path p(selective());
  Bytes msg = to_bytes("HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\nhello");
  EXPECT_EQ(p.k.sendmsg(p.out, msg).accepted, 43u);
  EXPECT_EQ(p.drain_sink(), msg);
}

TEST(Forwarding, SelectiveMatchesOriginAndAccountsExactly) {
  Path p(selective());
  Bytes msg = message40(100000);
  p.inject(msg);
  p.forward(msg.size());
  EXPECT_EQ(p.drain_sink(), msg);

  auto recs = p.k.message_records();
  ASSERT_EQ(recs.size(), 1u);
  const auto& rec = recs[0];
  EXPECT_EQ(rec.path, MessageRecord::Path::FastPath);
  EXPECT_EQ(rec.rx_meta_copied, 40u + 8);
  EXPECT_EQ(rec.rx_std_copied, 0u);
  EXPECT_EQ(rec.tx_meta_copied, 40u);
  EXPECT_EQ(rec.tx_std_copied, 0u);
  EXPECT_EQ(rec.transferred, 100000u);
  EXPECT_EQ(p.k.vpimap().size(), 0u);

  for (auto id : {p.in, p.out}) {
    auto s = p.k.snapshot(id);
    EXPECT_EQ(s->recv_account.charged, 0);
    EXPECT_EQ(s->recv_account.temp_raise, 0);
    EXPECT_EQ(s->send_account.charged, 0);
    EXPECT_EQ(s->send_account.temp_raise, 0);
    EXPECT_EQ(s->anchors, 0u);
  }
  EXPECT_EQ(p.k.counters().underflow_events, 0u);
  EXPECT_EQ(p.k.locks().double_holds(), 0u);
}

TEST(Forwarding, ThresholdLimitsAnchoredBytes) {
  auto c = selective();
  c.prog.anchor_threshold = 1000;
  Path p(c);
  Bytes msg = message40(5000);
  p.inject(msg);
  p.forward(msg.size(), 777);
  EXPECT_EQ(p.drain_sink(), msg);
  EXPECT_LE(p.k.snapshot(p.in)->peak_anchored, 1000u);
  auto counters = p.k.counters();
  EXPECT_EQ(counters.skb_trans_bytes, 1000u);
  EXPECT_EQ(counters.rx_std_bytes, 4000u);
  EXPECT_EQ(counters.tx_std_bytes, 4000u);
}

TEST(StageExtract, Arithmetic) {
  Path p(selective());
  p.inject(message40(100000));
  Bytes buf(200000);
  auto r = p.k.recvmsg(p.in, buf);
  ASSERT_EQ(r.logical_len, 100040u);
  EXPECT_EQ(p.k.snapshot(p.in)->anchored_bytes, 100000u);

  auto st = p.k.stage_extract(p.in, 4056);
  EXPECT_EQ(st.total, 4056u);
  std::size_t seg_bytes = 0;
  for (const auto& s : st.segments) seg_bytes += s.size();
  EXPECT_EQ(seg_bytes, 4056u);
  EXPECT_EQ(p.k.snapshot(p.in)->anchored_bytes, 95944u);

  EXPECT_EQ(p.k.stage_extract(p.in, 0).total, 0u);
  EXPECT_THROW(p.k.stage_extract(p.in, 95945), SocketError);

  // Commit next to 2048 queued bytes on an unconnected socket.
  auto holder = p.k.socket(SocketRole::Endpoint);
  Bytes plain(2048, 'q');
  ASSERT_EQ(p.k.sendmsg(holder, plain).accepted, 2048u);
  p.k.commit_transfer(std::move(st), holder);
  auto h = p.k.snapshot(holder);
  EXPECT_EQ(h->send_bytes, 6104u);
  EXPECT_EQ(h->send_account.charged, 6104);
  EXPECT_EQ(h->send_account.temp_raise, 4056);
  p.k.commit_transfer(StagingQueue{}, holder);
  EXPECT_EQ(p.k.snapshot(holder)->send_bytes, 6104u);

  // Drain conserves bytes.
  auto peer = p.k.socket(SocketRole::Endpoint);
  p.k.connect(holder, peer);
  EXPECT_EQ(p.k.transmit_drain(holder), 6104u);
  EXPECT_EQ(p.k.snapshot(peer)->recv_bytes, 6104u);
  EXPECT_EQ(p.k.snapshot(peer)->recv_account.charged, 6104);
  h = p.k.snapshot(holder);
  EXPECT_EQ(h->send_account.charged, 0);
  EXPECT_EQ(h->send_account.temp_raise, 0);
  EXPECT_EQ(p.k.transmit_drain(holder), 0u);

  Bytes got(8192);
  auto rr = p.k.recvmsg(peer, got);
  ASSERT_EQ(rr.physical_len, 6104u);
  EXPECT_EQ(Bytes(got.begin(), got.begin() + 2048), plain);
  Bytes msg = message40(100000);
  EXPECT_EQ(Bytes(got.begin() + 2048, got.begin() + 6104), Bytes(msg.begin() + 40, msg.begin() + 40 + 4056));
}

TEST(Teardown, CloseWithoutAnchorsIsImmediate) {
  Path p(selective());
  p.k.sock_close(p.out);
  EXPECT_FALSE(p.k.snapshot(p.out));
  EXPECT_EQ(p.k.final_snapshot(p.out)->lifecycle, Lifecycle::Closed);
  EXPECT_EQ(p.k.freed_sockets(), 1u);
}

TEST(Teardown, TransferBeforeDeadlineDeliversIntact) {
  Path p(selective());
  Bytes msg = message40(100000);
  p.inject(msg);
  Bytes buf(msg.size());
  auto r = p.k.recvmsg(p.in, buf);
  ASSERT_EQ(r.logical_len, msg.size());
  p.k.sock_close(p.in);
  auto snap = p.k.snapshot(p.in);
  ASSERT_TRUE(snap);
  EXPECT_EQ(snap->lifecycle, Lifecycle::DeferredTeardown);
  EXPECT_EQ(snap->deadline, VirtualTime(5s));

  // The proxy still owns the identifier and finishes the message.
  std::size_t sent = 0;
  while (sent < msg.size()) {
    const std::size_t phys = sent == 0 ? r.physical_len : 0;
    auto s = p.k.sendmsg(p.out, ByteView(buf).first(phys), msg.size() - sent);
    ASSERT_GT(s.accepted, 0u);
    sent += s.accepted;
  }
  EXPECT_EQ(p.drain_sink(), msg);
  EXPECT_EQ(p.k.snapshot(p.in)->anchors, 0u);
  EXPECT_EQ(p.k.vpimap().size(), 0u);

  p.k.clock_advance(4s);
  EXPECT_TRUE(p.k.snapshot(p.in));
  p.k.clock_advance(1s);
  EXPECT_FALSE(p.k.snapshot(p.in));
  EXPECT_EQ(p.k.counters().teardown_expiries, 0u);
  EXPECT_EQ(p.k.final_snapshot(p.in)->refcount, 0);
}

TEST(Teardown, ExpiryRemovesIdentifierAndResetsState) {
  Path p(selective());
  p.inject(message40(100000));
  Bytes buf(4096);
  p.k.recvmsg(p.in, buf);
  ASSERT_EQ(p.k.vpimap().size(), 1u);
  p.k.sock_close(p.in);
  p.k.clock_advance(0s);
  EXPECT_TRUE(p.k.snapshot(p.in));
  p.k.clock_advance(5s);
  EXPECT_FALSE(p.k.snapshot(p.in));
  EXPECT_EQ(p.k.vpimap().size(), 0u);
  EXPECT_EQ(p.k.counters().teardown_expiries, 1u);
  auto last = p.k.final_snapshot(p.in);
  ASSERT_TRUE(last);
  EXPECT_EQ(last->lifecycle, Lifecycle::Closed);
  EXPECT_EQ(last->rx.phase, RxPhase::Default);
  EXPECT_EQ(last->refcount, 0);
  EXPECT_EQ(last->anchored_bytes, 0u);

  // A late send of the stale identifier misses and takes the copy path.
  p.k.set_recv_limit(p.sink, 0);
  Bytes stale(buf.begin(), buf.begin() + 48);
  stale.resize(4096, 'z');
  p.k.sendmsg(p.out, stale);
  EXPECT_EQ(p.k.counters().vpi_misses, 1u);
  EXPECT_EQ(p.k.snapshot(p.out)->tx.phase, TxPhase::FallbackBypass);
}

TEST(Teardown, StaggeredDeadlinesFreeInDeadlineOrder) {
  Kernel k(selective());
  std::vector<SockId> origins, proxies;
  for (int i = 0; i < 2; ++i) {
    origins.push_back(k.socket(SocketRole::Endpoint));
    proxies.push_back(k.socket(SocketRole::Proxy));
    k.connect(origins.back(), proxies.back());
    Bytes m = message40(1000);
    ASSERT_EQ(k.sendmsg(origins.back(), m).accepted, m.size());
    Bytes buf(100);
    k.recvmsg(proxies.back(), buf);
  }
  // Later socket closes first.
  k.sock_close(proxies[1]);
  k.clock_advance(1s);
  k.sock_close(proxies[0]);
  k.clock_advance(10s);
  EXPECT_EQ(k.freed_order(), (std::vector<SockId>{proxies[1], proxies[0]}));
}

TEST(Teardown, AdvanceByZeroDoesNothing) {
  Path p(selective());
  p.k.clock_advance(0s);
  EXPECT_EQ(p.k.now(), VirtualTime(0));
  EXPECT_EQ(p.k.freed_sockets(), 0u);
  EXPECT_THROW(p.k.clock_advance(VirtualTime(-1)), std::invalid_argument);
}

TEST(LockTracker, FlagsNestedAcquisition) {
  LockTracker t;
  t.on_acquire();
  t.on_release();
  EXPECT_EQ(t.double_holds(), 0u);
  t.on_acquire();
  t.on_acquire();
  t.on_release();
  t.on_release();
  EXPECT_EQ(t.double_holds(), 1u);
  EXPECT_EQ(t.acquisitions(), 3u);
}

TEST(KernelConfig, Validation) {
  KernelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.rcvbuf = 100;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = KernelConfig{};
  c.max_frags = 0;
  EXPECT_THROW(Kernel{c}, std::invalid_argument);
}

// Two proxy sockets forwarding to each other in opposite directions from
// two threads, so each thread's extract and commit contend with the other's.
TEST(Concurrency, OppositeDirectionTransfers) {
  auto cfg = selective();
  cfg.record_messages = false;
  Kernel k(cfg);
  const SockId ex = k.socket(SocketRole::Endpoint), x = k.socket(SocketRole::Proxy);
  const SockId ey = k.socket(SocketRole::Endpoint), y = k.socket(SocketRole::Proxy);
  k.connect(ex, x);
  k.connect(ey, y);

  constexpr int kIterations = 50000;
  std::atomic<bool> done{false};
  std::thread watchdog([&] {
    for (int i = 0; i < 1200 && !done; ++i) std::this_thread::sleep_for(100ms);
    if (!done) {
      std::fprintf(stderr, "opposite-direction transfers stalled\n");
      std::_Exit(124);
    }
  });

  std::atomic<int> failures{0};
  auto pump = [&](SockId origin, SockId from, SockId to, SockId sink) {
    const Bytes msg = message40(100);
    Bytes buf(4096), got(4096);
    for (int i = 0; i < kIterations; ++i) {
      for (std::size_t off = 0; off < msg.size();) off += k.sendmsg(origin, ByteView(msg).subspan(off)).accepted;
      std::size_t moved = 0;
      while (moved < msg.size()) {
        auto r = k.recvmsg(from, buf);
        if (r.would_block) continue;
        for (std::size_t sent = 0; sent < r.logical_len;)
          sent += k.sendmsg(to, ByteView(buf).first(r.logical_len).subspan(sent)).accepted;
        moved += r.logical_len;
      }
      Bytes out;
      while (out.size() < msg.size()) {
        auto r = k.recvmsg(sink, got);
        out.insert(out.end(), got.begin(), got.begin() + static_cast<std::ptrdiff_t>(r.physical_len));
      }
      if (out != msg) ++failures;
    }
  };
  std::thread t1(pump, ex, x, y, ey);
  std::thread t2(pump, ey, y, x, ex);
  t1.join();
  t2.join();
  done = true;
  watchdog.join();

  EXPECT_EQ(failures.load(), 0);
  EXPECT_GE(k.counters().skb_trans_count, 2u * kIterations);
  EXPECT_EQ(k.counters().fastpath_messages, 2u * kIterations);
  EXPECT_EQ(k.locks().double_holds(), 0u);
  EXPECT_EQ(k.vpimap().size(), 0u);
}
