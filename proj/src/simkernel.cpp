// SPDX-License-Identifier: Apache-2.0
#include "selcopy/simkernel.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace selcopy {

const char* to_string(KernelMode m) { return m == KernelMode::Baseline ? "baseline" : "selective"; }

const char* to_string(Lifecycle l) {
  switch (l) {
    case Lifecycle::Open: return "open";
    case Lifecycle::DeferredTeardown: return "deferred-teardown";
    case Lifecycle::Closed: return "closed";
  }
  return "?";
}

void KernelConfig::validate() const {
  prog.validate();
  if (frag_capacity == 0 || max_frags == 0) throw std::invalid_argument("fragment geometry must be positive");
  if (rcvbuf < static_cast<std::int64_t>(prog.tx_lookahead))
    throw std::invalid_argument("receive buffer must hold at least one lookahead window");
  if (sndbuf < 1) throw std::invalid_argument("send buffer must be positive");
  if (grace_period.count() < 0) throw std::invalid_argument("grace period must not be negative");
}

namespace {
thread_local int tl_socket_locks_held = 0;
}

void LockTracker::on_acquire() {
  acquisitions_.fetch_add(1, std::memory_order_relaxed);
  if (tl_socket_locks_held > 0) double_holds_.fetch_add(1, std::memory_order_relaxed);
  ++tl_socket_locks_held;
}

void LockTracker::on_release() { --tl_socket_locks_held; }

struct Kernel::Socket {
  SockId id{};
  SocketRole role = SocketRole::Endpoint;
  std::mutex mu;
  std::mutex drain_mu;  // serializes transmit_drain; taken before any socket lock

  SegmentQueue recv_queue;
  SegmentQueue send_queue;
  MemoryAccount recv_account;
  MemoryAccount send_account;
  std::int64_t recv_reserved = 0;

  int refcount = 1;
  std::size_t anchors = 0;
  std::size_t peak_anchored = 0;
  Lifecycle lifecycle = Lifecycle::Open;
  VirtualTime deadline{};
  std::optional<SockId> peer;

  RxConnState rx;
  TxConnState tx;
};

class Kernel::SocketLock {
 public:
  SocketLock(Socket& s, LockTracker& t) : lock_(s.mu), tracker_(t) { tracker_.on_acquire(); }
  ~SocketLock() { tracker_.on_release(); }
  SocketLock(const SocketLock&) = delete;
  SocketLock& operator=(const SocketLock&) = delete;

 private:
  std::unique_lock<std::mutex> lock_;
  LockTracker& tracker_;
};

struct Kernel::AtomicCounters {
  std::atomic<std::uint64_t> rx_std_bytes{0}, rx_meta_bytes{0}, tx_std_bytes{0}, tx_meta_bytes{0};
  std::atomic<std::uint64_t> skb_trans_count{0}, skb_trans_bytes{0}, segments_forwarded{0}, split_copy_bytes{0};
  std::atomic<std::uint64_t> prog_invocations{0}, vpis_issued{0}, vpi_hits{0}, vpi_misses{0};
  std::atomic<std::uint64_t> rx_fallback_conns{0}, tx_fallback_conns{0}, degraded_messages{0};
  std::atomic<std::uint64_t> fastpath_messages{0}, bypass_messages{0}, anchor_mismatches{0};
  std::atomic<std::uint64_t> underflow_events{0}, overlimit_events{0}, fastpath_partial_accepts{0};
  std::atomic<std::uint64_t> teardown_expiries{0};
};

namespace {

std::string sock_str(SockId id) {
  std::ostringstream os;
  os << id;
  return os.str();
}

}  // namespace

Kernel::Kernel(KernelConfig cfg, std::shared_ptr<const ProtocolProgram> program)
    : cfg_(std::move(cfg)),
      program_(program ? std::move(program) : std::make_shared<Http1Program>()),
      vpimap_(cfg_.vpi_salt, cfg_.vpi_capacity),
      counters_(std::make_unique<AtomicCounters>()) {
  cfg_.validate();
}

Kernel::~Kernel() = default;

SockId Kernel::socket(SocketRole role) {
  auto s = std::make_shared<Socket>();
  s->role = role;
  s->recv_account.base_limit = cfg_.rcvbuf;
  s->send_account.base_limit = cfg_.sndbuf;
  std::unique_lock lock(table_mu_);
  s->id = SockId{next_sock_++};
  sockets_.emplace(s->id, s);
  return s->id;
}

std::shared_ptr<Kernel::Socket> Kernel::get(SockId id) const {
  std::shared_lock lock(table_mu_);
  auto it = sockets_.find(id);
  return it == sockets_.end() ? nullptr : it->second;
}

void Kernel::connect(SockId a, SockId b) {
  if (a == b) throw SocketError(SocketError::Kind::InvalidArgument, "connect: socket cannot peer with itself");
  auto sa = get(a);
  auto sb = get(b);
  if (!sa || !sb) throw SocketError(SocketError::Kind::Closed, "connect: unknown socket");
  {
    SocketLock l(*sa, locks_);
    if (sa->peer) throw SocketError(SocketError::Kind::InvalidArgument, "connect: already connected");
    sa->peer = b;
  }
  {
    SocketLock l(*sb, locks_);
    if (sb->peer) throw SocketError(SocketError::Kind::InvalidArgument, "connect: already connected");
    sb->peer = a;
  }
}

bool Kernel::programs_on(const Socket& s) const {
  return cfg_.mode == KernelMode::Selective && s.role == SocketRole::Proxy;
}

void Kernel::account_or_die(MemoryAccount& a, std::int64_t delta, const char* where) {
  auto r = a.adjust(delta);
  if (r == AdjustOutcome::Ok) return;
  if (r == AdjustOutcome::Underflow) {
    counters_->underflow_events.fetch_add(1);
  } else {
    counters_->overlimit_events.fetch_add(1);
  }
  throw SocketError(SocketError::Kind::InvariantViolation, std::string(where) + ": accounting " + to_string(r));
}

void Kernel::refresh_recv_raise(Socket& s) {
  // Anchored bytes are held on the application's behalf; the budget grows
  // with them (capped at the threshold) so the advertised room is unchanged.
  const auto anchored = static_cast<std::int64_t>(s.recv_queue.logical_consumed());
  s.recv_account.temp_raise = std::min<std::int64_t>(anchored, static_cast<std::int64_t>(cfg_.prog.anchor_threshold));
  s.peak_anchored = std::max(s.peak_anchored, s.recv_queue.logical_consumed());
}

void Kernel::record(MessageRecord rec) {
  if (!cfg_.record_messages) return;
  std::lock_guard lock(records_mu_);
  records_.push_back(std::move(rec));
}

// ---------------------------------------------------------------------------
// Receive

RecvResult Kernel::recvmsg(SockId sock, MutableByteView buf) {
  if (buf.empty()) throw SocketError(SocketError::Kind::InvalidArgument, "recvmsg: zero-capacity buffer");
  auto s = get(sock);
  if (!s) throw SocketError(SocketError::Kind::Closed, "recvmsg: socket " + sock_str(sock) + " is closed");
  RecvResult r;
  std::optional<SockId> peer;
  {
    SocketLock l(*s, locks_);
    if (s->lifecycle != Lifecycle::Open)
      throw SocketError(SocketError::Kind::Closed, "recvmsg: socket " + sock_str(sock) + " is closed");
    r = programs_on(*s) ? recv_selective(*s, buf) : recv_baseline(*s, buf);
    peer = s->peer;
  }
  // Reading frees receive budget; let the peer push what it has queued.
  if (peer && r.logical_len > 0) transmit_drain(*peer);
  return r;
}

RecvResult Kernel::recv_baseline(Socket& s, MutableByteView buf) {
  RecvResult r;
  const std::size_t n = std::min(buf.size(), s.recv_queue.unread_bytes());
  if (n == 0) {
    r.would_block = true;
    return r;
  }
  const std::size_t at = s.recv_queue.logical_consumed();
  s.recv_queue.peek(at, buf.first(n));
  s.recv_queue.extract(at, n);
  account_or_die(s.recv_account, -static_cast<std::int64_t>(n), "recvmsg");
  refresh_recv_raise(s);
  if (s.role == SocketRole::Proxy) counters_->rx_std_bytes.fetch_add(n);
  r.logical_len = r.physical_len = n;
  return r;
}

RecvResult Kernel::recv_selective(Socket& s, MutableByteView buf) {
  RecvResult r;
  ProgConfig pc = cfg_.prog;
  if (vpimap_.size() >= vpimap_.capacity()) pc.anchoring = false;

  std::size_t uoff = 0;
  while (uoff < buf.size()) {
    const std::size_t unread = s.recv_queue.unread_bytes();
    Bytes window(std::min(unread, pc.lookahead));
    s.recv_queue.peek(s.recv_queue.logical_consumed(), window);

    counters_->prog_invocations.fetch_add(1);
    RxDecision d = program_->rx_step(s.rx, window, unread, buf.size() - uoff, pc);
    if (d.entered_fallback) counters_->rx_fallback_conns.fetch_add(1);
    if (d.degraded) counters_->degraded_messages.fetch_add(1);
    if (d.would_block) break;

    for (const auto& a : d.actions) {
      auto dst = buf.subspan(uoff + a.user_offset, a.len);
      switch (a.kind) {
        case RxAction::Kind::CopyToUser: {
          const std::size_t at = s.recv_queue.logical_consumed();
          s.recv_queue.peek(at, dst);
          s.recv_queue.extract(at, a.len);
          account_or_die(s.recv_account, -static_cast<std::int64_t>(a.len), "recvmsg");
          (a.cls == CopyClass::Meta ? counters_->rx_meta_bytes : counters_->rx_std_bytes).fetch_add(a.len);
          r.physical_len += a.len;
          break;
        }
        case RxAction::Kind::InjectVpi: {
          Vpi vpi;
          try {
            vpi = vpimap_.generate(s.id, d.next.seq++, d.next.body_effective, now());
          } catch (const std::length_error&) {
            throw SocketError(SocketError::Kind::InvariantViolation, "recvmsg: identifier map full");
          }
          auto wire = vpi.encode();
          std::memcpy(dst.data(), wire.data(), wire.size());
          s.recv_queue.advance_logical(a.len);
          d.next.pending_vpi = vpi;
          ++s.refcount;
          ++s.anchors;
          counters_->vpis_issued.fetch_add(1);
          counters_->rx_meta_bytes.fetch_add(a.len);
          r.physical_len += a.len;
          break;
        }
        case RxAction::Kind::SkipLogical:
          s.recv_queue.advance_logical(a.len);
          break;
      }
    }
    s.rx = std::move(d.next);
    refresh_recv_raise(s);
    uoff += d.logical_len();
    if (!d.message_done || s.recv_queue.unread_bytes() == 0) break;
  }
  r.logical_len = uoff;
  r.would_block = uoff == 0;
  return r;
}

// ---------------------------------------------------------------------------
// Cross-socket transfer

StagingQueue Kernel::stage_extract(SockId recv_sock, std::size_t n) {
  StagingQueue staging;
  staging.origin = recv_sock;
  if (n == 0) return staging;
  auto s = get(recv_sock);
  if (!s) throw SocketError(SocketError::Kind::Closed, "stage_extract: source socket is gone");
  SocketLock l(*s, locks_);
  if (n > s->recv_queue.logical_consumed())
    throw SocketError(SocketError::Kind::InvariantViolation, "stage_extract: request exceeds anchored bytes");
  const std::size_t split_before = s->recv_queue.split_copy_bytes();
  staging.segments = s->recv_queue.split_front(n);
  staging.total = n;
  account_or_die(s->recv_account, -static_cast<std::int64_t>(n), "stage_extract");
  refresh_recv_raise(*s);
  counters_->split_copy_bytes.fetch_add(s->recv_queue.split_copy_bytes() - split_before);
  return staging;
}

void Kernel::commit_transfer(StagingQueue&& staging, SockId send_sock) {
  if (staging.total == 0) return;
  auto s = get(send_sock);
  if (!s) throw SocketError(SocketError::Kind::Closed, "commit_transfer: destination socket is gone");
  SocketLock l(*s, locks_);
  commit_locked(std::move(staging), *s);
}

void Kernel::commit_locked(StagingQueue&& staging, Socket& s) {
  if (staging.total == 0) return;
  const auto n = static_cast<std::int64_t>(staging.total);
  s.send_account.temp_raise += n;
  account_or_die(s.send_account, n, "commit_transfer");
  counters_->skb_trans_count.fetch_add(1);
  counters_->skb_trans_bytes.fetch_add(staging.total);
  counters_->segments_forwarded.fetch_add(staging.segments.size());
  for (auto& seg : staging.segments) seg.mark_borrowed(true);
  s.send_queue.push_back(std::move(staging.segments));
  staging.segments.clear();
  staging.total = 0;
}

std::size_t Kernel::transmit_drain(SockId sock) {
  auto sender = get(sock);
  if (!sender) return 0;
  std::lock_guard drain(sender->drain_mu);

  std::optional<SockId> peer_id;
  {
    SocketLock l(*sender, locks_);
    peer_id = sender->peer;
    if (!peer_id || sender->send_queue.empty()) return 0;
  }
  auto peer = get(*peer_id);

  std::size_t delivered = 0;
  for (;;) {
    // 1. Reserve receive room at the peer.
    std::int64_t reserved = 0;
    bool peer_open = false;
    if (peer) {
      SocketLock l(*peer, locks_);
      peer_open = peer->lifecycle == Lifecycle::Open;
      if (peer_open) {
        reserved = std::max<std::int64_t>(0, peer->recv_account.room() - peer->recv_reserved);
        peer->recv_reserved += reserved;
      }
    }

    // 2. Detach from the sender's queue. Bytes for a dead peer are dropped.
    std::vector<Segment> segs;
    std::size_t n = 0;
    {
      SocketLock l(*sender, locks_);
      n = peer_open ? std::min(static_cast<std::size_t>(reserved), sender->send_queue.total_bytes())
                    : sender->send_queue.total_bytes();
      if (n > 0) {
        segs = sender->send_queue.split_front(n);
        std::int64_t borrowed = 0;
        for (const auto& seg : segs)
          if (seg.borrowed()) borrowed += static_cast<std::int64_t>(seg.size());
        account_or_die(sender->send_account, -static_cast<std::int64_t>(n), "transmit_drain");
        sender->send_account.temp_raise -= std::min(sender->send_account.temp_raise, borrowed);
      }
    }

    // 3. Deliver, re-aggregated as on ingress.
    if (peer) {
      SocketLock l(*peer, locks_);
      peer->recv_reserved -= reserved;
      if (n > 0 && peer_open && peer->lifecycle == Lifecycle::Open) {
        Bytes data = concat(segs);
        peer->recv_queue.push_back(segment_build(data, cfg_.frag_capacity, cfg_.max_frags));
        account_or_die(peer->recv_account, static_cast<std::int64_t>(n), "transmit_drain");
        delivered += n;
      }
    }
    if (n == 0) break;
  }
  return delivered;
}

// ---------------------------------------------------------------------------
// Send

SendResult Kernel::sendmsg(SockId sock, ByteView buf) { return sendmsg(sock, buf, buf.size()); }

SendResult Kernel::sendmsg(SockId sock, ByteView buf, std::size_t logical_len) {
  if (logical_len == 0) throw SocketError(SocketError::Kind::InvalidArgument, "sendmsg: zero-length send");
  if (buf.size() > logical_len)
    throw SocketError(SocketError::Kind::InvalidArgument, "sendmsg: buffer larger than logical length");
  auto s = get(sock);
  if (!s) throw SocketError(SocketError::Kind::Closed, "sendmsg: socket " + sock_str(sock) + " is closed");

  SendResult r;
  if (programs_on(*s)) {
    r = send_selective(*s, buf, logical_len);
  } else {
    if (buf.size() != logical_len)
      throw SocketError(SocketError::Kind::InvalidArgument, "sendmsg: logical length needs the selective path");
    SocketLock l(*s, locks_);
    if (s->lifecycle != Lifecycle::Open)
      throw SocketError(SocketError::Kind::Closed, "sendmsg: socket " + sock_str(sock) + " is closed");
    r = send_baseline(*s, buf);
  }
  if (r.accepted > 0) transmit_drain(sock);
  return r;
}

SendResult Kernel::send_baseline(Socket& s, ByteView buf) {
  SendResult r;
  const auto n = std::min<std::size_t>(buf.size(), static_cast<std::size_t>(s.send_account.room()));
  if (n == 0) {
    r.would_block = true;
    return r;
  }
  s.send_queue.push_back(segment_build(buf.first(n), cfg_.frag_capacity, cfg_.max_frags));
  account_or_die(s.send_account, static_cast<std::int64_t>(n), "sendmsg");
  if (s.role == SocketRole::Proxy) counters_->tx_std_bytes.fetch_add(n);
  r.accepted = n;
  return r;
}

SendResult Kernel::send_selective(Socket& s, ByteView buf, std::size_t logical_len) {
  SendResult r;
  VpiResolver resolve = [this](std::span<const std::uint8_t, Vpi::kWireSize> b) { return vpimap_.lookup(b); };

  while (r.accepted < logical_len) {
    const std::size_t phys_off = std::min(r.accepted, buf.size());
    ByteView out = buf.subspan(phys_off);
    const std::size_t want = logical_len - r.accepted;

    // A. Decide, and size the acceptance against the send budget.
    TxDecision d;
    std::size_t accept = 0;
    std::size_t transfer = 0;
    std::size_t transfer_at = 0;
    {
      SocketLock l(s, locks_);
      if (s.lifecycle != Lifecycle::Open)
        throw SocketError(SocketError::Kind::Closed, "sendmsg: socket " + sock_str(s.id) + " is closed");
      counters_->prog_invocations.fetch_add(1);
      try {
        d = program_->tx_pre(s.tx, out, want, resolve, cfg_.prog);
      } catch (const std::invalid_argument& e) {
        throw SocketError(SocketError::Kind::InvalidArgument, e.what());
      }
      auto room = static_cast<std::size_t>(s.send_account.room());
      for (const auto& a : d.actions) {
        if (a.kind == TxAction::Kind::TransferAnchored) {
          transfer = a.len;
          transfer_at = a.user_offset;
          accept += a.len;
          continue;
        }
        const std::size_t k = std::min(a.len, room);
        room -= k;
        accept += k;
        if (k < a.len) break;
      }
      // A transfer is all-or-nothing: drop it unless everything before it fits.
      if (transfer > 0 && accept < transfer_at + transfer) {
        accept = std::min(accept, transfer_at);
        transfer = 0;
      }
    }
    if (d.vpi_hit) counters_->vpi_hits.fetch_add(1);
    if (d.vpi_miss) counters_->vpi_misses.fetch_add(1);
    if (d.entered_fallback) counters_->tx_fallback_conns.fetch_add(1);

    // B. Detach the anchored payload under the source lock only.
    StagingQueue staging;
    if (transfer > 0) {
      const SockId src = d.next.source_sock.value();
      staging = stage_extract(src, transfer);
      if (!vpimap_.consume(*d.next.vpi, transfer))
        throw SocketError(SocketError::Kind::InvariantViolation, "sendmsg: transfer exceeds identifier budget");
    }

    // C. Commit under the destination lock only.
    TxPostResult post;
    {
      SocketLock l(s, locks_);
      s.tx = std::move(d.next);
      std::size_t done = 0;
      for (const auto& a : d.actions) {
        if (done >= accept) break;
        const std::size_t k = std::min(a.len, accept - done);
        if (a.kind == TxAction::Kind::TransferAnchored) {
          if (k != a.len) counters_->fastpath_partial_accepts.fetch_add(1);
          commit_locked(std::move(staging), s);
          s.tx.transferred_bytes += k;
        } else {
          s.send_queue.push_back(
              segment_build(out.subspan(a.user_offset, k), cfg_.frag_capacity, cfg_.max_frags));
          account_or_die(s.send_account, static_cast<std::int64_t>(k), "sendmsg");
          const bool meta = a.kind == TxAction::Kind::CopyFromUser;
          (meta ? s.tx.meta_copied_bytes : s.tx.std_copied_bytes) += k;
          (meta ? counters_->tx_meta_bytes : counters_->tx_std_bytes).fetch_add(k);
        }
        done += k;
      }
      counters_->prog_invocations.fetch_add(1);
      try {
        post = program_->tx_post(s.tx, d, out, accept);
      } catch (const ProtocolDesync& e) {
        throw SocketError(SocketError::Kind::InvariantViolation, e.what());
      }
    }
    r.accepted += accept;

    // D. Completion bookkeeping.
    if (post.outcome == TxPostOutcome::Completed && post.completed_phase == TxPhase::FastPath) {
      complete_fastpath(s, post);
    } else if (post.outcome != TxPostOutcome::Continue) {
      MessageRecord rec;
      rec.path = post.outcome == TxPostOutcome::ShortCompleted ? MessageRecord::Path::Short
                                                                 : MessageRecord::Path::FallbackBypass;
      if (rec.path == MessageRecord::Path::FallbackBypass) counters_->bypass_messages.fetch_add(1);
      rec.tx_sock = s.id;
      rec.tx_metadata_len = post.metadata_len;
      rec.total_len = post.expected_total;
      rec.body_len = post.expected_total - post.metadata_len;
      rec.tx_meta_copied = post.meta_copied_bytes;
      rec.tx_std_copied = post.std_copied_bytes;
      record(std::move(rec));
    }

    if (accept == 0 || accept < d.span) break;
  }
  r.would_block = r.accepted == 0;
  return r;
}

void Kernel::complete_fastpath(Socket& tx_sock, const TxPostResult& post) {
  counters_->fastpath_messages.fetch_add(1);
  MessageRecord rec;
  rec.path = MessageRecord::Path::FastPath;
  rec.tx_sock = tx_sock.id;
  rec.rx_sock = post.source_sock;
  rec.vpi = post.vpi;
  rec.tx_metadata_len = post.metadata_len;
  rec.total_len = post.expected_total;
  rec.body_len = post.expected_total - post.metadata_len;
  rec.anchor_total = post.anchor_total;
  rec.tx_meta_copied = post.meta_copied_bytes;
  rec.tx_std_copied = post.std_copied_bytes;
  rec.transferred = post.transferred_bytes;

  if (post.vpi) vpimap_.remove(*post.vpi);
  if (auto src = post.source_sock ? get(*post.source_sock) : nullptr) {
    SocketLock l(*src, locks_);
    if (src->rx.pending_vpi == post.vpi) {
      rec.rx_metadata_len = src->rx.metadata_len;
      rec.rx_meta_copied = src->rx.meta_copied_bytes;
      rec.rx_std_copied = src->rx.std_copied_bytes;
    }
    release_anchor_locked(*src, post.vpi, true);
  }
  record(std::move(rec));
}

void Kernel::release_anchor_locked(Socket& s, std::optional<Vpi> vpi, bool drop_anchored) {
  if (drop_anchored && s.recv_queue.logical_consumed() > 0 && (!vpi || s.rx.pending_vpi == vpi)) {
    // Anchored bytes the egress never claimed.
    const std::size_t left = s.recv_queue.logical_consumed();
    counters_->anchor_mismatches.fetch_add(1);
    s.recv_queue.split_front(left);
    account_or_die(s.recv_account, -static_cast<std::int64_t>(left), "release_anchor");
  }
  if (vpi && s.rx.pending_vpi == vpi) s.rx.reset_message();
  if (s.anchors > 0) {
    --s.anchors;
    --s.refcount;
  }
  refresh_recv_raise(s);
}

// ---------------------------------------------------------------------------
// Lifecycle

void Kernel::free_socket(SockId id) {
  auto last = snapshot(id);
  std::unique_lock lock(table_mu_);
  if (sockets_.erase(id) > 0) {
    freed_.push_back(id);
    if (last) final_states_.emplace(id, std::move(*last));
  }
}

void Kernel::sock_close(SockId sock) {
  auto s = get(sock);
  if (!s) return;
  transmit_drain(sock);
  bool free_now = false;
  {
    SocketLock l(*s, locks_);
    if (s->lifecycle != Lifecycle::Open) return;
    if (s->anchors > 0) {
      s->lifecycle = Lifecycle::DeferredTeardown;
      s->deadline = now() + cfg_.grace_period;
    } else {
      s->lifecycle = Lifecycle::Closed;
      s->refcount = 0;
      if (const std::size_t left = s->recv_queue.total_bytes(); left > 0) {
        s->recv_queue.split_front(left);
        account_or_die(s->recv_account, -static_cast<std::int64_t>(left), "close");
      }
      free_now = true;
    }
  }
  if (free_now) free_socket(sock);
}

VirtualTime Kernel::now() const {
  std::lock_guard lock(clock_mu_);
  return now_;
}

void Kernel::clock_advance(VirtualTime dt) {
  if (dt.count() < 0) throw std::invalid_argument("clock_advance: time runs forward only");
  VirtualTime t;
  {
    std::lock_guard lock(clock_mu_);
    now_ += dt;
    t = now_;
  }

  std::vector<std::pair<VirtualTime, std::shared_ptr<Socket>>> due;
  {
    std::shared_lock lock(table_mu_);
    for (const auto& [id, s] : sockets_) due.emplace_back(VirtualTime{}, s);
  }
  std::vector<std::pair<VirtualTime, std::shared_ptr<Socket>>> expired;
  for (auto& [_, s] : due) {
    SocketLock l(*s, locks_);
    if (s->lifecycle == Lifecycle::DeferredTeardown && s->deadline <= t) expired.emplace_back(s->deadline, s);
  }
  std::sort(expired.begin(), expired.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : to_u64(a.second->id) < to_u64(b.second->id);
  });

  for (auto& [_, s] : expired) {
    vpimap_.remove_for_source(s->id);
    {
      SocketLock l(*s, locks_);
      if (s->lifecycle != Lifecycle::DeferredTeardown) continue;
      if (s->anchors > 0) counters_->teardown_expiries.fetch_add(1);
      const std::size_t left = s->recv_queue.total_bytes();
      if (left > 0) {
        s->recv_queue.split_front(left);
        account_or_die(s->recv_account, -static_cast<std::int64_t>(left), "teardown");
      }
      s->rx.reset_message();
      s->anchors = 0;
      s->refcount = 0;
      s->lifecycle = Lifecycle::Closed;
      refresh_recv_raise(*s);
    }
    free_socket(s->id);
  }
}

// ---------------------------------------------------------------------------
// Introspection

std::optional<SocketSnapshot> Kernel::snapshot(SockId sock) const {
  auto s = get(sock);
  if (!s) return std::nullopt;
  SocketLock l(*s, locks_);
  SocketSnapshot snap;
  snap.id = s->id;
  snap.role = s->role;
  snap.lifecycle = s->lifecycle;
  snap.refcount = s->refcount;
  snap.anchors = s->anchors;
  snap.recv_bytes = s->recv_queue.total_bytes();
  snap.recv_unread = s->recv_queue.unread_bytes();
  snap.anchored_bytes = s->recv_queue.logical_consumed();
  snap.peak_anchored = s->peak_anchored;
  snap.recv_segments = s->recv_queue.segment_count();
  snap.send_bytes = s->send_queue.total_bytes();
  snap.recv_account = s->recv_account;
  snap.send_account = s->send_account;
  snap.rx = s->rx;
  snap.tx = s->tx;
  snap.deadline = s->deadline;
  return snap;
}

std::vector<SockId> Kernel::live_sockets() const {
  std::shared_lock lock(table_mu_);
  std::vector<SockId> out;
  out.reserve(sockets_.size());
  for (const auto& [id, _] : sockets_) out.push_back(id);
  std::sort(out.begin(), out.end(), [](SockId a, SockId b) { return to_u64(a) < to_u64(b); });
  return out;
}

std::size_t Kernel::freed_sockets() const {
  std::shared_lock lock(table_mu_);
  return freed_.size();
}

std::vector<SockId> Kernel::freed_order() const {
  std::shared_lock lock(table_mu_);
  return freed_;
}

std::optional<SocketSnapshot> Kernel::final_snapshot(SockId sock) const {
  std::shared_lock lock(table_mu_);
  auto it = final_states_.find(sock);
  if (it == final_states_.end()) return std::nullopt;
  return it->second;
}

KernelCounters Kernel::counters() const {
  const auto& c = *counters_;
  KernelCounters k;
  k.rx_std_bytes = c.rx_std_bytes;
  k.rx_meta_bytes = c.rx_meta_bytes;
  k.tx_std_bytes = c.tx_std_bytes;
  k.tx_meta_bytes = c.tx_meta_bytes;
  k.skb_trans_count = c.skb_trans_count;
  k.skb_trans_bytes = c.skb_trans_bytes;
  k.segments_forwarded = c.segments_forwarded;
  k.split_copy_bytes = c.split_copy_bytes;
  k.prog_invocations = c.prog_invocations;
  k.vpis_issued = c.vpis_issued;
  k.vpi_hits = c.vpi_hits;
  k.vpi_misses = c.vpi_misses;
  k.rx_fallback_conns = c.rx_fallback_conns;
  k.tx_fallback_conns = c.tx_fallback_conns;
  k.degraded_messages = c.degraded_messages;
  k.fastpath_messages = c.fastpath_messages;
  k.bypass_messages = c.bypass_messages;
  k.anchor_mismatches = c.anchor_mismatches;
  k.underflow_events = c.underflow_events;
  k.overlimit_events = c.overlimit_events;
  k.fastpath_partial_accepts = c.fastpath_partial_accepts;
  k.teardown_expiries = c.teardown_expiries;
  return k;
}

std::vector<MessageRecord> Kernel::message_records() const {
  std::lock_guard lock(records_mu_);
  return records_;
}

void Kernel::set_send_limit(SockId sock, std::int64_t base_limit) {
  auto s = get(sock);
  if (!s) throw SocketError(SocketError::Kind::Closed, "set_send_limit: unknown socket");
  SocketLock l(*s, locks_);
  s->send_account.base_limit = base_limit;
}

void Kernel::set_recv_limit(SockId sock, std::int64_t base_limit) {
  auto s = get(sock);
  if (!s) throw SocketError(SocketError::Kind::Closed, "set_recv_limit: unknown socket");
  SocketLock l(*s, locks_);
  s->recv_account.base_limit = base_limit;
}

}  // namespace selcopy
