// SPDX-License-Identifier: Apache-2.0
//
// Simulated socket layer. recvmsg/sendmsg/close are shaped like their
// POSIX counterparts so the same application code runs on either mode:
//
//   Baseline  - every byte crosses the user boundary by copy.
//   Selective - protocol programs pick out metadata; payload stays anchored
//               in the receive queue and moves to the egress socket by
//               segment ownership transfer.
//
// Locking: every socket has its own mutex. No code path holds two socket
// mutexes at once; cross-socket moves go through a staging queue. The VPI
// map lock and the socket-table lock are leaves.
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "selcopy/bufcore.hpp"
#include "selcopy/protoprog.hpp"
#include "selcopy/types.hpp"
#include "selcopy/vpimap.hpp"

namespace selcopy {

enum class KernelMode { Baseline, Selective };
const char* to_string(KernelMode m);

/// Proxy sockets run the protocol programs (in Selective mode) and are the
/// only ones counted in copy metrics. Endpoints model the client and the
/// backend, which always use ordinary copies.
enum class SocketRole { Proxy, Endpoint };

enum class Lifecycle { Open, DeferredTeardown, Closed };
const char* to_string(Lifecycle l);

struct KernelConfig {
  KernelMode mode = KernelMode::Selective;
  ProgConfig prog;
  std::size_t frag_capacity = kDefaultFragCapacity;
  std::size_t max_frags = kDefaultMaxFrags;
  std::int64_t rcvbuf = 256 * 1024;
  std::int64_t sndbuf = 256 * 1024;
  VirtualTime grace_period = std::chrono::seconds(5);
  std::uint64_t vpi_salt = 0x5eed;
  std::size_t vpi_capacity = VpiMap::kUnbounded;
  bool record_messages = true;

  void validate() const;
};

class SocketError : public std::runtime_error {
 public:
  enum class Kind { Closed, InvalidArgument, InvariantViolation };
  SocketError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Counts socket-lock acquisitions and flags any acquisition made while the
/// same thread already holds another socket lock.
class LockTracker {
 public:
  void on_acquire();
  void on_release();

  std::uint64_t acquisitions() const { return acquisitions_.load(); }
  std::uint64_t double_holds() const { return double_holds_.load(); }

 private:
  std::atomic<std::uint64_t> acquisitions_{0};
  std::atomic<std::uint64_t> double_holds_{0};
};

struct StagingQueue {
  std::vector<Segment> segments;
  std::size_t total = 0;
  SockId origin{};
};

struct RecvResult {
  std::size_t logical_len = 0;   // what recv() returns to the application
  std::size_t physical_len = 0;  // bytes actually written into the buffer
  bool would_block = false;
};

struct SendResult {
  std::size_t accepted = 0;
  bool would_block = false;
};

/// Kernel-side counters. Only proxy-role sockets contribute to the copy
/// and transfer counters.
struct KernelCounters {
  std::uint64_t rx_std_bytes = 0;   // kernel->user, full copy
  std::uint64_t rx_meta_bytes = 0;  // kernel->user, metadata + identifiers
  std::uint64_t tx_std_bytes = 0;   // user->kernel, full copy
  std::uint64_t tx_meta_bytes = 0;  // user->kernel, metadata
  std::uint64_t skb_trans_count = 0;
  std::uint64_t skb_trans_bytes = 0;
  std::uint64_t segments_forwarded = 0;
  std::uint64_t split_copy_bytes = 0;
  std::uint64_t prog_invocations = 0;
  std::uint64_t vpis_issued = 0;
  std::uint64_t vpi_hits = 0;
  std::uint64_t vpi_misses = 0;
  std::uint64_t rx_fallback_conns = 0;
  std::uint64_t tx_fallback_conns = 0;
  std::uint64_t degraded_messages = 0;
  std::uint64_t fastpath_messages = 0;
  std::uint64_t bypass_messages = 0;
  std::uint64_t anchor_mismatches = 0;
  std::uint64_t underflow_events = 0;
  std::uint64_t overlimit_events = 0;
  std::uint64_t fastpath_partial_accepts = 0;
  std::uint64_t teardown_expiries = 0;
};

/// One completed egress message on a proxy socket.
struct MessageRecord {
  enum class Path { FastPath, FallbackBypass, Short };
  Path path = Path::Short;
  SockId tx_sock{};
  std::optional<SockId> rx_sock;
  std::optional<Vpi> vpi;
  std::size_t tx_metadata_len = 0;
  std::size_t rx_metadata_len = 0;
  std::size_t total_len = 0;  // egress message bytes, metadata + body
  std::size_t body_len = 0;
  std::size_t anchor_total = 0;
  std::size_t rx_meta_copied = 0;
  std::size_t rx_std_copied = 0;
  std::size_t tx_meta_copied = 0;
  std::size_t tx_std_copied = 0;
  std::size_t transferred = 0;
};

/// Point-in-time view of one socket, for tests and audits.
struct SocketSnapshot {
  SockId id{};
  SocketRole role = SocketRole::Endpoint;
  Lifecycle lifecycle = Lifecycle::Open;
  int refcount = 0;
  std::size_t anchors = 0;
  std::size_t recv_bytes = 0;
  std::size_t recv_unread = 0;
  std::size_t anchored_bytes = 0;
  std::size_t peak_anchored = 0;
  std::size_t recv_segments = 0;
  std::size_t send_bytes = 0;
  MemoryAccount recv_account;
  MemoryAccount send_account;
  RxConnState rx;
  TxConnState tx;
  VirtualTime deadline{};
};

class Kernel {
 public:
  explicit Kernel(KernelConfig cfg, std::shared_ptr<const ProtocolProgram> program = nullptr);
  ~Kernel();

  Kernel(const Kernel&) = delete;
  Kernel& operator=(const Kernel&) = delete;

  const KernelConfig& config() const { return cfg_; }
  KernelMode mode() const { return cfg_.mode; }

  SockId socket(SocketRole role);
  /// Wires a bidirectional, lossless, instantaneous link.
  void connect(SockId a, SockId b);

  /// Non-blocking receive into `buf`. In Selective mode bytes standing for
  /// anchored payload are left untouched in `buf`.
  RecvResult recvmsg(SockId sock, MutableByteView buf);

  /// Non-blocking send. `buf.size()` is the logical length.
  SendResult sendmsg(SockId sock, ByteView buf);
  /// As above, with a logical length that may run past the physical bytes
  /// (the tail can only be anchored payload).
  SendResult sendmsg(SockId sock, ByteView buf, std::size_t logical_len);

  /// Phase one of a cross-socket move: detaches `n` anchored bytes under
  /// the receive socket's lock only.
  StagingQueue stage_extract(SockId recv_sock, std::size_t n);
  /// Phase two: appends the staged segments under the send socket's lock
  /// only, lifting its budget by exactly the staged size.
  void commit_transfer(StagingQueue&& staging, SockId send_sock);

  /// Moves queued send bytes to the peer's receive queue, re-segmented as
  /// on ingress, as far as the peer's receive budget allows.
  std::size_t transmit_drain(SockId sock);

  void sock_close(SockId sock);
  void clock_advance(VirtualTime dt);
  VirtualTime now() const;

  std::optional<SocketSnapshot> snapshot(SockId sock) const;
  std::vector<SockId> live_sockets() const;
  std::size_t freed_sockets() const;
  /// Ids of freed sockets, in the order they were freed.
  std::vector<SockId> freed_order() const;
  /// State of a freed socket as it was just before it was freed.
  std::optional<SocketSnapshot> final_snapshot(SockId sock) const;

  KernelCounters counters() const;
  const LockTracker& locks() const { return locks_; }
  VpiMap& vpimap() { return vpimap_; }
  const VpiMap& vpimap() const { return vpimap_; }
  std::vector<MessageRecord> message_records() const;

  /// Test hook: overwrite a socket's send budget.
  void set_send_limit(SockId sock, std::int64_t base_limit);
  void set_recv_limit(SockId sock, std::int64_t base_limit);

 private:
  struct Socket;
  class SocketLock;
  friend class SocketLock;
  struct AtomicCounters;

  std::shared_ptr<Socket> get(SockId id) const;
  void free_socket(SockId id);
  RecvResult recv_baseline(Socket& s, MutableByteView buf);
  RecvResult recv_selective(Socket& s, MutableByteView buf);
  SendResult send_baseline(Socket& s, ByteView buf);
  SendResult send_selective(Socket& s, ByteView buf, std::size_t logical_len);
  void commit_locked(StagingQueue&& staging, Socket& s);
  void complete_fastpath(Socket& tx_sock, const TxPostResult& post);
  void release_anchor_locked(Socket& s, std::optional<Vpi> vpi, bool drop_anchored);
  void account_or_die(MemoryAccount& a, std::int64_t delta, const char* where);
  void refresh_recv_raise(Socket& s);
  void harvest_split_bytes(Socket& s);
  void record(MessageRecord rec);
  bool programs_on(const Socket& s) const;

  KernelConfig cfg_;
  std::shared_ptr<const ProtocolProgram> program_;
  VpiMap vpimap_;
  mutable LockTracker locks_;
  std::unique_ptr<AtomicCounters> counters_;

  mutable std::shared_mutex table_mu_;
  std::unordered_map<SockId, std::shared_ptr<Socket>> sockets_;
  std::uint64_t next_sock_ = 1;
  std::vector<SockId> freed_;
  std::unordered_map<SockId, SocketSnapshot> final_states_;

  mutable std::mutex clock_mu_;
  VirtualTime now_{0};

  mutable std::mutex records_mu_;
  std::vector<MessageRecord> records_;
};

}  // namespace selcopy
