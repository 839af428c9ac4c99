// SPDX-License-Identifier: Apache-2.0
//
// Scenario driver: a client, an HTTP/1.1 forwarding proxy and a backend per
// connection, all talking through one simulated kernel. The proxy code is
// the same function in both kernel modes; only the kernel differs.
#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "selcopy/bufcore.hpp"
#include "selcopy/simkernel.hpp"

namespace selcopy {

// ---------------------------------------------------------------------------
// Workload

struct HttpMessage {
  Bytes wire;                  // exactly as the origin sends it
  std::size_t head_len = 0;
  std::size_t body_len = 0;    // payload bytes, excluding chunk framing
  Framing framing = Framing::NoBody;
  std::vector<std::size_t> chunks;  // chunk sizes, terminal chunk excluded
};

struct Exchange {
  HttpMessage request;
  HttpMessage response;
};

struct ConnectionWorkload {
  std::vector<Exchange> exchanges;
};

struct WorkloadConfig {
  std::size_t connections = 1;
  std::size_t exchanges_per_connection = 1;
  /// Response body sizes are drawn from this list when non-empty ...
  std::vector<std::size_t> body_sizes;
  /// ... otherwise log-uniformly from [0, max_body] with a share of tiny bodies.
  std::size_t max_body = 64 * 1024;
  double tiny_body_share = 0.15;  // bodies of 0..7 bytes
  double chunked_share = 0.0;
  std::size_t max_chunk = 16 * 1024;
  std::size_t max_request_body = 64;
  /// Heads padded past this many bytes overflow the ingress lookahead.
  double oversized_head_share = 0.0;
  std::size_t head_budget = 240;  // upper bound for ordinary heads
  bool fixed_headers = false;     // identical header text for every message
};

struct Workload {
  std::uint64_t seed = 0;
  std::vector<ConnectionWorkload> connections;
};

Workload generate_workload(const WorkloadConfig& cfg, std::uint64_t seed);

/// Builds a response with a fixed header block of exactly `head_len` bytes
/// (if achievable) followed by `body_len` bytes.
HttpMessage make_response(std::size_t body_len, std::size_t head_len, bool chunked, std::size_t chunk_size,
                          std::uint64_t seed);
HttpMessage make_request(std::size_t body_len, std::size_t index, std::uint64_t seed);

/// Every connection runs `exchanges` identical-shape exchanges: a bodiless
/// request and a response with a `head_len`-byte head and `body_len` bytes
/// of payload (chunks of `chunk_size` when chunked).
Workload uniform_workload(std::size_t connections, std::size_t exchanges, std::size_t body_len, bool chunked,
                          std::size_t chunk_size, std::size_t head_len, std::uint64_t seed);

/// Number of identifiers a selective ingress issues for `m`: one per body
/// or chunk of at least 8 bytes.
std::size_t anchorable_units(const HttpMessage& m);

// ---------------------------------------------------------------------------
// Proxy forwarding logic

inline constexpr std::string_view kViaHeader = "Via: 1.1 selcopy-proxy\r\n";

/// Inserts the proxy's Via header in front of the head's final empty line.
Bytes rewrite_head(ByteView head);
/// The stream a final receiver must see for one origin message.
Bytes expected_forwarded(const HttpMessage& m);

/// Incremental HTTP/1.x forwarder, one per direction. It reads heads and
/// chunk-size lines and counts body bytes without looking at them.
class HttpForwarder {
 public:
  enum class State { Head, Body, ChunkLine, ChunkData, ChunkDataEnd, Trailers };

  /// Consumes `in` and appends forwardable bytes to `out`.
  void feed(ByteView in, Bytes& out);

  State state() const { return state_; }
  bool in_metadata() const { return state_ == State::Head || state_ == State::ChunkLine || state_ == State::Trailers; }
  std::size_t messages_done() const { return messages_done_; }
  /// Hash over every forwarding decision taken so far.
  std::uint64_t decision_hash() const { return decision_hash_; }

 private:
  void note(std::uint64_t v);
  void finish_message();

  State state_ = State::Head;
  Bytes pending_;  // partial head, chunk line or trailer line
  std::size_t remaining_ = 0;
  std::size_t messages_done_ = 0;
  std::uint64_t decision_hash_ = 0xcbf29ce484222325ULL;
};

// ---------------------------------------------------------------------------
// Results

struct Transcript {
  struct Connection {
    Bytes to_backend;
    Bytes to_client;
  };
  std::vector<Connection> connections;
};

struct TranscriptDiff {
  bool equal = true;
  std::size_t connection = 0;
  std::string stream;     // "to_backend" or "to_client"
  std::size_t offset = 0; // first differing byte
  std::string detail;
};

TranscriptDiff compare_transcripts(const Transcript& a, const Transcript& b);

/// Run metrics, proxy sockets only.
struct Metrics {
  std::uint64_t std_copy_bytes = 0;
  std::uint64_t std_alloc_bytes = 0;
  std::uint64_t meta_selcopy_bytes = 0;
  std::uint64_t meta_alloc_bytes = 0;
  std::uint64_t meta_prog_invocations = 0;
  std::uint64_t meta_skb_trans_count = 0;
  std::uint64_t split_copy_bytes = 0;
  std::uint64_t segments_forwarded = 0;

  std::uint64_t meta_skb_trans_bytes = 0;
  std::uint64_t kernel_to_user_bytes = 0;
  std::uint64_t user_to_kernel_bytes = 0;
  std::uint64_t vpis_issued = 0;
  std::uint64_t vpi_hits = 0;
  std::uint64_t vpi_misses = 0;
  std::uint64_t fastpath_messages = 0;
  std::uint64_t bypass_messages = 0;
  std::uint64_t fallback_connections = 0;
  std::uint64_t degraded_messages = 0;
  std::uint64_t underflow_events = 0;
  std::uint64_t lock_double_holds = 0;
  std::uint64_t peak_anchored_bytes = 0;

  static Metrics from(const KernelCounters& c, const LockTracker& locks);
};

struct CostWeights {
  double copy_byte = 1.0;
  double alloc_byte = 0.5;
  double prog_invocation = 50.0;
  double skb_transfer = 100.0;
  double split_copy_byte = 1.0;
};

double cost_model_eval(const Metrics& m, const CostWeights& w);

// ---------------------------------------------------------------------------
// Scenario

struct CapPolicy {
  std::size_t head_min = 1;
  std::size_t head_max = 512;
  std::size_t body_min = 9;
  std::size_t body_max = 64 * 1024;
  double tiny_share = 0.02;  // occasional 1..8 byte receives in the body phase
};

struct ScenarioConfig {
  KernelConfig kernel;
  CapPolicy proxy_caps;
  CapPolicy endpoint_caps;
  std::uint64_t schedule_seed = 1;
  bool stress = false;
  std::chrono::milliseconds watchdog{std::chrono::minutes(5)};
  std::size_t stall_rounds = 64;  // deterministic mode: rounds without progress
  /// Send-buffer limit applied to proxy sockets (0 = kernel default).
  std::int64_t proxy_sndbuf = 0;
};

struct ScenarioResult {
  Transcript transcript;
  Transcript expected;
  Metrics metrics;
  KernelCounters counters;
  std::vector<MessageRecord> records;
  std::uint64_t decision_hash = 0;  // proxy forwarding decisions
  std::uint64_t call_hash = 0;      // proxy recv/send call sequence
  std::size_t proxy_calls = 0;
  std::vector<std::string> violations;  // audit failures
  bool transcript_ok = false;

  bool ok() const { return transcript_ok && violations.empty(); }
};

ScenarioResult run_scenario(const ScenarioConfig& cfg, const Workload& wl);

/// One randomized differential case: the same workload under both kernel
/// modes, with randomized buffer sizes, fragment geometry and receive sizes.
struct FuzzCase {
  std::uint64_t seed = 0;
  WorkloadConfig workload;
  ScenarioConfig scenario;
};

struct FuzzOutcome {
  bool ok = true;
  std::string failure;
  ScenarioResult baseline;
  ScenarioResult selective;
};

FuzzCase make_fuzz_case(std::uint64_t seed, std::size_t max_body = 2u << 20);
/// With `corrupt_identifiers` the selective ingress writes payload bytes
/// where identifiers would go, so every egress lookup misses.
FuzzOutcome run_fuzz_case(const FuzzCase& fc, bool corrupt_identifiers = false);

/// End-to-end expectation for a workload: origin bytes plus the proxy's
/// header rewrite.
Transcript expected_transcript(const Workload& wl);

}  // namespace selcopy
