// SPDX-License-Identifier: Apache-2.0
//
// Protocol programs: the control plane that tells the simulated kernel
// which bytes of a stream are metadata (copied to/from user space) and
// which are opaque payload (anchored on receive, transferred on send).
//
// Everything here is a pure function of its inputs. The kernel owns the
// per-connection state, runs the programs, and executes the returned
// data-plane actions.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "selcopy/bufcore.hpp"
#include "selcopy/types.hpp"
#include "selcopy/vpimap.hpp"

namespace selcopy {

inline constexpr std::size_t kDefaultLookahead = 256;
inline constexpr std::size_t kDefaultTxLookahead = 1024;
inline constexpr std::size_t kDefaultAnchorThreshold = 3u << 20;
inline constexpr std::size_t kMinAnchoredBody = Vpi::kWireSize;

// ---------------------------------------------------------------------------
// Knuth-Morris-Pratt

using KmpTable = std::vector<std::size_t>;

/// table[i] = length of the longest proper border of pattern[0..=i].
/// Throws std::invalid_argument on an empty pattern.
KmpTable kmp_build(ByteView pattern);

std::optional<std::size_t> kmp_search(ByteView window, ByteView pattern, const KmpTable& table);

ByteView as_bytes(std::string_view s);

// ---------------------------------------------------------------------------
// HTTP/1.0 and HTTP/1.1 framing

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Framing { ContentLength, Chunked, NoBody };

const char* to_string(Framing f);

struct HeadInfo {
  std::size_t head_len = 0;  // includes the terminating empty line
  Framing framing = Framing::NoBody;
  std::optional<std::size_t> body_len;  // set only for ContentLength
};

/// `head` must hold a complete header block ending in CRLF CRLF.
/// Transfer-Encoding: chunked wins over Content-Length.
HeadInfo http1_parse_head(ByteView head);

struct ChunkHeader {
  std::size_t hdr_len = 0;
  std::size_t chunk_size = 0;
  bool terminal() const { return chunk_size == 0; }
};

/// Parses a chunk-size line at a chunk boundary. With `after_data` the
/// boundary is the CRLF closing the previous chunk's data, and hdr_len
/// covers it. For the terminal chunk hdr_len extends through the trailer
/// section's final CRLF. Returns nullopt when the window is incomplete;
/// throws ParseError on a malformed size.
std::optional<ChunkHeader> http1_parse_chunk_header(ByteView window, bool after_data = false);

/// Where the next metadata block of a stream starts.
enum class StreamCtx { Head, FirstChunk, NextChunk };

struct MessageFrame {
  std::size_t metadata_len = 0;
  std::size_t body_len = 0;
  Framing framing = Framing::NoBody;
  StreamCtx next_ctx = StreamCtx::Head;
};

enum class FrameStatus { Ok, NeedMore, Overflow, Error };

struct FrameResult {
  FrameStatus status = FrameStatus::NeedMore;
  MessageFrame frame;
};

/// Locates one metadata block in `window` (at most `lookahead` bytes are
/// inspected). A chunked head is a metadata-only message whose chunks
/// follow as separate messages.
FrameResult parse_frame(StreamCtx ctx, ByteView window, std::size_t lookahead);

// ---------------------------------------------------------------------------
// Program configuration and connection state

struct ProgConfig {
  std::size_t lookahead = kDefaultLookahead;
  std::size_t tx_lookahead = kDefaultTxLookahead;
  std::size_t anchor_threshold = kDefaultAnchorThreshold;
  /// When false the ingress never issues identifiers; bodies are copied
  /// out in full and reach the egress as ordinary bytes.
  bool anchoring = true;

  void validate() const;
};

enum class CopyClass { Meta, Std };

enum class RxPhase { Default, MetadataParsed, WriteVpi, FastPath };
const char* to_string(RxPhase p);

struct RxConnState {
  RxPhase phase = RxPhase::Default;
  StreamCtx ctx = StreamCtx::Head;
  bool fallback = false;            // connection-wide full copy
  std::size_t plain_remaining = 0;  // bytes of a short message still to copy
  Framing framing = Framing::NoBody;
  std::size_t metadata_len = 0;
  std::size_t metadata_copied = 0;
  std::size_t body_total = 0;
  std::size_t body_effective = 0;
  std::size_t logical_body_consumed = 0;
  std::optional<Vpi> pending_vpi;
  std::uint64_t seq = 0;  // anchored messages so far

  // Per-message copy ledger.
  std::size_t meta_copied_bytes = 0;
  std::size_t std_copied_bytes = 0;

  /// Back to Default at a message boundary; keeps framing context.
  void reset_message();
};

struct RxAction {
  enum class Kind { CopyToUser, InjectVpi, SkipLogical };
  Kind kind = Kind::CopyToUser;
  std::size_t user_offset = 0;
  std::size_t len = 0;
  CopyClass cls = CopyClass::Std;
};

struct RxDecision {
  std::vector<RxAction> actions;
  RxConnState next;
  bool would_block = false;
  bool message_done = false;  // a message finished exactly at this step's end
  bool entered_fallback = false;
  bool degraded = false;      // this message's body left the anchoring path

  std::size_t logical_len() const;
  std::size_t physical_len() const;
};

/// One ingress program run. `window` is a linearized view of the first
/// min(unread, lookahead) unread bytes; `unread` counts all of them.
RxDecision rx_prog_step(const RxConnState& state, ByteView window, std::size_t unread, std::size_t user_capacity,
                        const ProgConfig& cfg);

enum class TxPhase { Default, MetadataParsed, FastPath, FallbackBypass };
const char* to_string(TxPhase p);

struct TxConnState {
  TxPhase phase = TxPhase::Default;
  StreamCtx ctx = StreamCtx::Head;
  bool fallback = false;
  std::size_t plain_remaining = 0;  // short message bytes still passing through
  Bytes carry;                      // accepted metadata prefix, terminator not yet seen
  std::size_t metadata_len = 0;
  std::size_t expected_total = 0;
  std::size_t cumulative_sent = 0;
  std::optional<SockId> source_sock;
  std::optional<Vpi> vpi;
  std::size_t anchor_total = 0;

  // Per-message copy ledger, maintained by the kernel.
  std::size_t meta_copied_bytes = 0;
  std::size_t std_copied_bytes = 0;
  std::size_t transferred_bytes = 0;

  void reset_message();
};

struct TxAction {
  enum class Kind { CopyFromUser, TransferAnchored, Passthrough };
  Kind kind = Kind::CopyFromUser;
  std::size_t user_offset = 0;
  std::size_t len = 0;
  SockId source{};
};

struct TxDecision {
  enum class Kind { Plain, ShortMessage, CarryMetadata, Message };

  std::vector<TxAction> actions;
  TxConnState next;
  Kind kind = Kind::Message;
  std::size_t span = 0;  // logical bytes covered by the actions
  bool vpi_hit = false;
  bool vpi_miss = false;
  bool entered_fallback = false;
};

using VpiResolver = std::function<std::optional<VpiEntry>(std::span<const std::uint8_t, Vpi::kWireSize>)>;

/// Pre-send program. `out` is the physical user buffer; `logical_len` may
/// exceed it only by bytes the kernel never reads (anchored payload).
TxDecision tx_prog_pre(const TxConnState& state, ByteView out, std::size_t logical_len, const VpiResolver& resolve,
                       const ProgConfig& cfg);

enum class TxPostOutcome { Continue, Completed, ShortCompleted };

class ProtocolDesync : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TxPostResult {
  TxPostOutcome outcome = TxPostOutcome::Continue;
  TxPhase completed_phase = TxPhase::Default;
  std::optional<Vpi> vpi;
  std::optional<SockId> source_sock;
  std::size_t metadata_len = 0;
  std::size_t expected_total = 0;
  std::size_t anchor_total = 0;
  std::size_t meta_copied_bytes = 0;
  std::size_t std_copied_bytes = 0;
  std::size_t transferred_bytes = 0;
};

/// Post-send program: records what the data plane actually accepted.
/// Throws ProtocolDesync when the cumulative count overshoots the message.
TxPostResult tx_prog_post(TxConnState& state, const TxDecision& decision, ByteView out, std::size_t actually_sent);

// ---------------------------------------------------------------------------

/// The narrow boundary between kernel mechanism and protocol policy.
class ProtocolProgram {
 public:
  virtual ~ProtocolProgram() = default;
  virtual const char* name() const = 0;
  virtual RxDecision rx_step(const RxConnState& state, ByteView window, std::size_t unread,
                             std::size_t user_capacity, const ProgConfig& cfg) const = 0;
  virtual TxDecision tx_pre(const TxConnState& state, ByteView out, std::size_t logical_len,
                            const VpiResolver& resolve, const ProgConfig& cfg) const = 0;
  virtual TxPostResult tx_post(TxConnState& state, const TxDecision& decision, ByteView out,
                               std::size_t actually_sent) const = 0;
};

class Http1Program final : public ProtocolProgram {
 public:
  const char* name() const override { return "http1"; }
  RxDecision rx_step(const RxConnState& state, ByteView window, std::size_t unread, std::size_t user_capacity,
                     const ProgConfig& cfg) const override {
    return rx_prog_step(state, window, unread, user_capacity, cfg);
  }
  TxDecision tx_pre(const TxConnState& state, ByteView out, std::size_t logical_len, const VpiResolver& resolve,
                    const ProgConfig& cfg) const override {
    return tx_prog_pre(state, out, logical_len, resolve, cfg);
  }
  TxPostResult tx_post(TxConnState& state, const TxDecision& decision, ByteView out,
                       std::size_t actually_sent) const override {
    return tx_prog_post(state, decision, out, actually_sent);
  }
};

}  // namespace selcopy
