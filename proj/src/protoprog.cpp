// SPDX-License-Identifier: Apache-2.0
#include "selcopy/protoprog.hpp"

#include <algorithm>
#include <cctype>
#include <string>

namespace selcopy {
namespace {

constexpr std::string_view kHeadEnd = "\r\n\r\n";
constexpr std::string_view kCrlf = "\r\n";

const KmpTable& head_end_table() {
  static const KmpTable t = kmp_build(as_bytes(kHeadEnd));
  return t;
}

const KmpTable& crlf_table() {
  static const KmpTable t = kmp_build(as_bytes(kCrlf));
  return t;
}

std::string_view as_chars(ByteView b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::size_t parse_decimal(std::string_view v) {
  if (v.empty()) throw ParseError("empty Content-Length");
  std::size_t n = 0;
  for (char c : v) {
    if (c < '0' || c > '9') throw ParseError("non-numeric Content-Length");
    if (n > (SIZE_MAX - 9) / 10) throw ParseError("Content-Length overflow");
    n = n * 10 + static_cast<std::size_t>(c - '0');
  }
  return n;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

ByteView as_bytes(std::string_view s) { return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}; }

KmpTable kmp_build(ByteView pattern) {
  if (pattern.empty()) throw std::invalid_argument("kmp_build: empty pattern");
  KmpTable table(pattern.size(), 0);
  std::size_t k = 0;
  for (std::size_t i = 1; i < pattern.size(); ++i) {
    while (k > 0 && pattern[i] != pattern[k]) k = table[k - 1];
    if (pattern[i] == pattern[k]) ++k;
    table[i] = k;
  }
  return table;
}

std::optional<std::size_t> kmp_search(ByteView window, ByteView pattern, const KmpTable& table) {
  if (pattern.empty() || table.size() != pattern.size())
    throw std::invalid_argument("kmp_search: table does not match pattern");
  std::size_t k = 0;
  for (std::size_t i = 0; i < window.size(); ++i) {
    while (k > 0 && window[i] != pattern[k]) k = table[k - 1];
    if (window[i] == pattern[k]) ++k;
    if (k == pattern.size()) return i + 1 - k;
  }
  return std::nullopt;
}

const char* to_string(Framing f) {
  switch (f) {
    case Framing::ContentLength: return "content-length";
    case Framing::Chunked: return "chunked";
    case Framing::NoBody: return "no-body";
  }
  return "?";
}

HeadInfo http1_parse_head(ByteView head) {
  auto text = as_chars(head);
  if (text.size() < kHeadEnd.size() || text.substr(text.size() - kHeadEnd.size()) != kHeadEnd)
    throw ParseError("header block not terminated by an empty line");

  HeadInfo info;
  info.head_len = text.size();

  std::optional<std::size_t> content_length;
  bool chunked = false;
  bool first = true;
  std::size_t pos = 0;
  const std::size_t end = text.size() - kCrlf.size();  // the empty line
  while (pos < end) {
    auto eol = text.find(kCrlf, pos);
    auto line = text.substr(pos, eol - pos);
    pos = eol + kCrlf.size();
    if (first) {
      if (line.empty()) throw ParseError("empty start line");
      first = false;
      continue;
    }
    auto colon = line.find(':');
    if (colon == std::string_view::npos || colon == 0) throw ParseError("malformed header line");
    auto name = line.substr(0, colon);
    auto value = trim(line.substr(colon + 1));
    if (iequals(name, "content-length")) {
      auto n = parse_decimal(value);
      if (content_length && *content_length != n) throw ParseError("conflicting Content-Length");
      content_length = n;
    } else if (iequals(name, "transfer-encoding")) {
      auto last = value.rfind(',');
      auto coding = trim(last == std::string_view::npos ? value : value.substr(last + 1));
      if (!iequals(coding, "chunked")) throw ParseError("unsupported Transfer-Encoding");
      chunked = true;
    }
  }
  if (first) throw ParseError("missing start line");

  if (chunked) {
    info.framing = Framing::Chunked;
  } else if (content_length) {
    info.framing = Framing::ContentLength;
    info.body_len = content_length;
  }
  return info;
}

std::optional<ChunkHeader> http1_parse_chunk_header(ByteView window, bool after_data) {
  std::size_t pos = 0;
  if (after_data) {
    if (window.size() < 2) return std::nullopt;
    if (window[0] != '\r' || window[1] != '\n') throw ParseError("chunk data not followed by CRLF");
    pos = 2;
  }
  auto rel = kmp_search(window.subspan(pos), as_bytes(kCrlf), crlf_table());
  if (!rel) {
    // Reject garbage early rather than waiting for a line end that may never come.
    for (std::size_t i = pos; i < window.size(); ++i) {
      char c = static_cast<char>(window[i]);
      if (c == ';' || c == '\r') break;
      if (hex_value(c) < 0) throw ParseError("non-hex chunk size");
    }
    return std::nullopt;
  }
  auto line = as_chars(window.subspan(pos, *rel));
  auto ext = line.find(';');
  auto digits = trim(line.substr(0, ext));
  if (digits.empty()) throw ParseError("empty chunk size");
  if (digits.size() > 15) throw ParseError("chunk size overflow");
  std::size_t size = 0;
  for (char c : digits) {
    int v = hex_value(c);
    if (v < 0) throw ParseError("non-hex chunk size");
    size = size * 16 + static_cast<std::size_t>(v);
  }

  const std::size_t line_crlf = pos + *rel;
  ChunkHeader h;
  h.chunk_size = size;
  if (size > 0) {
    h.hdr_len = line_crlf + kCrlf.size();
    return h;
  }
  // Terminal chunk: metadata runs through the end of the trailer section.
  auto tail = kmp_search(window.subspan(line_crlf), as_bytes(kHeadEnd), head_end_table());
  if (!tail) return std::nullopt;
  h.hdr_len = line_crlf + *tail + kHeadEnd.size();
  return h;
}

FrameResult parse_frame(StreamCtx ctx, ByteView window, std::size_t lookahead) {
  FrameResult r;
  const bool full = window.size() >= lookahead;
  auto w = window.first(std::min(window.size(), lookahead));
  try {
    if (ctx == StreamCtx::Head) {
      auto at = kmp_search(w, as_bytes(kHeadEnd), head_end_table());
      if (!at) {
        r.status = full ? FrameStatus::Overflow : FrameStatus::NeedMore;
        return r;
      }
      auto info = http1_parse_head(w.first(*at + kHeadEnd.size()));
      r.frame.metadata_len = info.head_len;
      r.frame.framing = info.framing;
      r.frame.body_len = info.body_len.value_or(0);
      r.frame.next_ctx = info.framing == Framing::Chunked ? StreamCtx::FirstChunk : StreamCtx::Head;
    } else {
      auto h = http1_parse_chunk_header(w, ctx == StreamCtx::NextChunk);
      if (!h) {
        r.status = full ? FrameStatus::Overflow : FrameStatus::NeedMore;
        return r;
      }
      r.frame.metadata_len = h->hdr_len;
      r.frame.framing = Framing::Chunked;
      r.frame.body_len = h->chunk_size;
      r.frame.next_ctx = h->terminal() ? StreamCtx::Head : StreamCtx::NextChunk;
    }
  } catch (const ParseError&) {
    r.status = FrameStatus::Error;
    return r;
  }
  r.status = FrameStatus::Ok;
  return r;
}

void ProgConfig::validate() const {
  if (lookahead < 4) throw std::invalid_argument("lookahead must be at least 4 bytes");
  if (tx_lookahead < lookahead) throw std::invalid_argument("tx lookahead must not be smaller than lookahead");
  if (anchor_threshold < kMinAnchoredBody) throw std::invalid_argument("anchor threshold must be at least 8 bytes");
}

const char* to_string(RxPhase p) {
  switch (p) {
    case RxPhase::Default: return "DEFAULT";
    case RxPhase::MetadataParsed: return "METADATA_PARSED";
    case RxPhase::WriteVpi: return "WRITE_VPI";
    case RxPhase::FastPath: return "FAST_PATH";
  }
  return "?";
}

const char* to_string(TxPhase p) {
  switch (p) {
    case TxPhase::Default: return "DEFAULT";
    case TxPhase::MetadataParsed: return "METADATA_PARSED";
    case TxPhase::FastPath: return "FAST_PATH";
    case TxPhase::FallbackBypass: return "FALLBACK_BYPASS";
  }
  return "?";
}

void RxConnState::reset_message() {
  phase = RxPhase::Default;
  plain_remaining = 0;
  framing = Framing::NoBody;
  metadata_len = metadata_copied = 0;
  body_total = body_effective = logical_body_consumed = 0;
  pending_vpi.reset();
  meta_copied_bytes = std_copied_bytes = 0;
}

void TxConnState::reset_message() {
  phase = TxPhase::Default;
  plain_remaining = 0;
  carry.clear();
  metadata_len = expected_total = cumulative_sent = 0;
  source_sock.reset();
  vpi.reset();
  anchor_total = 0;
  meta_copied_bytes = std_copied_bytes = transferred_bytes = 0;
}

std::size_t RxDecision::logical_len() const {
  std::size_t n = 0;
  for (const auto& a : actions) n += a.len;
  return n;
}

std::size_t RxDecision::physical_len() const {
  std::size_t n = 0;
  for (const auto& a : actions)
    if (a.kind != RxAction::Kind::SkipLogical) n += a.len;
  return n;
}

RxDecision rx_prog_step(const RxConnState& state, ByteView window, std::size_t unread, std::size_t user_capacity,
                        const ProgConfig& cfg) {
  if (user_capacity == 0) throw std::invalid_argument("rx_prog_step: user capacity must be positive");

  RxDecision d;
  d.next = state;
  RxConnState& s = d.next;
  std::size_t uoff = 0;
  // Every logical byte handed to the user stands for exactly one unread byte.
  std::size_t budget = std::min(user_capacity, unread);

  auto emit = [&](RxAction::Kind kind, std::size_t len, CopyClass cls) {
    d.actions.push_back(RxAction{kind, uoff, len, cls});
    uoff += len;
    budget -= len;
    if (kind == RxAction::Kind::CopyToUser) {
      (cls == CopyClass::Meta ? s.meta_copied_bytes : s.std_copied_bytes) += len;
    } else if (kind == RxAction::Kind::InjectVpi) {
      s.meta_copied_bytes += len;
    }
  };
  auto copy_plain = [&](std::size_t message_left) {
    std::size_t k = std::min(budget, message_left);
    if (k > 0) emit(RxAction::Kind::CopyToUser, k, CopyClass::Std);
    s.plain_remaining = message_left - k;
    d.message_done = s.plain_remaining == 0;
  };

  if (s.fallback) {
    if (budget == 0) {
      d.would_block = true;
    } else {
      emit(RxAction::Kind::CopyToUser, budget, CopyClass::Std);
    }
    return d;
  }

  if (s.phase == RxPhase::Default) {
    if (s.plain_remaining > 0) {
      if (budget == 0) {
        d.would_block = true;
        return d;
      }
      copy_plain(s.plain_remaining);
      return d;
    }
    if (unread == 0) {
      d.would_block = true;
      return d;
    }
    auto parsed = parse_frame(s.ctx, window, cfg.lookahead);
    if (parsed.status == FrameStatus::NeedMore) {
      d.would_block = true;
      return d;
    }
    if (parsed.status != FrameStatus::Ok) {
      s.fallback = true;
      d.entered_fallback = true;
      emit(RxAction::Kind::CopyToUser, budget, CopyClass::Std);
      return d;
    }
    const auto& f = parsed.frame;
    s.reset_message();
    s.metadata_len = f.metadata_len;
    s.body_total = f.body_len;
    s.framing = f.framing;
    s.ctx = f.next_ctx;
    if (f.body_len < kMinAnchoredBody || !cfg.anchoring) {
      d.degraded = f.body_len >= kMinAnchoredBody;
      copy_plain(f.metadata_len + f.body_len);
      return d;
    }
    s.body_effective = std::min(f.body_len, cfg.anchor_threshold);
    s.phase = RxPhase::MetadataParsed;
  }

  if (s.phase == RxPhase::MetadataParsed) {
    const std::size_t rem = s.metadata_len - s.metadata_copied;
    if (cfg.anchoring && budget >= rem + kMinAnchoredBody) {
      if (rem > 0) emit(RxAction::Kind::CopyToUser, rem, CopyClass::Meta);
      s.metadata_copied = s.metadata_len;
      s.phase = RxPhase::WriteVpi;
      emit(RxAction::Kind::InjectVpi, kMinAnchoredBody, CopyClass::Meta);
      s.logical_body_consumed = kMinAnchoredBody;
      s.phase = RxPhase::FastPath;
    } else if (rem > 0) {
      std::size_t k = std::min(budget, rem);
      if (k == 0) {
        d.would_block = true;
        return d;
      }
      emit(RxAction::Kind::CopyToUser, k, CopyClass::Meta);
      s.metadata_copied += k;
      return d;
    } else if (!cfg.anchoring || user_capacity < kMinAnchoredBody) {
      // No room for an identifier: the body takes the ordinary copy path.
      d.degraded = true;
      s.phase = RxPhase::Default;
      copy_plain(s.body_total);
      if (d.actions.empty()) d.would_block = true;
      return d;
    } else {
      // Fewer than 8 body bytes have arrived.
      d.would_block = true;
      return d;
    }
  }

  if (s.phase == RxPhase::FastPath) {
    if (s.logical_body_consumed < s.body_effective && budget > 0) {
      std::size_t k = std::min(budget, s.body_effective - s.logical_body_consumed);
      emit(RxAction::Kind::SkipLogical, k, CopyClass::Meta);
      s.logical_body_consumed += k;
    }
    if (s.logical_body_consumed >= s.body_effective && s.logical_body_consumed < s.body_total && budget > 0) {
      // Past the anchoring threshold: real bytes.
      std::size_t k = std::min(budget, s.body_total - s.logical_body_consumed);
      emit(RxAction::Kind::CopyToUser, k, CopyClass::Std);
      s.logical_body_consumed += k;
    }
    if (d.actions.empty()) d.would_block = true;
  }
  return d;
}

TxDecision tx_prog_pre(const TxConnState& state, ByteView out, std::size_t logical_len, const VpiResolver& resolve,
                       const ProgConfig& cfg) {
  if (logical_len == 0) throw std::invalid_argument("tx_prog_pre: empty send");
  if (out.size() > logical_len) throw std::invalid_argument("tx_prog_pre: physical bytes exceed logical length");

  TxDecision d;
  d.next = state;
  TxConnState& s = d.next;
  std::size_t off = 0;

  auto require_physical = [&](std::size_t len) {
    if (off + len > out.size())
      throw std::invalid_argument("tx_prog_pre: kernel must read bytes the caller did not provide");
  };
  auto emit = [&](TxAction::Kind kind, std::size_t len) {
    if (len == 0) return;
    if (kind != TxAction::Kind::TransferAnchored) require_physical(len);
    TxAction a{kind, off, len, {}};
    if (kind == TxAction::Kind::TransferAnchored) a.source = *s.source_sock;
    d.actions.push_back(a);
    off += len;
    d.span += len;
  };

  if (s.fallback) {
    d.kind = TxDecision::Kind::Plain;
    emit(TxAction::Kind::Passthrough, logical_len);
    return d;
  }

  if (s.phase == TxPhase::Default) {
    if (s.plain_remaining > 0) {
      d.kind = TxDecision::Kind::ShortMessage;
      emit(TxAction::Kind::Passthrough, std::min(logical_len, s.plain_remaining));
      return d;
    }
    Bytes window = s.carry;
    const std::size_t room = cfg.tx_lookahead > window.size() ? cfg.tx_lookahead - window.size() : 0;
    const std::size_t take = std::min({logical_len, out.size(), room});
    window.insert(window.end(), out.begin(), out.begin() + static_cast<std::ptrdiff_t>(take));

    auto parsed = parse_frame(s.ctx, window, cfg.tx_lookahead);
    if (parsed.status == FrameStatus::NeedMore && take == logical_len) {
      d.kind = TxDecision::Kind::CarryMetadata;
      emit(TxAction::Kind::CopyFromUser, logical_len);
      return d;
    }
    if (parsed.status != FrameStatus::Ok) {
      s.fallback = true;
      d.entered_fallback = true;
      d.kind = TxDecision::Kind::Plain;
      emit(TxAction::Kind::Passthrough, logical_len);
      return d;
    }
    const auto& f = parsed.frame;
    const std::size_t carried = s.carry.size();
    s.reset_message();
    s.ctx = f.next_ctx;
    s.metadata_len = f.metadata_len;
    s.expected_total = f.metadata_len + f.body_len;
    s.meta_copied_bytes = carried;
    if (f.body_len < kMinAnchoredBody) {
      d.kind = TxDecision::Kind::ShortMessage;
      s.plain_remaining = s.expected_total - carried;
      emit(TxAction::Kind::Passthrough, std::min(logical_len, s.plain_remaining));
      return d;
    }
    s.phase = TxPhase::MetadataParsed;
    s.cumulative_sent = carried;
  }

  d.kind = TxDecision::Kind::Message;

  if (s.phase == TxPhase::MetadataParsed) {
    const std::size_t rem = s.metadata_len - s.cumulative_sent;
    if (logical_len < rem + kMinAnchoredBody) {
      // Not enough bytes after the metadata to hold an identifier yet.
      emit(TxAction::Kind::CopyFromUser, std::min(logical_len, rem));
      return d;
    }
    if (rem + kMinAnchoredBody > out.size())
      throw std::invalid_argument("tx_prog_pre: identifier bytes must be physically present");
    std::span<const std::uint8_t, Vpi::kWireSize> candidate(out.data() + rem, Vpi::kWireSize);
    auto hit = resolve ? resolve(candidate) : std::nullopt;
    if (hit) {
      d.vpi_hit = true;
      s.phase = TxPhase::FastPath;
      s.source_sock = hit->source_sock;
      s.vpi = hit->vpi;
      s.anchor_total = hit->anchored_total;
    } else {
      d.vpi_miss = true;
      s.phase = TxPhase::FallbackBypass;
    }
  }

  // FastPath / FallbackBypass: lay the send out over [pos, pos+len).
  const std::size_t pos = s.cumulative_sent;
  const std::size_t len = std::min(logical_len, s.expected_total - pos);
  const std::size_t meta_part = pos < s.metadata_len ? std::min(len, s.metadata_len - pos) : 0;
  emit(TxAction::Kind::CopyFromUser, meta_part);
  std::size_t rest = len - meta_part;
  if (s.phase == TxPhase::FastPath) {
    const std::size_t anchored_end = std::min(s.metadata_len + s.anchor_total, s.expected_total);
    const std::size_t at = pos + meta_part;
    const std::size_t transfer = at < anchored_end ? std::min(rest, anchored_end - at) : 0;
    emit(TxAction::Kind::TransferAnchored, transfer);
    rest -= transfer;
  }
  emit(TxAction::Kind::Passthrough, rest);
  return d;
}

TxPostResult tx_prog_post(TxConnState& state, const TxDecision& decision, ByteView out, std::size_t actually_sent) {
  if (actually_sent > decision.span) throw ProtocolDesync("tx_prog_post: accepted more than the decision covered");
  TxPostResult r;
  switch (decision.kind) {
    case TxDecision::Kind::Plain:
      return r;
    case TxDecision::Kind::CarryMetadata:
      state.carry.insert(state.carry.end(), out.begin(), out.begin() + static_cast<std::ptrdiff_t>(actually_sent));
      return r;
    case TxDecision::Kind::ShortMessage:
      state.plain_remaining -= actually_sent;
      if (state.plain_remaining == 0) {
        r.outcome = TxPostOutcome::ShortCompleted;
        r.metadata_len = state.metadata_len;
        r.expected_total = state.expected_total;
        r.meta_copied_bytes = state.meta_copied_bytes;
        r.std_copied_bytes = state.std_copied_bytes;
      }
      return r;
    case TxDecision::Kind::Message:
      break;
  }
  if (state.phase == TxPhase::Default) return r;

  state.cumulative_sent += actually_sent;
  if (state.cumulative_sent > state.expected_total)
    throw ProtocolDesync("tx_prog_post: cumulative count passed the message length");
  if (state.cumulative_sent < state.expected_total) return r;

  r.outcome = TxPostOutcome::Completed;
  r.completed_phase = state.phase;
  r.vpi = state.vpi;
  r.source_sock = state.source_sock;
  r.metadata_len = state.metadata_len;
  r.expected_total = state.expected_total;
  r.anchor_total = state.anchor_total;
  r.meta_copied_bytes = state.meta_copied_bytes;
  r.std_copied_bytes = state.std_copied_bytes;
  r.transferred_bytes = state.transferred_bytes;
  state.reset_message();
  return r;
}

}  // namespace selcopy
