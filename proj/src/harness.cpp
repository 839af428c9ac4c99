// SPDX-License-Identifier: Apache-2.0
#include "selcopy/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace selcopy {
namespace {

constexpr std::string_view kCrlf = "\r\n";
constexpr std::string_view kHeadEnd = "\r\n\r\n";

void append(Bytes& out, std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }
void append(Bytes& out, ByteView b) { out.insert(out.end(), b.begin(), b.end()); }

bool ends_with(const Bytes& b, std::string_view s) {
  return b.size() >= s.size() && std::equal(s.begin(), s.end(), b.end() - static_cast<std::ptrdiff_t>(s.size()));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string hex(std::size_t n) {
  std::ostringstream os;
  os << std::hex << n;
  return os.str();
}

void fill_random(Bytes& out, std::size_t n, std::mt19937_64& rng) {
  const std::size_t start = out.size();
  out.resize(start + n);
  for (std::size_t i = 0; i < n; i += 8) {
    std::uint64_t v = rng();
    for (std::size_t j = 0; j < 8 && i + j < n; ++j) out[start + i + j] = static_cast<std::uint8_t>(v >> (8 * j));
  }
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h * 0x100000001b3ULL;
}

// Appends `X-Pad` so the head reaches `target` bytes when possible.
std::string pad_head(std::string head_without_end, std::size_t target) {
  constexpr std::string_view kPadName = "X-Pad: ";
  const std::size_t base = head_without_end.size() + kHeadEnd.size();
  const std::size_t overhead = kPadName.size() + kCrlf.size();
  if (target > base + overhead) {
    head_without_end += "\r\n";
    head_without_end += kPadName;
    head_without_end.append(target - base - overhead, 'p');
  }
  return head_without_end + std::string(kHeadEnd);
}

}  // namespace

// ---------------------------------------------------------------------------
// Workload

HttpMessage make_request(std::size_t body_len, std::size_t index, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  HttpMessage m;
  std::string head = (body_len > 0 ? "POST" : "GET");
  head += " /objects/" + std::to_string(index) + " HTTP/1.1\r\nHost: backend.internal\r\nUser-Agent: selcopy-client";
  if (body_len > 0) head += "\r\nContent-Length: " + std::to_string(body_len);
  head += std::string(kHeadEnd);
  append(m.wire, head);
  m.head_len = head.size();
  fill_random(m.wire, body_len, rng);
  m.body_len = body_len;
  m.framing = body_len > 0 ? Framing::ContentLength : Framing::NoBody;
  return m;
}

HttpMessage make_response(std::size_t body_len, std::size_t head_len, bool chunked, std::size_t chunk_size,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  HttpMessage m;
  std::string head = "HTTP/1.1 200 OK\r\nServer: origin\r\nContent-Type: application/octet-stream";
  if (chunked) {
    head += "\r\nTransfer-Encoding: chunked";
  } else {
    head += "\r\nContent-Length: " + std::to_string(body_len);
  }
  head = pad_head(head, head_len);
  append(m.wire, head);
  m.head_len = head.size();
  m.body_len = body_len;
  if (!chunked) {
    m.framing = Framing::ContentLength;
    fill_random(m.wire, body_len, rng);
    return m;
  }
  m.framing = Framing::Chunked;
  if (chunk_size == 0) chunk_size = body_len == 0 ? 1 : body_len;
  for (std::size_t left = body_len; left > 0;) {
    std::size_t n = std::min(left, chunk_size);
    m.chunks.push_back(n);
    append(m.wire, hex(n) + "\r\n");
    fill_random(m.wire, n, rng);
    append(m.wire, kCrlf);
    left -= n;
  }
  append(m.wire, "0\r\n\r\n");
  return m;
}

namespace {

HttpMessage make_chunked_random(std::size_t body_len, std::size_t head_len, std::size_t max_chunk,
                                std::mt19937_64& rng) {
  HttpMessage m = make_response(0, head_len, true, 0, rng());
  m.wire.resize(m.head_len);
  m.chunks.clear();
  m.body_len = body_len;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t left = body_len; left > 0;) {
    std::size_t n = u(rng) < 0.2 ? 1 + rng() % 7 : 1 + rng() % max_chunk;
    n = std::min(n, left);
    m.chunks.push_back(n);
    std::string line = hex(n);
    if (u(rng) < 0.1) line += ";ext=1";
    append(m.wire, line + "\r\n");
    fill_random(m.wire, n, rng);
    append(m.wire, kCrlf);
    left -= n;
  }
  if (u(rng) < 0.2) {
    append(m.wire, "0\r\nX-Trailer: done\r\n\r\n");
  } else {
    append(m.wire, "0\r\n\r\n");
  }
  return m;
}

}  // namespace

Workload generate_workload(const WorkloadConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Workload wl;
  wl.seed = seed;
  wl.connections.resize(cfg.connections);
  std::size_t index = 0;
  for (auto& conn : wl.connections) {
    for (std::size_t e = 0; e < cfg.exchanges_per_connection; ++e, ++index) {
      Exchange ex;
      std::size_t req_body = 0;
      if (!cfg.fixed_headers && cfg.max_request_body > 0 && u(rng) < 0.5) req_body = rng() % (cfg.max_request_body + 1);
      ex.request = make_request(req_body, cfg.fixed_headers ? 0 : index, rng());

      std::size_t body = 0;
      if (!cfg.body_sizes.empty()) {
        body = cfg.body_sizes[rng() % cfg.body_sizes.size()];
      } else if (u(rng) < cfg.tiny_body_share || cfg.max_body < 8) {
        body = rng() % std::min<std::size_t>(8, cfg.max_body + 1);
      } else {
        const double lo = std::log(8.0);
        const double hi = std::log(static_cast<double>(cfg.max_body) + 1.0);
        body = std::min<std::size_t>(cfg.max_body, static_cast<std::size_t>(std::exp(lo + (hi - lo) * u(rng))));
      }

      std::size_t head_len = cfg.fixed_headers ? cfg.head_budget : 120 + rng() % (cfg.head_budget - 119);
      if (!cfg.fixed_headers && u(rng) < cfg.oversized_head_share) head_len = 300 + rng() % 1000;
      const bool chunked = u(rng) < cfg.chunked_share;
      ex.response = chunked ? make_chunked_random(body, head_len, std::max<std::size_t>(cfg.max_chunk, 1), rng)
                            : make_response(body, head_len, false, 0, rng());
      conn.exchanges.push_back(std::move(ex));
    }
  }
  return wl;
}

Workload uniform_workload(std::size_t connections, std::size_t exchanges, std::size_t body_len, bool chunked,
                          std::size_t chunk_size, std::size_t head_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Workload wl;
  wl.seed = seed;
  wl.connections.resize(connections);
  for (auto& conn : wl.connections) {
    for (std::size_t e = 0; e < exchanges; ++e) {
      Exchange ex;
      ex.request = make_request(0, 0, rng());
      ex.response = make_response(body_len, head_len, chunked, chunk_size, rng());
      conn.exchanges.push_back(std::move(ex));
    }
  }
  return wl;
}

std::size_t anchorable_units(const HttpMessage& m) {
  if (m.framing == Framing::Chunked)
    return static_cast<std::size_t>(
        std::count_if(m.chunks.begin(), m.chunks.end(), [](std::size_t n) { return n >= kMinAnchoredBody; }));
  return m.body_len >= kMinAnchoredBody ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Forwarding

Bytes rewrite_head(ByteView head) {
  if (head.size() < kHeadEnd.size()) throw std::invalid_argument("rewrite_head: not a header block");
  Bytes out(head.begin(), head.end() - 2);
  append(out, kViaHeader);
  append(out, kCrlf);
  return out;
}

Bytes expected_forwarded(const HttpMessage& m) {
  ByteView wire(m.wire);
  Bytes out = rewrite_head(wire.first(m.head_len));
  append(out, wire.subspan(m.head_len));
  return out;
}

void HttpForwarder::note(std::uint64_t v) { decision_hash_ = mix(decision_hash_, v); }

void HttpForwarder::finish_message() {
  ++messages_done_;
  note(0xd0e);
  state_ = State::Head;
}

void HttpForwarder::feed(ByteView in, Bytes& out) {
  std::size_t pos = 0;
  while (pos < in.size()) {
    switch (state_) {
      case State::Head: {
        pending_.push_back(in[pos++]);
        if (!ends_with(pending_, kHeadEnd)) break;
        std::string_view text(reinterpret_cast<const char*>(pending_.data()), pending_.size());
        std::optional<std::size_t> length;
        bool chunked = false;
        for (std::size_t at = text.find(kCrlf) + 2; at < text.size() - 2;) {
          auto eol = text.find(kCrlf, at);
          auto line = text.substr(at, eol - at);
          at = eol + 2;
          auto colon = line.find(':');
          if (colon == std::string_view::npos) continue;
          auto name = lower(line.substr(0, colon));
          auto value = line.substr(colon + 1);
          while (!value.empty() && value.front() == ' ') value.remove_prefix(1);
          if (name == "content-length") length = std::stoull(std::string(value));
          if (name == "transfer-encoding" && lower(value).find("chunked") != std::string::npos) chunked = true;
        }
        Bytes rewritten = rewrite_head(pending_);
        append(out, rewritten);
        note(pending_.size());
        note(chunked ? 2 : length ? 1 : 0);
        pending_.clear();
        if (chunked) {
          state_ = State::ChunkLine;
        } else if (length && *length > 0) {
          note(*length);
          remaining_ = *length;
          state_ = State::Body;
        } else {
          finish_message();
        }
        break;
      }
      case State::Body:
      case State::ChunkData:
      case State::ChunkDataEnd: {
        std::size_t k = std::min(remaining_, in.size() - pos);
        append(out, in.subspan(pos, k));
        pos += k;
        remaining_ -= k;
        if (remaining_ > 0) break;
        if (state_ == State::Body) {
          finish_message();
        } else if (state_ == State::ChunkData) {
          state_ = State::ChunkDataEnd;
          remaining_ = 2;
        } else {
          state_ = State::ChunkLine;
        }
        break;
      }
      case State::ChunkLine: {
        pending_.push_back(in[pos++]);
        if (!ends_with(pending_, kCrlf)) break;
        std::string line(pending_.begin(), pending_.end() - 2);
        auto semi = line.find(';');
        std::size_t size = std::stoull(line.substr(0, semi), nullptr, 16);
        append(out, pending_);
        pending_.clear();
        note(size);
        if (size == 0) {
          state_ = State::Trailers;
        } else {
          remaining_ = size;
          state_ = State::ChunkData;
        }
        break;
      }
      case State::Trailers: {
        pending_.push_back(in[pos++]);
        if (!ends_with(pending_, kCrlf)) break;
        append(out, pending_);
        const bool last = pending_.size() == 2;
        pending_.clear();
        if (last) finish_message();
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Results

TranscriptDiff compare_transcripts(const Transcript& a, const Transcript& b) {
  TranscriptDiff d;
  if (a.connections.size() != b.connections.size()) {
    d.equal = false;
    d.detail = "connection count " + std::to_string(a.connections.size()) + " vs " +
               std::to_string(b.connections.size());
    return d;
  }
  for (std::size_t i = 0; i < a.connections.size(); ++i) {
    const std::pair<const Bytes*, const Bytes*> streams[] = {
        {&a.connections[i].to_backend, &b.connections[i].to_backend},
        {&a.connections[i].to_client, &b.connections[i].to_client}};
    for (int k = 0; k < 2; ++k) {
      const Bytes& x = *streams[k].first;
      const Bytes& y = *streams[k].second;
      auto mm = std::mismatch(x.begin(), x.end(), y.begin(), y.end());
      if (mm.first == x.end() && mm.second == y.end()) continue;
      d.equal = false;
      d.connection = i;
      d.stream = k == 0 ? "to_backend" : "to_client";
      d.offset = static_cast<std::size_t>(mm.first - x.begin());
      d.detail = "connection " + std::to_string(i) + " " + d.stream + " differs at byte " + std::to_string(d.offset) +
                 " (lengths " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")";
      return d;
    }
  }
  return d;
}

Transcript expected_transcript(const Workload& wl) {
  Transcript t;
  for (const auto& conn : wl.connections) {
    Transcript::Connection c;
    for (const auto& ex : conn.exchanges) {
      append(c.to_backend, expected_forwarded(ex.request));
      append(c.to_client, expected_forwarded(ex.response));
    }
    t.connections.push_back(std::move(c));
  }
  return t;
}

Metrics Metrics::from(const KernelCounters& c, const LockTracker& locks) {
  Metrics m;
  m.std_copy_bytes = c.rx_std_bytes + c.tx_std_bytes;
  m.std_alloc_bytes = c.tx_std_bytes;
  m.meta_selcopy_bytes = c.rx_meta_bytes + c.tx_meta_bytes;
  m.meta_alloc_bytes = c.tx_meta_bytes;
  m.meta_prog_invocations = c.prog_invocations;
  m.meta_skb_trans_count = c.skb_trans_count;
  m.split_copy_bytes = c.split_copy_bytes;
  m.segments_forwarded = c.segments_forwarded;
  m.meta_skb_trans_bytes = c.skb_trans_bytes;
  m.kernel_to_user_bytes = c.rx_std_bytes + c.rx_meta_bytes;
  m.user_to_kernel_bytes = c.tx_std_bytes + c.tx_meta_bytes;
  m.vpis_issued = c.vpis_issued;
  m.vpi_hits = c.vpi_hits;
  m.vpi_misses = c.vpi_misses;
  m.fastpath_messages = c.fastpath_messages;
  m.bypass_messages = c.bypass_messages;
  m.fallback_connections = c.rx_fallback_conns + c.tx_fallback_conns;
  m.degraded_messages = c.degraded_messages;
  m.underflow_events = c.underflow_events;
  m.lock_double_holds = locks.double_holds();
  return m;
}

double cost_model_eval(const Metrics& m, const CostWeights& w) {
  if (w.copy_byte < 0 || w.alloc_byte < 0 || w.prog_invocation < 0 || w.skb_transfer < 0 || w.split_copy_byte < 0)
    throw std::invalid_argument("cost weights must be non-negative");
  return w.copy_byte * static_cast<double>(m.std_copy_bytes + m.meta_selcopy_bytes) +
         w.alloc_byte * static_cast<double>(m.std_alloc_bytes + m.meta_alloc_bytes) +
         w.prog_invocation * static_cast<double>(m.meta_prog_invocations) +
         w.skb_transfer * static_cast<double>(m.meta_skb_trans_count) +
         w.split_copy_byte * static_cast<double>(m.split_copy_bytes);
}

// ---------------------------------------------------------------------------
// Scenario

namespace {

std::size_t pick_cap(const CapPolicy& p, bool metadata_phase, std::mt19937_64& rng) {
  if (metadata_phase) return p.head_min + rng() % (p.head_max - p.head_min + 1);
  if (p.tiny_share > 0 && std::uniform_real_distribution<double>(0, 1)(rng) < p.tiny_share) return 1 + rng() % 8;
  return p.body_min + rng() % (p.body_max - p.body_min + 1);
}

/// Outgoing byte queue with a consumed prefix.
struct OutBuf {
  Bytes data;
  std::size_t off = 0;

  bool empty() const { return off == data.size(); }
  ByteView view() const { return ByteView(data).subspan(off); }
  void consume(std::size_t n) {
    off += n;
    if (off == data.size()) {
      data.clear();
      off = 0;
    } else if (off > (1u << 20) && off * 2 > data.size()) {
      data.erase(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(off));
      off = 0;
    }
  }
};

struct CallLog {
  std::uint64_t hash = 0x84222325cbf29ce4ULL;
  std::size_t calls = 0;
  void note(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    hash = mix(mix(mix(hash, a), b), c);
    ++calls;
  }
};

/// One direction of the proxy: receive from `in`, forward to `out`.
struct ProxyPipe {
  SockId in{};
  SockId out{};
  HttpForwarder fwd;
  Bytes rbuf;
  OutBuf pending;
  CallLog log;

  bool flush(Kernel& k) {
    if (pending.empty()) return false;
    auto r = k.sendmsg(out, pending.view());
    if (r.accepted == 0) return false;
    log.note(2, pending.view().size(), r.accepted);
    pending.consume(r.accepted);
    return true;
  }

  bool step(Kernel& k, const CapPolicy& caps, std::mt19937_64& rng) {
    bool progress = flush(k);
    const std::size_t cap = pick_cap(caps, fwd.in_metadata(), rng);
    auto r = k.recvmsg(in, MutableByteView(rbuf).first(cap));
    if (r.logical_len > 0) {
      log.note(1, cap, r.logical_len);
      fwd.feed(ByteView(rbuf).first(r.logical_len), pending.data);
      progress = true;
    }
    return flush(k) || progress;
  }
};

/// Receives into a transcript until `want` bytes have arrived.
bool endpoint_recv(Kernel& k, SockId s, Bytes& into, std::size_t want, Bytes& buf, const CapPolicy& caps,
                   std::mt19937_64& rng) {
  if (into.size() >= want) return false;
  const std::size_t cap = std::min(pick_cap(caps, false, rng), buf.size());
  auto r = k.recvmsg(s, MutableByteView(buf).first(cap));
  if (r.logical_len == 0) return false;
  append(into, ByteView(buf).first(r.logical_len));
  return true;
}

bool endpoint_send(Kernel& k, SockId s, OutBuf& out) {
  if (out.empty()) return false;
  auto r = k.sendmsg(s, out.view());
  out.consume(r.accepted);
  return r.accepted > 0;
}

struct Connection {
  SockId client{}, proxy_front{}, proxy_back{}, backend{};
  ProxyPipe up;    // client -> backend
  ProxyPipe down;  // backend -> client
  std::vector<std::size_t> req_ends;   // cumulative expected bytes at the backend
  std::vector<std::size_t> resp_ends;  // cumulative expected bytes at the client
  const ConnectionWorkload* wl = nullptr;

  // Deterministic mode progress.
  std::size_t requests_sent = 0;   // requests handed to the client socket queue
  std::size_t responses_queued = 0;
  OutBuf client_out, backend_out;
  Bytes client_buf, backend_buf;
};

void build_connections(Kernel& k, const ScenarioConfig& cfg, const Workload& wl, std::vector<Connection>& conns) {
  const std::size_t rbuf = std::max(cfg.proxy_caps.head_max, std::max(cfg.proxy_caps.body_max, std::size_t{8}));
  const std::size_t ebuf = std::max(cfg.endpoint_caps.body_max, std::size_t{8});
  conns.resize(wl.connections.size());
  for (std::size_t i = 0; i < conns.size(); ++i) {
    auto& c = conns[i];
    c.wl = &wl.connections[i];
    c.client = k.socket(SocketRole::Endpoint);
    c.proxy_front = k.socket(SocketRole::Proxy);
    c.proxy_back = k.socket(SocketRole::Proxy);
    c.backend = k.socket(SocketRole::Endpoint);
    k.connect(c.client, c.proxy_front);
    k.connect(c.proxy_back, c.backend);
    if (cfg.proxy_sndbuf > 0) {
      k.set_send_limit(c.proxy_front, cfg.proxy_sndbuf);
      k.set_send_limit(c.proxy_back, cfg.proxy_sndbuf);
    }
    c.up.in = c.proxy_front;
    c.up.out = c.proxy_back;
    c.down.in = c.proxy_back;
    c.down.out = c.proxy_front;
    c.up.rbuf.assign(rbuf, 0);
    c.down.rbuf.assign(rbuf, 0);
    c.client_buf.assign(ebuf, 0);
    c.backend_buf.assign(ebuf, 0);
    std::size_t rq = 0, rs = 0;
    for (const auto& ex : c.wl->exchanges) {
      rq += expected_forwarded(ex.request).size();
      rs += expected_forwarded(ex.response).size();
      c.req_ends.push_back(rq);
      c.resp_ends.push_back(rs);
    }
  }
}

void run_deterministic(Kernel& k, const ScenarioConfig& cfg, std::vector<Connection>& conns, Transcript& t,
                       std::vector<std::string>& violations) {
  std::mt19937_64 rng(cfg.schedule_seed);
  const std::size_t actors = conns.size() * 4;
  std::vector<std::size_t> order(actors);
  for (std::size_t i = 0; i < actors; ++i) order[i] = i;

  auto finished = [&](const Connection& c, const Transcript::Connection& tc) {
    return c.requests_sent == c.wl->exchanges.size() && tc.to_client.size() >= c.resp_ends.back() &&
           tc.to_backend.size() >= c.req_ends.back();
  };
  auto all_done = [&] {
    for (std::size_t i = 0; i < conns.size(); ++i)
      if (!conns[i].wl->exchanges.empty() && !finished(conns[i], t.connections[i])) return false;
    return true;
  };

  std::size_t idle = 0;
  while (!all_done()) {
    std::shuffle(order.begin(), order.end(), rng);
    bool progress = false;
    for (std::size_t a : order) {
      auto& c = conns[a / 4];
      auto& tc = t.connections[a / 4];
      const std::size_t n = c.wl->exchanges.size();
      if (n == 0) continue;
      switch (a % 4) {
        case 0: {  // client: one request in flight at a time
          const std::size_t answered = static_cast<std::size_t>(
              std::upper_bound(c.resp_ends.begin(), c.resp_ends.end(), tc.to_client.size()) - c.resp_ends.begin());
          if (c.requests_sent < n && c.requests_sent == answered && c.client_out.empty()) {
            append(c.client_out.data, c.wl->exchanges[c.requests_sent].request.wire);
            ++c.requests_sent;
            progress = true;
          }
          progress |= endpoint_send(k, c.client, c.client_out);
          progress |= endpoint_recv(k, c.client, tc.to_client, c.resp_ends.back(), c.client_buf, cfg.endpoint_caps, rng);
          break;
        }
        case 1:
          progress |= c.up.step(k, cfg.proxy_caps, rng);
          break;
        case 2: {  // backend: answer each complete request
          progress |= endpoint_recv(k, c.backend, tc.to_backend, c.req_ends.back(), c.backend_buf, cfg.endpoint_caps,
                                    rng);
          while (c.responses_queued < n && tc.to_backend.size() >= c.req_ends[c.responses_queued]) {
            append(c.backend_out.data, c.wl->exchanges[c.responses_queued].response.wire);
            ++c.responses_queued;
            progress = true;
          }
          progress |= endpoint_send(k, c.backend, c.backend_out);
          break;
        }
        case 3:
          progress |= c.down.step(k, cfg.proxy_caps, rng);
          break;
      }
    }
    idle = progress ? 0 : idle + 1;
    if (idle >= cfg.stall_rounds) {
      violations.push_back("scheduler stalled: no progress for " + std::to_string(idle) + " rounds");
      return;
    }
  }
}

void run_stress(Kernel& k, const ScenarioConfig& cfg, std::vector<Connection>& conns, Transcript& t,
                std::vector<std::string>& violations) {
  std::mutex mu;
  std::condition_variable cv;
  std::size_t finished = 0;
  std::atomic<bool> abort{false};
  std::vector<std::thread> threads;
  const std::size_t total = conns.size() * 2;

  auto worker = [&](std::size_t ci, bool upstream) {
    auto& c = conns[ci];
    auto& tc = t.connections[ci];
    std::mt19937_64 rng(cfg.schedule_seed ^ (ci * 2 + (upstream ? 1 : 0)) * 0x9e3779b97f4a7c15ULL);
    OutBuf origin;
    for (const auto& ex : c.wl->exchanges) append(origin.data, upstream ? ex.request.wire : ex.response.wire);
    Bytes& sink = upstream ? tc.to_backend : tc.to_client;
    const std::size_t want = c.wl->exchanges.empty() ? 0 : (upstream ? c.req_ends : c.resp_ends).back();
    Bytes buf(upstream ? c.backend_buf.size() : c.client_buf.size());
    ProxyPipe& pipe = upstream ? c.up : c.down;
    const SockId src = upstream ? c.client : c.backend;
    const SockId dst = upstream ? c.backend : c.client;
    try {
      while (sink.size() < want && !abort.load()) {
        bool progress = endpoint_send(k, src, origin);
        progress |= pipe.step(k, cfg.proxy_caps, rng);
        progress |= endpoint_recv(k, dst, sink, want, buf, cfg.endpoint_caps, rng);
        if (!progress) std::this_thread::yield();
      }
    } catch (const std::exception& e) {
      std::lock_guard lock(mu);
      violations.push_back(std::string("stress worker: ") + e.what());
      abort = true;
    }
    std::lock_guard lock(mu);
    ++finished;
    cv.notify_all();
  };

  for (std::size_t i = 0; i < conns.size(); ++i) {
    threads.emplace_back(worker, i, true);
    threads.emplace_back(worker, i, false);
  }
  {
    std::unique_lock lock(mu);
    if (!cv.wait_for(lock, cfg.watchdog, [&] { return finished == total; })) {
      std::fprintf(stderr, "watchdog: stress run did not finish within %lld ms (%zu/%zu workers done)\n",
                   static_cast<long long>(cfg.watchdog.count()), finished, total);
      std::fflush(stderr);
      std::_Exit(124);
    }
  }
  for (auto& th : threads) th.join();
}

void audit(Kernel& k, const std::vector<Connection>& conns, ScenarioResult& res) {
  auto& v = res.violations;
  const auto threshold = k.config().prog.anchor_threshold;
  for (const auto& c : conns) {
    for (SockId id : {c.client, c.proxy_front, c.proxy_back, c.backend}) {
      auto snap = k.snapshot(id);
      if (!snap) {
        v.push_back("socket " + std::to_string(to_u64(id)) + " vanished before close");
        continue;
      }
      auto tag = "socket " + std::to_string(to_u64(id)) + ": ";
      if (snap->recv_account.charged != 0 || snap->recv_account.temp_raise != 0)
        v.push_back(tag + "receive account not settled");
      if (snap->send_account.charged != 0 || snap->send_account.temp_raise != 0)
        v.push_back(tag + "send account not settled");
      if (snap->anchors != 0 || snap->refcount != 1) v.push_back(tag + "anchor references outstanding");
      if (snap->peak_anchored > threshold) v.push_back(tag + "anchored bytes exceeded the threshold");
      res.metrics.peak_anchored_bytes = std::max<std::uint64_t>(res.metrics.peak_anchored_bytes, snap->peak_anchored);
    }
  }
  if (k.vpimap().size() != 0) v.push_back("identifier map not empty: " + std::to_string(k.vpimap().size()));
  if (res.counters.underflow_events != 0) v.push_back("accounting underflow observed");
  if (res.counters.fastpath_partial_accepts != 0) v.push_back("fast-path send partially accepted");
  if (k.locks().double_holds() != 0) v.push_back("two socket locks held at once");

  for (const auto& c : conns)
    for (SockId id : {c.client, c.proxy_front, c.proxy_back, c.backend}) k.sock_close(id);
  k.clock_advance(k.config().grace_period);
  if (!k.live_sockets().empty()) v.push_back("sockets still live after close and grace period");
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& cfg, const Workload& wl) {
  if (cfg.proxy_caps.head_min == 0 || cfg.proxy_caps.head_min > cfg.proxy_caps.head_max ||
      cfg.proxy_caps.body_min == 0 || cfg.proxy_caps.body_min > cfg.proxy_caps.body_max ||
      cfg.endpoint_caps.body_min == 0 || cfg.endpoint_caps.body_min > cfg.endpoint_caps.body_max)
    throw std::invalid_argument("run_scenario: receive capacity ranges must be non-empty and positive");

  Kernel k(cfg.kernel);
  ScenarioResult res;
  res.expected = expected_transcript(wl);
  res.transcript.connections.resize(wl.connections.size());

  std::vector<Connection> conns;
  build_connections(k, cfg, wl, conns);
  try {
    if (cfg.stress) {
      run_stress(k, cfg, conns, res.transcript, res.violations);
    } else {
      run_deterministic(k, cfg, conns, res.transcript, res.violations);
    }
  } catch (const std::exception& e) {
    res.violations.push_back(std::string("run aborted: ") + e.what());
  }

  std::uint64_t dh = 0, ch = 0;
  for (const auto& c : conns) {
    dh = mix(mix(dh, c.up.fwd.decision_hash()), c.down.fwd.decision_hash());
    ch = mix(mix(ch, c.up.log.hash), c.down.log.hash);
    res.proxy_calls += c.up.log.calls + c.down.log.calls;
  }
  res.decision_hash = dh;
  res.call_hash = ch;

  res.counters = k.counters();
  res.metrics = Metrics::from(res.counters, k.locks());
  res.records = k.message_records();
  auto diff = compare_transcripts(res.transcript, res.expected);
  res.transcript_ok = diff.equal;
  if (!diff.equal) res.violations.push_back("transcript mismatch: " + diff.detail);
  {
    try {
      audit(k, conns, res);
    } catch (const std::exception& e) {
      res.violations.push_back(std::string("audit aborted: ") + e.what());
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Differential fuzzing

FuzzCase make_fuzz_case(std::uint64_t seed, std::size_t max_body) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::initializer_list<std::size_t> xs) { return *(xs.begin() + rng() % xs.size()); };
  FuzzCase fc;
  fc.seed = seed;
  auto& w = fc.workload;
  w.connections = 1 + rng() % 3;
  w.exchanges_per_connection = 1 + rng() % 4;
  w.max_body = std::min(max_body, pick({64, 4096, 65536, 512u << 10, 2u << 20}));
  w.tiny_body_share = 0.2;
  w.chunked_share = 0.3;
  w.max_chunk = pick({16, 1024, 16384, 128u << 10});
  w.max_request_body = pick({0, 64, 4096});
  w.oversized_head_share = 0.05;

  auto& sc = fc.scenario;
  auto& k = sc.kernel;
  k.rcvbuf = static_cast<std::int64_t>(pick({4096, 65536, 256u << 10, 1u << 20}));
  k.sndbuf = static_cast<std::int64_t>(pick({16384, 65536, 256u << 10}));
  k.max_frags = pick({kDefaultMaxFrags, kBigTcpMaxFrags});
  k.frag_capacity = pick({kDefaultFragCapacity, 512});
  k.prog.anchor_threshold = pick({kDefaultAnchorThreshold, kDefaultAnchorThreshold, 65536, 8 + rng() % 4096});
  k.vpi_salt = rng();
  k.record_messages = false;
  if (w.max_body <= 65536 && rng() % 4 == 0) sc.proxy_sndbuf = static_cast<std::int64_t>(10 + rng() % 64);
  sc.proxy_caps.body_max = pick({4096, 65536, 1u << 20});
  sc.endpoint_caps.body_max = pick({1024, 65536});
  sc.schedule_seed = rng();
  return fc;
}

FuzzOutcome run_fuzz_case(const FuzzCase& fc, bool corrupt_identifiers) {
  FuzzOutcome out;
  const Workload wl = generate_workload(fc.workload, fc.seed);
  ScenarioConfig base = fc.scenario;
  base.kernel.mode = KernelMode::Baseline;
  ScenarioConfig sel = fc.scenario;
  sel.kernel.mode = KernelMode::Selective;
  sel.kernel.prog.anchoring = !corrupt_identifiers;

  out.baseline = run_scenario(base, wl);
  out.selective = run_scenario(sel, wl);
  auto fail = [&](std::string why) {
    if (out.ok) out.failure = std::move(why);
    out.ok = false;
  };
  if (!out.baseline.ok()) fail("baseline: " + out.baseline.violations.front());
  if (!out.selective.ok()) fail("selective: " + out.selective.violations.front());
  auto diff = compare_transcripts(out.baseline.transcript, out.selective.transcript);
  if (!diff.equal) fail("modes disagree: " + diff.detail);
  if (out.baseline.decision_hash != out.selective.decision_hash) fail("proxy decisions differ between modes");
  if (corrupt_identifiers) {
    const auto& c = out.selective.counters;
    if (c.vpis_issued != 0 || c.fastpath_messages != 0 || c.vpi_hits != 0)
      fail("identifier corruption still reached the fast path");
  }
  return out;
}

}  // namespace selcopy
