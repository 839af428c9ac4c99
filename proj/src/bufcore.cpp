// SPDX-License-Identifier: Apache-2.0
#include "selcopy/bufcore.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <iterator>

namespace selcopy {

std::uint64_t Segment::next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

Segment::Segment(ByteView data, std::size_t frag_capacity, std::size_t max_frags)
    : id_(next_id()), frag_capacity_(frag_capacity), max_frags_(max_frags) {
  if (frag_capacity == 0 || max_frags == 0)
    throw std::invalid_argument("segment: frag_capacity and max_frags must be >= 1");
  if (data.size() > frag_capacity * max_frags)
    throw std::invalid_argument("segment: data exceeds max_frags * frag_capacity");
  for (std::size_t off = 0; off < data.size(); off += frag_capacity) {
    auto n = std::min(frag_capacity, data.size() - off);
    frags_.emplace_back(data.begin() + off, data.begin() + off + n);
  }
  total_len_ = data.size();
}

void Segment::copy_to(std::size_t offset, MutableByteView out) const {
  if (offset + out.size() > total_len_) throw std::out_of_range("segment: copy past end");
  std::size_t written = 0;
  std::size_t pos = 0;
  for (const auto& f : frags_) {
    if (written == out.size()) break;
    std::size_t fend = pos + f.size();
    if (fend > offset + written) {
      std::size_t from = offset + written - pos;
      std::size_t n = std::min(f.size() - from, out.size() - written);
      std::memcpy(out.data() + written, f.data() + from, n);
      written += n;
    }
    pos = fend;
  }
}

Bytes Segment::to_bytes() const {
  Bytes out(total_len_);
  copy_to(0, out);
  return out;
}

Segment::SplitResult Segment::split(Segment&& seg, std::size_t n) {
  if (n == 0 || n >= seg.total_len_) throw std::out_of_range("segment: split point out of range");

  Segment head;
  Segment tail;
  head.id_ = next_id();
  tail.id_ = next_id();
  head.frag_capacity_ = tail.frag_capacity_ = seg.frag_capacity_;
  head.max_frags_ = tail.max_frags_ = seg.max_frags_;
  head.borrowed_ = tail.borrowed_ = seg.borrowed_;

  std::size_t copied = 0;
  std::size_t pos = 0;
  for (auto& f : seg.frags_) {
    std::size_t fend = pos + f.size();
    if (fend <= n) {
      head.frags_.push_back(std::move(f));
    } else if (pos >= n) {
      tail.frags_.push_back(std::move(f));
    } else {
      std::size_t keep = n - pos;
      tail.frags_.emplace_back(f.begin() + keep, f.end());
      copied += f.size() - keep;
      f.resize(keep);
      head.frags_.push_back(std::move(f));
    }
    pos = fend;
  }
  head.total_len_ = n;
  tail.total_len_ = seg.total_len_ - n;
  seg.frags_.clear();
  seg.total_len_ = 0;
  return SplitResult{std::move(head), std::move(tail), copied};
}

std::vector<Segment> segment_build(ByteView data, std::size_t frag_capacity, std::size_t max_frags) {
  if (frag_capacity == 0 || max_frags == 0)
    throw std::invalid_argument("segment_build: frag_capacity and max_frags must be >= 1");
  std::vector<Segment> out;
  const std::size_t per_seg = frag_capacity * max_frags;
  out.reserve((data.size() + per_seg - 1) / per_seg);
  for (std::size_t off = 0; off < data.size(); off += per_seg) {
    auto n = std::min(per_seg, data.size() - off);
    out.emplace_back(data.subspan(off, n), frag_capacity, max_frags);
  }
  return out;
}

std::size_t total_size(const std::vector<Segment>& segs) {
  std::size_t n = 0;
  for (const auto& s : segs) n += s.size();
  return n;
}

Bytes concat(const std::vector<Segment>& segs) {
  Bytes out(total_size(segs));
  std::size_t off = 0;
  for (const auto& s : segs) {
    s.copy_to(0, MutableByteView(out).subspan(off, s.size()));
    off += s.size();
  }
  return out;
}

void SegmentQueue::push_back(Segment seg) {
  if (seg.size() == 0) return;
  total_bytes_ += seg.size();
  segments_.push_back(std::move(seg));
}

void SegmentQueue::push_back(std::vector<Segment> segs) {
  for (auto& s : segs) push_back(std::move(s));
}

void SegmentQueue::push_front(std::vector<Segment> segs) {
  for (auto it = segs.rbegin(); it != segs.rend(); ++it) {
    if (it->size() == 0) continue;
    total_bytes_ += it->size();
    segments_.push_front(std::move(*it));
  }
}

void SegmentQueue::cut_at(std::size_t offset) {
  if (offset == 0 || offset >= total_bytes_) return;
  std::size_t pos = 0;
  for (auto it = segments_.begin(); it != segments_.end(); ++it) {
    std::size_t end = pos + it->size();
    if (offset == end) return;
    if (offset < end) {
      auto r = Segment::split(std::move(*it), offset - pos);
      split_copy_bytes_ += r.copied;
      *it = std::move(r.tail);
      segments_.insert(it, std::move(r.head));
      return;
    }
    pos = end;
  }
}

std::vector<Segment> SegmentQueue::extract(std::size_t offset, std::size_t n) {
  if (offset > total_bytes_ || n > total_bytes_ - offset)
    throw std::out_of_range("segment queue: extract range exceeds queued bytes");
  std::vector<Segment> out;
  if (n == 0) return out;
  cut_at(offset);
  cut_at(offset + n);

  std::size_t pos = 0;
  auto it = segments_.begin();
  while (pos < offset) {
    pos += it->size();
    ++it;
  }
  auto first = it;
  std::size_t taken = 0;
  while (taken < n) {
    taken += it->size();
    out.push_back(std::move(*it));
    ++it;
  }
  segments_.erase(first, it);
  total_bytes_ -= n;

  // Removing anchored bytes shrinks the anchored prefix.
  if (offset < logical_consumed_) logical_consumed_ -= std::min(n, logical_consumed_ - offset);
  return out;
}

std::vector<Segment> SegmentQueue::split_front(std::size_t n) { return extract(0, n); }

void SegmentQueue::peek(std::size_t offset, MutableByteView out) const {
  if (offset > total_bytes_ || out.size() > total_bytes_ - offset)
    throw std::out_of_range("segment queue: peek range exceeds queued bytes");
  std::size_t pos = 0;
  std::size_t written = 0;
  for (const auto& s : segments_) {
    if (written == out.size()) break;
    std::size_t end = pos + s.size();
    if (end > offset + written) {
      std::size_t from = offset + written - pos;
      std::size_t k = std::min(s.size() - from, out.size() - written);
      s.copy_to(from, out.subspan(written, k));
      written += k;
    }
    pos = end;
  }
}

void SegmentQueue::advance_logical(std::size_t n) {
  if (n > unread_bytes()) throw std::out_of_range("segment queue: logical advance past queued bytes");
  logical_consumed_ += n;
}

const char* to_string(AdjustOutcome o) {
  switch (o) {
    case AdjustOutcome::Ok: return "ok";
    case AdjustOutcome::OverLimit: return "over_limit";
    case AdjustOutcome::Underflow: return "underflow";
  }
  return "?";
}

AdjustOutcome MemoryAccount::adjust(std::int64_t delta) {
  if (delta < 0 && charged + delta < 0) return AdjustOutcome::Underflow;
  if (delta > 0 && charged + delta > limit()) return AdjustOutcome::OverLimit;
  charged += delta;
  return AdjustOutcome::Ok;
}

}  // namespace selcopy
