// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <stdexcept>
#include <vector>

namespace selcopy {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;
using MutableByteView = std::span<std::uint8_t>;

inline constexpr std::size_t kDefaultFragCapacity = 1448;  // MSS
inline constexpr std::size_t kDefaultMaxFrags = 17;        // MAX_SKB_FRAGS
inline constexpr std::size_t kBigTcpMaxFrags = 45;

/// The skb analog. A byte run held as bounded page fragments.
///
/// Segments are move-only values. Content never changes after
/// construction; `split` consumes the segment and yields two new ones.
class Segment {
 public:
  Segment(ByteView data, std::size_t frag_capacity, std::size_t max_frags);

  Segment(Segment&&) noexcept = default;
  Segment& operator=(Segment&&) noexcept = default;
  Segment(const Segment&) = delete;
  Segment& operator=(const Segment&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return total_len_; }
  std::size_t frag_count() const { return frags_.size(); }
  std::size_t frag_capacity() const { return frag_capacity_; }
  std::size_t max_frags() const { return max_frags_; }
  const std::vector<Bytes>& frags() const { return frags_; }

  /// Set when the segment entered a send queue by ownership transfer
  /// rather than by a copy from user space.
  bool borrowed() const { return borrowed_; }
  void mark_borrowed(bool b) { borrowed_ = b; }

  /// Copies `n` bytes starting at `offset` into `out`.
  void copy_to(std::size_t offset, MutableByteView out) const;
  Bytes to_bytes() const;

  struct SplitResult;
  /// Splits at byte `n` (0 < n < size). Only the fragment straddling the
  /// cut has its tail duplicated; `copied` reports how many bytes that was.
  static SplitResult split(Segment&& seg, std::size_t n);

 private:
  Segment() = default;
  static std::uint64_t next_id();

  std::uint64_t id_ = 0;
  std::vector<Bytes> frags_;
  std::size_t total_len_ = 0;
  std::size_t frag_capacity_ = kDefaultFragCapacity;
  std::size_t max_frags_ = kDefaultMaxFrags;
  bool borrowed_ = false;
};

struct Segment::SplitResult {
  Segment head;
  Segment tail;
  std::size_t copied = 0;
};

/// Aggregates `data` into maximal segments (GRO-style): every segment but
/// the last carries `max_frags` full fragments.
std::vector<Segment> segment_build(ByteView data, std::size_t frag_capacity = kDefaultFragCapacity,
                                   std::size_t max_frags = kDefaultMaxFrags);

std::size_t total_size(const std::vector<Segment>& segs);
Bytes concat(const std::vector<Segment>& segs);

/// Ordered segment queue. The first `logical_consumed()` bytes have been
/// reported to the application but are still physically held (anchored).
class SegmentQueue {
 public:
  std::size_t total_bytes() const { return total_bytes_; }
  std::size_t logical_consumed() const { return logical_consumed_; }
  std::size_t unread_bytes() const { return total_bytes_ - logical_consumed_; }
  std::size_t segment_count() const { return segments_.size(); }
  bool empty() const { return segments_.empty(); }
  const std::deque<Segment>& segments() const { return segments_; }

  void push_back(Segment seg);
  void push_back(std::vector<Segment> segs);
  void push_front(std::vector<Segment> segs);

  /// Removes and returns the first `n` bytes. Throws std::out_of_range
  /// when n exceeds total_bytes. Anchored accounting shrinks with it.
  std::vector<Segment> split_front(std::size_t n);

  /// Removes bytes [offset, offset+n). Throws std::out_of_range when the
  /// range leaves the queue.
  std::vector<Segment> extract(std::size_t offset, std::size_t n);

  /// Copies bytes [offset, offset+out.size()) without removing them.
  void peek(std::size_t offset, MutableByteView out) const;

  void advance_logical(std::size_t n);

  /// Bytes duplicated by segment splits since construction.
  std::size_t split_copy_bytes() const { return split_copy_bytes_; }

 private:
  // Ensures a segment boundary exists at `offset`.
  void cut_at(std::size_t offset);

  std::deque<Segment> segments_;
  std::size_t total_bytes_ = 0;
  std::size_t logical_consumed_ = 0;
  std::size_t split_copy_bytes_ = 0;
};

enum class AdjustOutcome { Ok, OverLimit, Underflow };

const char* to_string(AdjustOutcome o);

/// Socket memory budget. `charged` may never go negative.
struct MemoryAccount {
  std::int64_t charged = 0;
  std::int64_t base_limit = 0;
  std::int64_t temp_raise = 0;

  std::int64_t limit() const { return base_limit + temp_raise; }
  std::int64_t room() const { return charged >= limit() ? 0 : limit() - charged; }

  /// Applies `delta` or leaves the account untouched and reports why not.
  AdjustOutcome adjust(std::int64_t delta);
};

inline AdjustOutcome account_adjust(MemoryAccount& a, std::int64_t delta) { return a.adjust(delta); }

}  // namespace selcopy
