// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "selcopy/types.hpp"

namespace selcopy {

/// Virtual Payload Identifier. Always exactly 8 bytes on the stream,
/// little-endian.
struct Vpi {
  static constexpr std::size_t kWireSize = 8;

  std::uint64_t value = 0;

  std::array<std::uint8_t, kWireSize> encode() const;
  static Vpi decode(std::span<const std::uint8_t, kWireSize> bytes);

  friend bool operator==(Vpi, Vpi) = default;
};

struct VpiEntry {
  Vpi vpi;
  SockId source_sock{};
  std::size_t anchored_total = 0;      // bytes of payload the VPI stands for
  std::size_t anchored_remaining = 0;  // not yet transferred to a send queue
  VirtualTime created_at{};
};

/// SipHash-2-4 with a 128-bit key.
std::uint64_t siphash24(std::uint64_t k0, std::uint64_t k1, std::span<const std::uint8_t> data);

/// Global VPI table shared by every connection. All operations are
/// serialized by one internal mutex; callers may hold a socket lock while
/// calling in (the map lock is always innermost).
class VpiMap {
 public:
  static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

  explicit VpiMap(std::uint64_t salt, std::size_t capacity = kUnbounded);

  /// Derives a VPI from a keyed hash of (source_sock, seq) and inserts the
  /// entry in the same critical section. A collision with a live key is
  /// resolved by rehashing with an incremented nonce. Throws
  /// std::length_error at capacity.
  Vpi generate(SockId source_sock, std::uint64_t seq, std::size_t anchored_len, VirtualTime now);

  /// A miss is a normal result: the bytes were not a live identifier.
  std::optional<VpiEntry> lookup(std::span<const std::uint8_t, Vpi::kWireSize> candidate) const;
  std::optional<VpiEntry> lookup(Vpi vpi) const;

  /// Records that `n` anchored bytes left for a send queue. Returns false
  /// when the entry is gone or holds fewer than `n` bytes.
  bool consume(Vpi vpi, std::size_t n);

  bool remove(Vpi vpi);
  std::vector<VpiEntry> remove_for_source(SockId source_sock);

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::uint64_t collisions() const;

  /// Raw hash used for generation; exposed for statistical tests.
  std::uint64_t hash(SockId source_sock, std::uint64_t seq, std::uint64_t nonce) const;

 private:
  std::uint64_t k0_;
  std::uint64_t k1_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::unordered_map<std::uint64_t, VpiEntry> entries_;
  std::uint64_t collisions_ = 0;
};

inline std::optional<VpiEntry> vpi_lookup(const VpiMap& map, std::span<const std::uint8_t, Vpi::kWireSize> b) {
  return map.lookup(b);
}

}  // namespace selcopy
