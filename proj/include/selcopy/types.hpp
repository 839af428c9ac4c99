// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <ostream>

namespace selcopy {

enum class SockId : std::uint64_t {};

inline std::uint64_t to_u64(SockId id) { return static_cast<std::uint64_t>(id); }
inline std::ostream& operator<<(std::ostream& os, SockId id) { return os << "sock#" << to_u64(id); }

/// Virtual time. All timeouts run on an injectable clock so tests are
/// deterministic.
using VirtualTime = std::chrono::nanoseconds;

}  // namespace selcopy

template <>
struct std::hash<selcopy::SockId> {
  std::size_t operator()(selcopy::SockId id) const noexcept { return std::hash<std::uint64_t>{}(selcopy::to_u64(id)); }
};
