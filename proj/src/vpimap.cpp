// SPDX-License-Identifier: Apache-2.0
#include "selcopy/vpimap.hpp"

#include <bit>
#include <stdexcept>

namespace selcopy {
namespace {

std::uint64_t load_le64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void store_le64(std::uint64_t v, std::uint8_t* p) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct SipState {
  std::uint64_t v0, v1, v2, v3;

  void round() {
    v0 += v1; v1 = std::rotl(v1, 13); v1 ^= v0; v0 = std::rotl(v0, 32);
    v2 += v3; v3 = std::rotl(v3, 16); v3 ^= v2;
    v0 += v3; v3 = std::rotl(v3, 21); v3 ^= v0;
    v2 += v1; v1 = std::rotl(v1, 17); v1 ^= v2; v2 = std::rotl(v2, 32);
  }

  void absorb(std::uint64_t m) {
    v3 ^= m;
    round();
    round();
    v0 ^= m;
  }
};

}  // namespace

std::array<std::uint8_t, Vpi::kWireSize> Vpi::encode() const {
  std::array<std::uint8_t, kWireSize> out{};
  store_le64(value, out.data());
  return out;
}

Vpi Vpi::decode(std::span<const std::uint8_t, kWireSize> bytes) { return Vpi{load_le64(bytes.data())}; }

std::uint64_t siphash24(std::uint64_t k0, std::uint64_t k1, std::span<const std::uint8_t> data) {
  SipState s{k0 ^ 0x736f6d6570736575ULL, k1 ^ 0x646f72616e646f6dULL, k0 ^ 0x6c7967656e657261ULL,
             k1 ^ 0x7465646279746573ULL};
  const std::size_t n = data.size();
  const std::size_t full = n & ~std::size_t{7};
  for (std::size_t i = 0; i < full; i += 8) s.absorb(load_le64(data.data() + i));

  std::uint64_t last = static_cast<std::uint64_t>(n & 0xff) << 56;
  for (std::size_t i = full; i < n; ++i) last |= static_cast<std::uint64_t>(data[i]) << (8 * (i - full));
  s.absorb(last);

  s.v2 ^= 0xff;
  for (int i = 0; i < 4; ++i) s.round();
  return s.v0 ^ s.v1 ^ s.v2 ^ s.v3;
}

VpiMap::VpiMap(std::uint64_t salt, std::size_t capacity)
    : k0_(salt), k1_(splitmix64(salt)), capacity_(capacity) {}

std::uint64_t VpiMap::hash(SockId source_sock, std::uint64_t seq, std::uint64_t nonce) const {
  std::array<std::uint8_t, 24> msg{};
  store_le64(to_u64(source_sock), msg.data());
  store_le64(seq, msg.data() + 8);
  store_le64(nonce, msg.data() + 16);
  return siphash24(k0_, k1_, msg);
}

Vpi VpiMap::generate(SockId source_sock, std::uint64_t seq, std::size_t anchored_len, VirtualTime now) {
  std::lock_guard lock(mu_);
  if (entries_.size() >= capacity_) throw std::length_error("vpi map at capacity");
  for (std::uint64_t nonce = 0;; ++nonce) {
    Vpi vpi{hash(source_sock, seq, nonce)};
    auto [it, inserted] = entries_.try_emplace(vpi.value, VpiEntry{vpi, source_sock, anchored_len, anchored_len, now});
    if (inserted) return vpi;
    ++collisions_;
  }
}

std::optional<VpiEntry> VpiMap::lookup(std::span<const std::uint8_t, Vpi::kWireSize> candidate) const {
  return lookup(Vpi::decode(candidate));
}

std::optional<VpiEntry> VpiMap::lookup(Vpi vpi) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(vpi.value);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

bool VpiMap::consume(Vpi vpi, std::size_t n) {
  std::lock_guard lock(mu_);
  auto it = entries_.find(vpi.value);
  if (it == entries_.end() || it->second.anchored_remaining < n) return false;
  it->second.anchored_remaining -= n;
  return true;
}

bool VpiMap::remove(Vpi vpi) {
  std::lock_guard lock(mu_);
  return entries_.erase(vpi.value) > 0;
}

std::vector<VpiEntry> VpiMap::remove_for_source(SockId source_sock) {
  std::lock_guard lock(mu_);
  std::vector<VpiEntry> out;
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (it->second.source_sock == source_sock) {
      out.push_back(it->second);
      it = entries_.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

std::size_t VpiMap::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::uint64_t VpiMap::collisions() const {
  std::lock_guard lock(mu_);
  return collisions_;
}

}  // namespace selcopy
