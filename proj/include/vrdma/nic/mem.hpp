#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <vector>

namespace vrdma::nic {

// Sparse per-node byte memory. Buffers are bump-allocated and never reused;
// an access must land entirely inside one allocation, anything else is the
// simulated equivalent of a wild pointer.
class Mem {
 public:
  std::uint64_t alloc(std::int64_t len) {
    std::uint64_t base = next_;
    blocks_[base] = std::vector<std::uint8_t>(static_cast<std::size_t>(len), 0);
    next_ += static_cast<std::uint64_t>(len) + 64;  // red zone between blocks
    return base;
  }

  bool write(std::uint64_t addr, const std::uint8_t* src, std::int64_t n) {
    if (n == 0) return true;  // a zero-byte access touches no memory
    auto* b = locate(addr, n);
    if (!b) return false;
    std::memcpy(b, src, static_cast<std::size_t>(n));
    return true;
  }

  bool read(std::uint64_t addr, std::uint8_t* dst, std::int64_t n) const {
    if (n == 0) return true;
    const auto* b = locate(addr, n);
    if (!b) return false;
    std::memcpy(dst, b, static_cast<std::size_t>(n));
    return true;
  }

  bool valid_range(std::uint64_t addr, std::int64_t n) const {
    return n == 0 || locate(addr, n) != nullptr;
  }

 private:
  const std::uint8_t* locate(std::uint64_t addr, std::int64_t n) const {
    if (n < 0) return nullptr;
    auto it = blocks_.upper_bound(addr);
    if (it == blocks_.begin()) return nullptr;
    --it;
    std::uint64_t off = addr - it->first;
    if (off + static_cast<std::uint64_t>(n) > it->second.size()) return nullptr;
    return it->second.data() + off;
  }
  std::uint8_t* locate(std::uint64_t addr, std::int64_t n) {
    return const_cast<std::uint8_t*>(static_cast<const Mem*>(this)->locate(addr, n));
  }

  std::uint64_t next_ = 0x1000;
  std::map<std::uint64_t, std::vector<std::uint8_t>> blocks_;
};

enum class MemKind : std::uint8_t { qp, vqp_meta, cache, mr, buffer };

// Per-node accounting of simulated memory consumed by connection state.
// Scenario memory reports come straight from here.
class MemMeter {
 public:
  void charge(MemKind k, std::int64_t bytes) { by_kind_[static_cast<int>(k)] += bytes; }
  void refund(MemKind k, std::int64_t bytes) { by_kind_[static_cast<int>(k)] -= bytes; }
  std::int64_t of(MemKind k) const { return by_kind_[static_cast<int>(k)]; }
  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : by_kind_) t += v;
    return t;
  }

 private:
  std::array<std::int64_t, 5> by_kind_{};
};

}  // namespace vrdma::nic
