#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include "vrdma/sim/clock.hpp"

namespace vrdma::nic {
class Nic;
}

namespace vrdma::sim {

// Fabric endpoint address: 16-byte opaque GID plus a device port. One per
// node; user-level service ports are routed inside the node, not here.
struct NodeId {
  std::array<std::uint8_t, 16> gid{};
  std::uint16_t port = 0;

  bool operator==(const NodeId&) const = default;
  auto operator<=>(const NodeId&) const = default;
};

inline NodeId make_node_id(std::uint32_t index, std::uint16_t port = 1) {
  NodeId id;
  id.gid[0] = 0xfe;
  id.gid[1] = 0x80;
  id.gid[12] = static_cast<std::uint8_t>(index >> 24);
  id.gid[13] = static_cast<std::uint8_t>(index >> 16);
  id.gid[14] = static_cast<std::uint8_t>(index >> 8);
  id.gid[15] = static_cast<std::uint8_t>(index);
  id.port = port;
  return id;
}

struct NodeIdHash {
  std::size_t operator()(const NodeId& n) const {
    // FNV-1a over gid bytes and port.
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto b : n.gid) h = (h ^ b) * 0x100000001b3ull;
    h = (h ^ (n.port & 0xff)) * 0x100000001b3ull;
    h = (h ^ (n.port >> 8)) * 0x100000001b3ull;
    return static_cast<std::size_t>(h);
  }
};

enum class WireOp : std::uint8_t { read, write, send, ctrl };

// Single-switch fabric: per-hop latency, a lower configured latency toward
// meta nodes (rack-aware placement approximation), and an independent tap
// that counts every op actually put on the wire. The tap is the ground truth
// for wire-op assertions; upper layers never report their own counts.
class Fabric {
 public:
  Fabric(SimClock& clk, Ns wire_latency_ns, Ns meta_wire_latency_ns)
      : clk_(&clk), wire_ns_(wire_latency_ns), meta_wire_ns_(meta_wire_latency_ns) {
    if (wire_ns_ <= 0 || meta_wire_ns_ <= 0)
      throw std::invalid_argument("wire latencies must be strictly positive");
  }

  std::uint32_t register_nic(const NodeId& id, nic::Nic* n) {
    std::uint32_t idx = static_cast<std::uint32_t>(nics_by_index_.size());
    index_[id] = idx;
    nics_by_index_.push_back(n);
    return idx;
  }

  nic::Nic* nic_at(const NodeId& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : nics_by_index_[it->second];
  }

  bool known(const NodeId& id) const { return index_.count(id) > 0; }

  void mark_meta_node(const NodeId& id) { meta_nodes_.insert(id); }

  // One-way latency for a packet from src to dst.
  Ns latency(const NodeId& src, const NodeId& dst) const {
    (void)src;
    return meta_nodes_.count(dst) || meta_nodes_.count(src) ? meta_wire_ns_ : wire_ns_;
  }

  // Tap: called once per op at the moment it departs on the wire.
  void record(WireOp op, const NodeId& src, const NodeId& dst, std::int64_t bytes) {
    totals_[static_cast<int>(op)]++;
    bytes_total_ += bytes;
    auto si = index_.find(src);
    auto di = index_.find(dst);
    if (si != index_.end() && di != index_.end())
      pair_counts_[pair_key(si->second, di->second, op)]++;
  }

  std::uint64_t count(WireOp op) const { return totals_[static_cast<int>(op)]; }
  std::uint64_t count_all() const {
    return totals_[0] + totals_[1] + totals_[2] + totals_[3];
  }
  std::uint64_t count_data() const { return totals_[0] + totals_[1] + totals_[2]; }
  std::int64_t bytes_total() const { return bytes_total_; }

  std::uint64_t pair_count(const NodeId& src, const NodeId& dst, WireOp op) const {
    auto si = index_.find(src);
    auto di = index_.find(dst);
    if (si == index_.end() || di == index_.end()) return 0;
    auto it = pair_counts_.find(pair_key(si->second, di->second, op));
    return it == pair_counts_.end() ? 0 : it->second;
  }

  SimClock& clock() { return *clk_; }

 private:
  static std::uint64_t pair_key(std::uint32_t s, std::uint32_t d, WireOp op) {
    return (static_cast<std::uint64_t>(s) << 34) | (static_cast<std::uint64_t>(d) << 2) |
           static_cast<std::uint64_t>(op);
  }

  SimClock* clk_;
  Ns wire_ns_;
  Ns meta_wire_ns_;
  std::unordered_map<NodeId, std::uint32_t, NodeIdHash> index_;
  std::vector<nic::Nic*> nics_by_index_;
  std::unordered_set<NodeId, NodeIdHash> meta_nodes_;
  std::array<std::uint64_t, 4> totals_{};
  std::int64_t bytes_total_ = 0;
  std::unordered_map<std::uint64_t, std::uint64_t> pair_counts_;
};

}  // namespace vrdma::sim
