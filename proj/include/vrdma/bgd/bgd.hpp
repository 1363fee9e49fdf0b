#pragma once

#include <unordered_map>
#include <vector>

#include "vrdma/vplane/plane.hpp"

namespace vrdma::bgd {

// Watches per-(cpu, peer) request rates in tumbling windows and drives the
// RC lifecycle for one node: promote a hot peer to a dedicated RC channel in
// the background, transfer its VQPs over, and reclaim the least recently
// used RC QP once a sub-pool exceeds capacity.
class Promoter {
 public:
  Promoter(sim::SimClock& clk, vplane::NodePlane& plane, const sim::Config& cfg);
  Promoter(const Promoter&) = delete;

  // Called once per posted request. May schedule a background promotion;
  // never blocks or charges the caller.
  void record(int cpu, const sim::NodeId& peer);
  // LRU refresh, driven by every post that lands on a pooled RC QP.
  void touch(nic::PhysicalQp* qp);

  std::uint64_t promotions_started() const { return promotions_started_; }
  std::uint64_t promotions_done() const { return promotions_done_; }
  std::uint64_t reclaims() const { return reclaims_; }
  std::int64_t window_count(int cpu, const sim::NodeId& peer) const;

 private:
  struct Key {
    int cpu = 0;
    sim::NodeId peer;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      return sim::NodeIdHash{}(k.peer) * 31u + static_cast<std::size_t>(k.cpu);
    }
  };
  struct Window {
    sim::Ns start = 0;
    std::int64_t count = 0;
    bool promoted = false;
  };

  sim::Task<> promote(int cpu, sim::NodeId peer);
  sim::Task<> reclaim(int cpu);

  sim::SimClock& clk_;
  vplane::NodePlane& plane_;
  sim::Ns window_ns_;
  std::int64_t threshold_;
  std::size_t rc_capacity_;
  sim::Ns retry_base_;
  sim::Ns retry_cap_;
  // Per pooled RC QP: which sub-pool it belongs to, the passive half's
  // qpn on the peer (needed to retire it), and the LRU stamp.
  struct RcInfo {
    sim::NodeId addr;
    std::uint32_t peer_qpn = 0;
    sim::Ns last_use = 0;
  };

  std::unordered_map<Key, Window, KeyHash> windows_;
  std::unordered_map<std::uint32_t, RcInfo> rc_infos_;
  std::vector<sim::Task<>> tasks_;
  std::uint64_t promotions_started_ = 0;
  std::uint64_t promotions_done_ = 0;
  std::uint64_t reclaims_ = 0;
};

}  // namespace vrdma::bgd
