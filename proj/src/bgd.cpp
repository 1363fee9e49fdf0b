#include "vrdma/bgd/bgd.hpp"

#include <algorithm>

namespace vrdma::bgd {

Promoter::Promoter(sim::SimClock& clk, vplane::NodePlane& plane, const sim::Config& cfg)
    : clk_(clk),
      plane_(plane),
      window_ns_(cfg.get_i64("bgd.window_ns")),
      threshold_(cfg.get_i64("bgd.threshold")),
      rc_capacity_(static_cast<std::size_t>(cfg.get_i64("bgd.rc_capacity"))),
      retry_base_(cfg.get_i64("bgd.retry_base_ns")),
      retry_cap_(cfg.get_i64("bgd.retry_cap_ns")) {
  plane_.attach_promoter(this);
}

void Promoter::record(int cpu, const sim::NodeId& peer) {
  Window& w = windows_[Key{cpu, peer}];
  const sim::Ns now = clk_.now();
  if (now - w.start >= window_ns_) {
    w.start = now;
    w.count = 0;
  }
  w.count++;
  // >= instead of ==: after a reclaim drops the latch, sustained demand in
  // the same window re-promotes on the next request instead of waiting for
  // the window to tumble.
  if (w.count < threshold_ || w.promoted) return;
  w.promoted = true;
  auto& pool = plane_.pool(cpu);
  auto it = pool.rc.find(peer);
  if (it != pool.rc.end() && !it->second.empty()) return;  // channel already up
  promotions_started_++;
  tasks_.push_back(promote(cpu, peer));
}

void Promoter::touch(nic::PhysicalQp* qp) {
  auto it = rc_infos_.find(qp->qpn);
  if (it != rc_infos_.end()) it->second.last_use = clk_.now();
}

std::int64_t Promoter::window_count(int cpu, const sim::NodeId& peer) const {
  auto it = windows_.find(Key{cpu, peer});
  if (it == windows_.end()) return 0;
  if (clk_.now() - it->second.start >= window_ns_) return 0;
  return it->second.count;
}

sim::Task<> Promoter::promote(int cpu, sim::NodeId peer) {
  // Device QP budget pressure is transient (reclaims refund it), so create
  // failures back off and retry instead of giving up.
  sim::Ns backoff = retry_base_;
  nic::PhysicalQp* qp = nullptr;
  while (!qp) {
    qp = co_await plane_.device().create_qp(nic::QpKind::rc);
    if (qp) break;
    co_await clk_.delay(backoff);
    backoff = std::min(backoff * 2, retry_cap_);
  }
  const sim::NodeId peer_node = vplane::physical_of(peer);
  const std::uint32_t peer_qpn = co_await plane_.request_rc_half(peer_node, qp->qpn);
  if (peer_qpn == 0) {
    plane_.device().destroy_qp(qp);
    windows_[Key{cpu, peer}].promoted = false;
    co_return;
  }
  const Status st = co_await plane_.device().configure_qp(qp, peer_node, peer_qpn);
  if (st != Status::ok) {
    plane_.retire_rc_half(peer_node, peer_qpn);
    plane_.device().destroy_qp(qp);
    windows_[Key{cpu, peer}].promoted = false;
    co_return;
  }
  auto& pool = plane_.pool(cpu);
  pool.rc[peer].push_back(qp);
  rc_infos_[qp->qpn] = RcInfo{peer, peer_qpn, clk_.now()};
  promotions_done_++;
  for (vplane::VirtualQP* vq : plane_.vqps_on(cpu, peer)) {
    co_await plane_.transfer_physical_qp(vq, qp);
  }
  if (pool.rc_count() > rc_capacity_) co_await reclaim(cpu);
}

sim::Task<> Promoter::reclaim(int cpu) {
  auto& pool = plane_.pool(cpu);
  while (pool.rc_count() > rc_capacity_) {
    // LRU victim; QPs mid-transfer or holding unconsumed receive buffers
    // are not safe to tear down and are skipped.
    nic::PhysicalQp* victim = nullptr;
    sim::Ns oldest = 0;
    for (auto& [addr, list] : pool.rc) {
      for (nic::PhysicalQp* qp : list) {
        if (plane_.qp_in_transfer(qp) || !qp->rq.empty()) continue;
        auto it = rc_infos_.find(qp->qpn);
        const sim::Ns used = it == rc_infos_.end() ? 0 : it->second.last_use;
        if (!victim || used < oldest) {
          victim = qp;
          oldest = used;
        }
      }
    }
    if (!victim) co_return;
    const RcInfo info = rc_infos_[victim->qpn];
    bool moved_all = true;
    for (vplane::VirtualQP* vq : plane_.vqps_using(victim)) {
      auto& p = plane_.pool(vq->cpu);
      nic::PhysicalQp* dc = p.dc[p.dc_rr++ % p.dc.size()];
      if (!co_await plane_.transfer_physical_qp(vq, dc)) moved_all = false;
    }
    if (!moved_all) co_return;  // a stuck transfer keeps the channel alive
    auto lit = pool.rc.find(info.addr);
    if (lit != pool.rc.end()) {
      std::erase(lit->second, victim);
      if (lit->second.empty()) pool.rc.erase(lit);
    }
    plane_.retire_rc_half(vplane::physical_of(info.addr), info.peer_qpn);
    plane_.device().destroy_qp(victim);
    rc_infos_.erase(victim->qpn);
    windows_[Key{cpu, info.addr}].promoted = false;
    reclaims_++;
  }
}

}  // namespace vrdma::bgd
