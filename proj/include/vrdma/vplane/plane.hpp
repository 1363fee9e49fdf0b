#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "vrdma/meta/meta.hpp"
#include "vrdma/nic/nic.hpp"
#include "vrdma/vplane/vqp.hpp"

namespace vrdma::bgd {
class Promoter;
}

namespace vrdma::vplane {

// The kernel registers the whole simulated heap once at boot under this key,
// modeling a kernel-space global memory mapping: zero-copy READs and transfer
// fence requests address peer memory through it without exchanging rkeys.
// Asserted at boot; holds because the heap is every node's first region.
inline constexpr std::uint32_t kHeapRkey = 0x1000;

// Bound addresses are (node gid, service port); the wire routes to the
// node's device port.
inline sim::NodeId physical_of(const sim::NodeId& addr) {
  sim::NodeId n = addr;
  n.port = 1;
  return n;
}

// Node-local cache of remote DCT routes. Entries are only invalidated when
// the owner node is declared down, which has no trigger here (no failure
// model), so the cache only grows.
class DcCache {
 public:
  std::optional<nic::DctTarget> get(const sim::NodeId& addr) const {
    auto it = entries_.find(addr);
    return it == entries_.end() ? std::nullopt : std::make_optional(it->second);
  }
  void put(const sim::NodeId& addr, const nic::DctTarget& t) { entries_[addr] = t; }
  bool contains(const sim::NodeId& addr) const { return entries_.count(addr) > 0; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<sim::NodeId, nic::DctTarget, sim::NodeIdHash> entries_;
};

struct MrCacheEntry {
  std::uint64_t base = 0;
  std::int64_t length = 0;
  bool remote_read = false;
  bool remote_write = false;
  bool valid = false;  // negative lookups are cached under the same lease
  sim::Ns cached_at = 0;

  bool covers(std::uint64_t addr, std::int64_t len, bool want_write) const {
    return valid && len >= 0 && addr >= base &&
           addr + static_cast<std::uint64_t>(len) <= base + static_cast<std::uint64_t>(length) &&
           (want_write ? remote_write : remote_read);
  }
};

// Lease-gated cache of remote MR validity. An entry answers checks only
// while its age is within the lease period; anything older is flushed and
// re-fetched from the meta service.
class MrStore {
 public:
  explicit MrStore(sim::Ns lease_period) : lease_(lease_period) {}

  const MrCacheEntry* fresh(const sim::NodeId& owner, std::uint32_t rkey, sim::Ns now) {
    auto it = entries_.find(Key{owner, rkey});
    if (it == entries_.end()) return nullptr;
    if (now - it->second.cached_at > lease_) {
      entries_.erase(it);
      return nullptr;
    }
    return &it->second;
  }
  void put(const sim::NodeId& owner, std::uint32_t rkey, const MrCacheEntry& e) {
    entries_[Key{owner, rkey}] = e;
  }
  sim::Ns lease_period() const { return lease_; }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Key {
    sim::NodeId owner;
    std::uint32_t rkey;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      return sim::NodeIdHash{}(k.owner) * 1000003u + k.rkey;
    }
  };
  sim::Ns lease_;
  std::unordered_map<Key, MrCacheEntry, KeyHash> entries_;
};

// Per-CPU slice of the hybrid pool. DC QPs are fixed at boot; RC QPs come
// and go with the background promoter. Selection is round-robin in both.
struct CpuPool {
  std::unordered_map<sim::NodeId, std::vector<nic::PhysicalQp*>, sim::NodeIdHash> rc;
  std::unordered_map<sim::NodeId, std::size_t, sim::NodeIdHash> rc_rr;
  std::vector<nic::PhysicalQp*> dc;
  std::size_t dc_rr = 0;

  std::size_t rc_count() const {
    std::size_t n = 0;
    for (auto& [addr, list] : rc) n += list.size();
    return n;
  }
};

class NodePlane;
using PlaneDirectory = std::unordered_map<sim::NodeId, NodePlane*, sim::NodeIdHash>;

// One node's kernel-side control plane: the VQP registry, the hybrid QP
// pool, route/MR caches, the two-sided demux pump and the transfer protocol.
class NodePlane {
 public:
  NodePlane(sim::SimClock& clk, sim::Fabric& fabric, const sim::Config& cfg, nic::Nic& nic,
            std::vector<meta::MetaServer*> metas, PlaneDirectory& dir, int cpus);
  NodePlane(const NodePlane&) = delete;

  // Device context, heap mapping, DC pool, backlog pre-posts, meta client,
  // demux pump. Must finish before any other call.
  sim::Task<> boot();
  bool booted() const { return booted_; }

  VirtualQP* vqp_create(int cpu);
  sim::Task<Status> qconnect(VirtualQP* vq, sim::NodeId addr);
  sim::Task<Status> qbind(VirtualQP* vq, sim::NodeId addr);
  sim::Task<Status> post_send_virtualized(VirtualQP* vq, std::vector<VWorkRequest> wrs);
  void poll_inner(VirtualQP* vq);
  std::optional<VComp> poll_cq_virtualized(VirtualQP* vq);
  Status post_recv_virtualized(VirtualQP* vq, const std::vector<nic::RecvBuffer>& bufs);
  std::vector<Msg> qpop_msgs(VirtualQP* vq);
  // Swaps vq onto new_qp after fencing in-flight work and handshaking with
  // the peer; false = aborted (ack timeout or invalid pairing), old QP kept.
  sim::Task<bool> transfer_physical_qp(VirtualQP* vq, nic::PhysicalQp* new_qp);
  sim::Task<nic::MemoryRegion> register_mr_virtualized(std::uint64_t base, std::int64_t length,
                                                       bool remote_read, bool remote_write);
  sim::Task<Status> deregister_mr_virtualized(std::uint32_t rkey);

  VirtualQP* vqp(std::uint32_t id) {
    return id >= 1 && id <= vqps_.size() ? vqps_[id - 1].get() : nullptr;
  }
  std::size_t vqp_count() const { return vqps_.size(); }
  CpuPool& pool(int cpu) { return pools_[static_cast<std::size_t>(cpu)]; }
  int cpus() const { return cpus_; }
  nic::Nic& device() { return nic_; }
  DcCache& dc_cache() { return dc_cache_; }
  MrStore& mr_store() { return mr_store_; }
  meta::MetaClient& meta_client() { return *meta_client_; }
  std::uint64_t meta_lookups() const { return meta_lookups_; }
  const nic::MemoryRegion& heap_mr() const { return heap_mr_; }

  std::uint64_t drain_polls() const { return drain_polls_; }

  // Promoter integration.
  void attach_promoter(bgd::Promoter* p) { promoter_ = p; }
  std::vector<VirtualQP*> vqps_on(int cpu, const sim::NodeId& peer);
  std::vector<VirtualQP*> vqps_using(const nic::PhysicalQp* qp);
  bool qp_in_transfer(const nic::PhysicalQp* qp) const;
  // Asks the peer node to create and configure its half of an RC channel;
  // returns the peer QP number, 0 on failure.
  sim::Task<std::uint32_t> request_rc_half(sim::NodeId peer_node, std::uint32_t local_qpn);
  // Tells the peer node to destroy a previously created half.
  void retire_rc_half(sim::NodeId peer_node, std::uint32_t peer_qpn);

  // Test hook: swallow the next transfer acknowledgment this node would
  // send, forcing the initiator down the timeout path.
  void drop_next_transfer_ack() { drop_acks_++; }

  // Ctrl-plane entry points, invoked on the destination node's plane.
  void on_rc_half_request(sim::NodeId from, std::uint32_t from_qpn, std::uint64_t token);
  void on_rc_half_reply(std::uint64_t token, std::uint32_t qpn);
  void on_transfer_notify(sim::NodeId from, std::uint64_t token);
  void on_transfer_ack(std::uint64_t token);
  void on_rc_retire(std::uint32_t qpn);

 private:
  struct CtrlGate {
    explicit CtrlGate(sim::SimClock& c) : wait(c) {}
    sim::WaitList wait;
    bool fired = false;
    std::uint32_t value = 0;
  };
  struct LookupGate {
    explicit LookupGate(sim::SimClock& c) : wait(c) {}
    sim::WaitList wait;
    bool done = false;
    std::optional<nic::DctTarget> result;
  };

  // Pops one completion off the QP's CQ and routes it: recv completions to
  // the message demux, kernel refs to the per-QP callback queue, user refs
  // to the owning VQP's completion queue. Any caller may harvest any
  // completion; readiness marking is target-directed, never caller-directed.
  bool dispatch_one(nic::PhysicalQp* qp);
  void handle_msg(const nic::Completion& c);
  void start_delivery(VirtualQP* vq, PendingMsg pm, const nic::RecvBuffer& user);
  // Self-rescheduling poll chain that keeps harvesting a QP until the
  // kernel op it was started for has completed.
  void pump_kernel(nic::PhysicalQp* qp, std::shared_ptr<bool> done);
  sim::Task<> pump_endpoint();
  sim::Task<Status> validate_wrs(VirtualQP* vq, const std::vector<VWorkRequest>& wrs);
  sim::Task<Status> post_segment(VirtualQP* vq, const std::vector<VWorkRequest>& wrs);
  // Polls completions off the QP until at least `need` slots are free.
  sim::Task<> drain_to(nic::PhysicalQp* qp, int need);
  // Posts (or retries until it can post) the kernel READ that lands a
  // zero-copy payload straight into the user buffer.
  void start_zc_read(nic::PhysicalQp* qp, DeliveredMsg* entry, std::uint64_t src_addr,
                     std::int64_t size, std::uint64_t dst_addr, sim::NodeId src_node,
                     nic::DctTarget src_dct, nic::RecvBuffer kbuf);
  sim::Task<std::optional<nic::DctTarget>> resolve_route(sim::NodeId addr);
  nic::PhysicalQp* pick_qp(int cpu, const sim::NodeId& addr, bool* used_rc);
  VirtualQP* reply_vqp_for(VirtualQP* parent, const MsgHeader& hdr);
  void repost_kernel_buf(const nic::RecvBuffer& kbuf);
  void publish_dct(const sim::NodeId& addr, const nic::DctTarget& t);
  sim::Task<> rc_half_task(sim::NodeId from, std::uint32_t from_qpn, std::uint64_t token);

  sim::SimClock& clk_;
  sim::Fabric& fabric_;
  nic::Nic& nic_;
  std::vector<meta::MetaServer*> metas_;
  PlaneDirectory& dir_;
  int cpus_;
  std::unique_ptr<meta::MetaClient> meta_client_;
  std::vector<std::unique_ptr<VirtualQP>> vqps_;
  std::vector<CpuPool> pools_;
  DcCache dc_cache_;
  MrStore mr_store_;
  // This node's own registrations (key: lkey/rkey, identical per region).
  std::unordered_map<std::uint32_t, nic::MemoryRegion> local_mrs_;
  std::unordered_map<sim::NodeId, std::uint32_t, sim::NodeIdHash> bound_addrs_;
  std::unordered_map<std::uint32_t, std::uint32_t> bound_by_dct_;
  std::unordered_map<sim::NodeId, std::shared_ptr<LookupGate>, sim::NodeIdHash> lookups_inflight_;
  std::unordered_map<std::uint32_t, std::deque<std::function<void(nic::Completion)>>> kernel_cb_;
  std::unordered_map<std::uint64_t, std::shared_ptr<CtrlGate>> gates_;
  std::unordered_map<std::uint32_t, int> transfers_on_;
  // Passive halves created on behalf of remote promoters; never pooled here.
  std::vector<nic::PhysicalQp*> passive_rc_;
  nic::MemoryRegion heap_mr_;
  sim::Task<> pump_task_;
  bgd::Promoter* promoter_ = nullptr;
  bool booted_ = false;
  int drop_acks_ = 0;
  std::uint64_t next_token_ = 1;
  std::uint64_t meta_lookups_ = 0;
  std::uint64_t drain_polls_ = 0;
  // Keeps coroutines spawned by ctrl handlers alive (passive RC setup).
  std::vector<sim::Task<>> ctrl_tasks_;

  sim::Ns syscall_ns_;
  sim::Ns syscall_ctrl_ns_;
  sim::Ns poll_attempt_ns_;
  sim::Ns post_wr_ns_;
  sim::Ns ack_timeout_ns_;
  std::int64_t copy_ps_;
  std::int64_t prepost_bytes_;
  std::int64_t vqp_meta_bytes_;
  int dc_pool_size_;
  int backlog_cap_;
  std::uint32_t max_vqps_;
};

}  // namespace vrdma::vplane
