#pragma once

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <unordered_map>
#include <vector>

#include "vrdma/nic/nic.hpp"

namespace vrdma::meta {

inline constexpr std::int64_t kSlotBytes = 20;
inline constexpr std::uint32_t kIndexBuckets = 8192;
inline constexpr std::uint32_t kSpillSlots = 32768;
// Bucket tag marking an indirect bucket (multiple keys hash to it); real
// digests never take this value.
inline constexpr std::uint64_t kIndirectTag = 1;

// 64-bit FNV-1a digest of a node address; never returns 0 (empty bucket) or
// 1 (indirect bucket tag), so index tags can't alias a real key.
std::uint64_t key_digest(const sim::NodeId& id);

// Position of a digest inside an indirect bucket's spill block of k slots.
// Shared by the server (when writing the block) and clients (when choosing
// the second READ's address).
inline std::uint32_t second_slot(std::uint64_t digest, std::uint32_t salt2, std::uint32_t k) {
  std::uint64_t mix = digest ^ (static_cast<std::uint64_t>(salt2) * 0x9e3779b97f4a7c15ull);
  mix *= 0x2545f4914f6cdd1dull;
  return static_cast<std::uint32_t>((mix >> 37) % k);
}

// One registered region as the MR registry reports it to clients.
struct MrRecord {
  std::uint64_t base = 0;
  std::int64_t length = 0;
  bool remote_read = false;
  bool remote_write = false;
};

// Replicated store of every node's DCT routing metadata plus the registry of
// checkable memory regions. Lookups are one-sided: the store lives as real
// bytes in the host NIC's memory and clients READ it without any server CPU
// involvement. The RPC path exists as the measured baseline.
class MetaServer {
 public:
  MetaServer(sim::SimClock& clk, sim::Fabric& fabric, nic::Nic& host, const sim::Config& cfg);

  nic::Nic& host() { return host_; }

  // Boot-time registration of one node's DCT target. Idempotent per node.
  void upsert_dct(const sim::NodeId& owner, const nic::DctTarget& value);
  std::optional<nic::DctTarget> get_dct(const sim::NodeId& owner) const;
  std::size_t entry_count() const { return entries_.size(); }
  // Exact store footprint: entries x configured serialized entry size.
  std::int64_t store_bytes() const;

  // ValidMR bookkeeping (driven by the registration/deregistration path).
  void upsert_mr(const sim::NodeId& owner, const nic::MemoryRegion& mr);
  void remove_mr(const sim::NodeId& owner, std::uint32_t rkey);
  bool mr_valid(const sim::NodeId& owner, std::uint32_t rkey, std::uint64_t addr,
                std::int64_t len) const;
  std::optional<MrRecord> get_mr(const sim::NodeId& owner, std::uint32_t rkey) const;

  // Boot constants a client needs for one-sided lookups.
  std::uint64_t salt() const { return salt_; }
  std::uint64_t index_base() const { return index_base_; }
  std::uint64_t entry_base() const { return entry_base_; }
  std::uint64_t spill_base() const { return spill_base_; }
  std::uint32_t store_rkey() const { return store_mr_.rkey; }
  std::uint32_t bucket_of(std::uint64_t digest) const;

  // RC plumbing for one client node: the meta-side half of its boot QP.
  // Returns the QP so the client can wire its own half against it.
  sim::Task<nic::PhysicalQp*> accept_client(sim::NodeId client, std::uint32_t client_qpn);

  // Serves SEND-based lookup requests arriving on accepted client QPs.
  // Exactly one CPU service event per request.
  std::uint64_t cpu_events() const { return cpu_events_; }

  void dump_csv(std::ostream& os) const;

 private:
  void write_entry_at(std::uint64_t addr, std::uint64_t digest, const nic::DctTarget& v);
  // Rewrites one index bucket (and its spill block when it holds more than
  // one key) from the current membership.
  void rebuild_bucket(std::uint32_t bucket);
  sim::Task<> serve_qp(nic::PhysicalQp* qp, std::uint64_t reply_addr, std::uint32_t lkey);

  sim::SimClock& clk_;
  sim::Fabric& fabric_;
  nic::Nic& host_;
  std::int64_t entry_bytes_;
  std::int64_t read_bytes_;
  sim::Ns rpc_service_ns_;
  nic::MemoryRegion store_mr_;
  std::uint64_t index_base_ = 0;
  std::uint64_t entry_base_ = 0;
  std::uint64_t spill_base_ = 0;
  std::uint64_t salt_ = 0x517cc1b727220a95ull;
  struct Entry {
    sim::NodeId owner;
    std::uint64_t digest;
    nic::DctTarget value;
    std::uint32_t slot;
  };
  std::vector<Entry> entries_;
  std::unordered_map<sim::NodeId, std::uint32_t, sim::NodeIdHash> slot_of_;
  std::unordered_map<std::uint64_t, std::uint32_t> digest_slot_;
  std::unordered_map<std::uint32_t, std::vector<std::uint32_t>> bucket_slots_;
  std::uint32_t spill_next_ = 0;  // bump allocator over the spill region
  struct MrKey {
    sim::NodeId owner;
    std::uint32_t rkey;
    bool operator==(const MrKey&) const = default;
  };
  struct MrKeyHash {
    std::size_t operator()(const MrKey& k) const {
      return sim::NodeIdHash{}(k.owner) * 1000003u + k.rkey;
    }
  };
  struct MrVal {
    std::uint64_t base;
    std::int64_t length;
    bool remote_read;
    bool remote_write;
  };
  std::unordered_map<MrKey, MrVal, MrKeyHash> mr_entries_;
  sim::SerialResource rpc_worker_;
  std::uint64_t cpu_events_ = 0;
  std::vector<sim::Task<>> servers_;
  std::uint64_t rpc_scratch_base_ = 0;
  nic::MemoryRegion rpc_scratch_mr_;
};

// Per-node client of the meta service. Owns the kernel boot RC QP toward the
// meta server plus a slab of scratch slots; multiplexes any number of
// concurrent lookups over that one QP.
class MetaClient {
 public:
  MetaClient(sim::SimClock& clk, sim::Fabric& fabric, nic::Nic& local, MetaServer& server);

  // Wires the boot QP pair. Must complete before the first lookup.
  sim::Task<Status> connect();
  bool connected() const { return qp_ != nullptr && qp_->state == nic::QpState::rts; }

  // Two dependent one-sided READs; no meta CPU event.
  sim::Task<std::optional<nic::DctTarget>> lookup(sim::NodeId target);

  // Baseline: SEND request, single meta CPU worker, SEND reply.
  sim::Task<std::optional<nic::DctTarget>> rpc_lookup(sim::NodeId target);

  // ValidMR check: one ctrl round trip on the meta lane, mr_check_rtt_ns
  // total.
  sim::Task<bool> check_remote_mr(sim::NodeId owner, std::uint32_t rkey, std::uint64_t addr,
                                  std::int64_t len);
  // Same round trip, but the reply carries the region record itself so the
  // caller can cache range and permissions; nullopt = no such registration.
  sim::Task<std::optional<MrRecord>> fetch_remote_mr(sim::NodeId owner, std::uint32_t rkey);

  nic::PhysicalQp* qp() { return qp_; }

 private:
  sim::Task<> pump();
  sim::Task<std::optional<std::vector<std::uint8_t>>> read20(std::uint64_t raddr);
  // Scratch slot base address (kSlotBytes each); waits when the slab is full.
  sim::Task<std::uint64_t> take_slot();
  void give_slot(std::uint64_t addr);

  sim::SimClock& clk_;
  sim::Fabric& fabric_;
  nic::Nic& local_;
  MetaServer& server_;
  nic::PhysicalQp* qp_ = nullptr;
  nic::MemoryRegion scratch_mr_;
  std::vector<std::uint64_t> free_slots_;
  sim::WaitList slot_wait_;
  sim::WaitList reply_wait_;
  std::unordered_map<std::uint64_t, std::function<void(nic::Completion)>> pending_;
  std::unordered_map<std::uint64_t, nic::DctTarget> recv_replies_;  // rpc token -> reply
  std::uint64_t next_wr_id_ = 1;
  sim::Task<> pump_task_;
  sim::Ns mr_check_rtt_;
};

}  // namespace vrdma::meta
