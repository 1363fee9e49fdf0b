#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <unordered_map>

#include "vrdma/nic/nic.hpp"
#include "vrdma/vplane/wire.hpp"

namespace vrdma::vplane {

// Physical wr_id encoding: [high 32: owner reference][low 32: slots freed].
// Reference 0 marks an injected tail signal (frees slots, wakes nobody),
// 0xFFFFFFFF marks a kernel-issued request routed to the kernel's per-QP
// callback queue; anything else is the owning VirtualQP's id.
inline constexpr std::uint32_t kNoneRef = 0;
inline constexpr std::uint32_t kKernelRef = 0xFFFFFFFFu;

inline std::uint64_t encode_wr_id(std::uint32_t ref, std::uint32_t comp_cnt) {
  return (static_cast<std::uint64_t>(ref) << 32) | comp_cnt;
}

struct DecodedWrId {
  std::uint32_t ref = 0;
  std::uint32_t comp_cnt = 0;

  bool operator==(const DecodedWrId&) const = default;
};

inline DecodedWrId decode_wr_id(std::uint64_t id) {
  return {static_cast<std::uint32_t>(id >> 32), static_cast<std::uint32_t>(id)};
}

// User-visible work request. One-sided ops carry the local MR key plus the
// remote (raddr, rkey); SENDs carry only a source range, the kernel stages
// the bytes (or a zero-copy descriptor) itself.
struct VWorkRequest {
  nic::Opcode op = nic::Opcode::read;
  std::uint64_t wr_id = 0;
  bool signaled = false;
  std::uint64_t laddr = 0;
  std::int64_t len = 0;
  std::uint32_t lkey = 0;
  std::uint64_t raddr = 0;
  std::uint32_t rkey = 0;
};

struct VComp {
  std::uint64_t wr_id = 0;
  nic::WcStatus status = nic::WcStatus::ok;

  bool operator==(const VComp&) const = default;
};

// One received message, delivered into the user buffer at addr. src_vqp is
// a VQP already connected back to the sender via the piggybacked route.
struct Msg {
  std::uint32_t src_vqp = 0;
  std::uint64_t addr = 0;
  std::int64_t len = 0;
  nic::WcStatus status = nic::WcStatus::ok;
};

// Software completion record: appended at post time, flipped Ready when the
// matching physical completion is dispatched, popped strictly in order.
struct CompEntry {
  bool ready = false;
  std::uint64_t user_wr_id = 0;
  nic::WcStatus status = nic::WcStatus::ok;
};

// Message parked in its kernel pre-post buffer until a user buffer exists.
// The buffer is not re-posted until delivery finishes, so sustained overrun
// drains the shared endpoint's receive queue and pushes back on senders.
struct PendingMsg {
  MsgHeader hdr;
  nic::RecvBuffer kbuf;
};

// Delivery record: created when the kernel starts moving a message into the
// user buffer, flipped ready when the bytes have landed (copy done or
// zero-copy READ completed). qpop_msgs returns the ready prefix in order.
struct DeliveredMsg {
  bool ready = false;
  MsgHeader hdr;
  std::uint64_t addr = 0;
  std::int64_t len = 0;
  nic::WcStatus status = nic::WcStatus::ok;
};

struct VirtualQP {
  explicit VirtualQP(sim::SimClock& clk) : busy_wait(clk) {}
  VirtualQP(const VirtualQP&) = delete;

  std::uint32_t id = 0;
  int cpu = 0;

  // Set by the first successful qconnect; swapped only by transfers.
  nic::PhysicalQp* qp = nullptr;
  std::optional<sim::NodeId> peer_addr;
  std::optional<nic::DctTarget> dct_meta;

  // Set by qbind.
  std::optional<sim::NodeId> bound_addr;
  std::optional<nic::DctTarget> own_dct;

  std::deque<CompEntry> comp_queue;
  std::deque<nic::RecvBuffer> recv_queue;
  std::deque<PendingMsg> held;
  std::deque<DeliveredMsg> delivered;
  // Reply VQPs created on first contact, one per remote sender address.
  std::unordered_map<sim::NodeId, std::uint32_t, sim::NodeIdHash> reply_vqps;

  // Post/transfer mutual exclusion: a transfer never swaps the QP out from
  // under a half-issued post list and vice versa.
  bool busy = false;
  sim::WaitList busy_wait;

  bool connected() const { return qp != nullptr; }
};

}  // namespace vrdma::vplane
