#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "vrdma/nic/mem.hpp"
#include "vrdma/nic/types.hpp"
#include "vrdma/sim/clock.hpp"
#include "vrdma/sim/config.hpp"
#include "vrdma/sim/fabric.hpp"
#include "vrdma/sim/task.hpp"
#include "vrdma/status.hpp"

namespace vrdma::nic {

// Cost table resolved from config once per NIC.
struct NicCosts {
  sim::Ns create_qp = 0;
  sim::Ns configure_qp = 0;
  sim::Ns handshake = 0;
  sim::Ns init_ctx = 0;
  sim::Ns init_engine = 0;
  sim::Ns dc_reconnect = 0;
  sim::Ns dc_op_extra = 0;
  sim::Ns data_op_base = 0;
  sim::Ns server_op = 0;
  sim::Ns register_mr = 0;
  sim::Ns mr_check_rtt = 0;
  std::int64_t per_byte_ps = 0;
  std::int64_t rc_qp_mem = 0;
  std::int64_t dc_qp_mem = 0;
  std::int64_t sq_entry_bytes = 0;
  std::int64_t cq_entry_bytes = 0;
  std::int64_t qp_pad_bytes = 0;
  int sq_depth = 0;
  int cq_depth = 0;
  int rq_depth = 0;
  std::int64_t qp_budget = 0;

  static NicCosts from(const sim::Config& cfg);
};

// One send-queue slot. Slots are freed when a later signaled completion is
// polled; `finished` marks that the wire round trip (or flush) already
// produced this entry's outcome.
struct SqEntry {
  std::uint64_t seq = 0;
  std::uint64_t wr_id = 0;
  bool signaled = false;
  bool finished = false;
};

class Nic;

struct PhysicalQp {
  PhysicalQp(sim::SimClock& clk) : cq_wait(clk) {}
  PhysicalQp(const PhysicalQp&) = delete;

  std::uint32_t qpn = 0;
  QpKind kind = QpKind::rc;
  QpState state = QpState::reset;
  sim::NodeId owner;
  int sq_depth = 0;
  int cq_depth = 0;
  int rq_depth = 0;

  // RC wiring, fixed at configure time.
  std::optional<sim::NodeId> peer;
  std::uint32_t peer_qpn = 0;

  // DC: the target the hardware connection currently points at.
  std::optional<sim::NodeId> dc_cur_peer;

  std::deque<SqEntry> sq;
  std::deque<RecvBuffer> rq;
  bool is_dct_endpoint = false;

  sim::WaitList cq_wait;  // notified on every completion push

  int uncomp_cnt() const { return static_cast<int>(sq.size()); }
  bool usable_for_post() const {
    return (kind == QpKind::rc && state == QpState::rts) ||
           (kind == QpKind::dc && (state == QpState::init || state == QpState::rts));
  }

 private:
  friend class Nic;
  struct CqItem {
    Completion c;
    std::uint64_t seq = 0;   // frees sq entries with seq <= this
    bool has_seq = false;
  };
  std::deque<CqItem> cq;
  std::uint64_t next_seq = 1;
  std::uint64_t next_deliver = 1;
  std::map<std::uint64_t, std::function<void()>> holdback;
  std::int64_t mem_charged = 0;
};

// Simulated RNIC plus the node's driver control path. One per node. All
// methods must be called from simulation context (event callbacks or tasks).
class Nic {
 public:
  Nic(sim::SimClock& clk, sim::Fabric& fabric, const sim::Config& cfg, sim::NodeId id);

  const sim::NodeId& id() const { return id_; }
  Mem& mem() { return mem_; }
  MemMeter& meter() { return meter_; }
  const NicCosts& costs() const { return costs_; }
  sim::SerialResource& ctrl_engine() { return ctrl_engine_; }

  // Driver/process context bring-up: serialized device share, then the
  // caller-thread share. Charged once per simulated process.
  sim::Task<> init_context();

  // Control path. create_qp serializes on the device control engine and
  // charges QP memory at completion; nullptr once the per-node budget is
  // spent. configure_qp walks an RC QP INIT->RTR->RTS including the
  // datagram handshake round trip with the peer.
  sim::Task<PhysicalQp*> create_qp(QpKind kind, int sq_depth, int cq_depth, int rq_depth);
  sim::Task<PhysicalQp*> create_qp(QpKind kind);  // config depths
  sim::Task<Status> configure_qp(PhysicalQp* qp, sim::NodeId peer, std::uint32_t peer_qpn);
  // Boot-path variant for pairs wired up before any measured traffic, or
  // whose transition cost a scenario charges through its own model.
  Status configure_qp_boot(PhysicalQp* qp, sim::NodeId peer, std::uint32_t peer_qpn);
  void destroy_qp(PhysicalQp* qp);  // refunds memory; instant

  // DCT targets served by this node. Requests routed with a matching
  // (dct_num, dct_key) land on the shared endpoint's receive queue.
  DctTarget create_dct_target(std::uint64_t key);
  PhysicalQp* dct_endpoint() { return dct_endpoint_; }

  sim::Task<MemoryRegion> register_mr(std::uint64_t base, std::int64_t length, bool remote_read,
                                      bool remote_write);
  // Boot-path registration for infrastructure buffers wired up before any
  // measured traffic; identical semantics, no simulated time consumed.
  MemoryRegion register_mr_boot(std::uint64_t base, std::int64_t length, bool remote_read,
                                bool remote_write);
  Status deregister_mr(std::uint32_t rkey);
  const MemoryRegion* find_mr(std::uint32_t key) const;

  // Data path. post_send is the raw device doorbell: it validates, takes
  // send-queue slots and schedules the wire round trips. A malformed request
  // or overflow rejects the offender, moves the QP to ERR and flushes
  // every in-flight request with FLUSH_ERR.
  Status post_send(PhysicalQp* qp, const std::vector<WorkRequest>& wrs);
  std::optional<Completion> poll_cq(PhysicalQp* qp);
  Status post_recv(PhysicalQp* qp, const RecvBuffer& buf);

  PhysicalQp* find_qp(std::uint32_t qpn);
  std::int64_t qps_created() const { return qps_created_; }
  std::int64_t qps_live() const { return qps_live_; }

  // Control-plane datagram: pays one tapped ctrl wire op, then runs the
  // callback at the destination after the one-way latency.
  void send_ctrl(const sim::NodeId& dst, std::int64_t bytes,
                 std::function<void(sim::Ns)> on_delivery);

 private:
  friend struct PhysicalQp;

  using Payload = std::shared_ptr<std::vector<std::uint8_t>>;

  Status validate(PhysicalQp* qp, const WorkRequest& wr) const;
  void launch(PhysicalQp* qp, const WorkRequest& wr, std::uint64_t seq);
  // Runs on the target NIC once the request arrives.
  void arrive(PhysicalQp* src_qp, const WorkRequest& wr, std::uint64_t seq, Payload payload);
  // Runs on the target NIC: sends the response back to the initiator.
  void reply(PhysicalQp* src_qp, std::uint64_t seq, const WorkRequest& wr, WcStatus st,
             Payload data);
  void deliver_in_order(PhysicalQp* qp, std::uint64_t seq, std::function<void()> fn);
  // Runs on the initiator: applies the outcome of one work request.
  void finish_wr(PhysicalQp* qp, std::uint64_t seq, const WorkRequest& wr, WcStatus st,
                 Payload data);
  void push_completion(PhysicalQp* qp, const Completion& c, std::uint64_t seq, bool has_seq);
  void enter_err(PhysicalQp* qp);
  SqEntry* find_entry(PhysicalQp* qp, std::uint64_t seq);

  sim::SimClock& clk_;
  sim::Fabric& fabric_;
  sim::NodeId id_;
  NicCosts costs_;
  Mem mem_;
  MemMeter meter_;
  sim::SerialResource ctrl_engine_;  // create_qp + device share of init
  sim::SerialResource tx_engine_;    // outbound work-request processing
  sim::SerialResource rx_engine_;    // inbound request service
  std::vector<std::unique_ptr<PhysicalQp>> qps_;
  std::unordered_map<std::uint32_t, PhysicalQp*> by_qpn_;
  PhysicalQp* dct_endpoint_ = nullptr;
  std::unordered_map<std::uint32_t, std::uint64_t> dct_targets_;  // num -> key
  std::unordered_map<std::uint32_t, MemoryRegion> mrs_;           // key -> region
  std::uint32_t next_qpn_ = 1;
  std::uint32_t next_dct_num_ = 7;
  std::uint32_t next_mr_key_ = 0x1000;
  std::int64_t qps_created_ = 0;
  std::int64_t qps_live_ = 0;
};

}  // namespace vrdma::nic
