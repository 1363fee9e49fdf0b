#include "vrdma/nic/nic.hpp"

#include <cassert>

namespace vrdma::nic {

using sim::Config;
using sim::Ns;

NicCosts NicCosts::from(const Config& cfg) {
  NicCosts c;
  c.create_qp = cfg.get_i64("nic.create_qp_ns");
  c.configure_qp = cfg.get_i64("nic.configure_qp_ns");
  c.handshake = cfg.get_i64("nic.handshake_ns");
  c.init_ctx = cfg.get_i64("nic.init_ctx_ns");
  c.init_engine = cfg.get_i64("nic.init_engine_ns");
  c.dc_reconnect = cfg.get_i64("nic.dc_reconnect_ns");
  c.dc_op_extra = cfg.get_i64("nic.dc_op_extra_ns");
  c.data_op_base = cfg.get_i64("nic.data_op_base_ns");
  c.server_op = cfg.get_i64("nic.server_op_ns");
  c.register_mr = cfg.get_i64("nic.register_mr_ns");
  c.mr_check_rtt = cfg.get_i64("nic.mr_check_rtt_ns");
  c.per_byte_ps = cfg.per_byte_ps();
  c.rc_qp_mem = cfg.get_i64("nic.rc_qp_mem_bytes");
  c.dc_qp_mem = cfg.get_i64("nic.dc_qp_mem_bytes");
  c.sq_entry_bytes = cfg.get_i64("nic.sq_entry_bytes");
  c.cq_entry_bytes = cfg.get_i64("nic.cq_entry_bytes");
  c.qp_pad_bytes = cfg.get_i64("nic.qp_mem_pad_bytes");
  c.sq_depth = static_cast<int>(cfg.get_i64("nic.sq_max_depth"));
  c.cq_depth = static_cast<int>(cfg.get_i64("nic.cq_max_depth"));
  c.rq_depth = static_cast<int>(cfg.get_i64("nic.rq_max_depth"));
  c.qp_budget = cfg.get_i64("nic.qp_budget");
  return c;
}

Nic::Nic(sim::SimClock& clk, sim::Fabric& fabric, const Config& cfg, sim::NodeId id)
    : clk_(clk), fabric_(fabric), id_(id), costs_(NicCosts::from(cfg)) {
  fabric_.register_nic(id_, this);
  // Shared endpoint for inbound dynamically-connected traffic. Not a user QP
  // and not charged against the memory meter: it stands for the hardware DCT
  // context plus its shared receive queue.
  auto ep = std::make_unique<PhysicalQp>(clk_);
  ep->qpn = next_qpn_++;
  ep->kind = QpKind::dc;
  ep->state = QpState::rts;
  ep->owner = id_;
  ep->sq_depth = 0;
  ep->cq_depth = 1 << 20;
  ep->rq_depth = 1 << 20;
  ep->is_dct_endpoint = true;
  dct_endpoint_ = ep.get();
  by_qpn_[ep->qpn] = ep.get();
  qps_.push_back(std::move(ep));
}

sim::Task<> Nic::init_context() {
  Ns engine_share = std::min(costs_.init_engine, costs_.init_ctx);
  Ns done = ctrl_engine_.acquire(clk_.now(), engine_share);
  co_await clk_.delay(done - clk_.now());
  co_await clk_.delay(costs_.init_ctx - engine_share);
}

sim::Task<PhysicalQp*> Nic::create_qp(QpKind kind) {
  return create_qp(kind, costs_.sq_depth, costs_.cq_depth, costs_.rq_depth);
}

sim::Task<PhysicalQp*> Nic::create_qp(QpKind kind, int sq_depth, int cq_depth, int rq_depth) {
  if (sq_depth <= 0 || cq_depth <= 0 || rq_depth < 0) co_return nullptr;
  if (qps_created_ >= costs_.qp_budget) co_return nullptr;
  qps_created_++;
  Ns done = ctrl_engine_.acquire(clk_.now(), costs_.create_qp);
  co_await clk_.delay(done - clk_.now());
  auto qp = std::make_unique<PhysicalQp>(clk_);
  qp->qpn = next_qpn_++;
  qp->kind = kind;
  qp->state = QpState::init;
  qp->owner = id_;
  qp->sq_depth = sq_depth;
  qp->cq_depth = cq_depth;
  qp->rq_depth = rq_depth;
  qp->mem_charged = kind == QpKind::rc
                        ? sq_depth * costs_.sq_entry_bytes + cq_depth * costs_.cq_entry_bytes +
                              costs_.qp_pad_bytes
                        : costs_.dc_qp_mem;
  meter_.charge(MemKind::qp, qp->mem_charged);
  qps_live_++;
  PhysicalQp* out = qp.get();
  by_qpn_[qp->qpn] = out;
  qps_.push_back(std::move(qp));
  co_return out;
}

void Nic::destroy_qp(PhysicalQp* qp) {
  if (!qp || qp->is_dct_endpoint || qp->state == QpState::reset) return;
  meter_.refund(MemKind::qp, qp->mem_charged);
  qp->mem_charged = 0;
  qp->state = QpState::reset;
  qp->sq.clear();
  qp->cq.clear();
  qp->rq.clear();
  qp->holdback.clear();
  by_qpn_.erase(qp->qpn);
  qps_live_--;
}

sim::Task<Status> Nic::configure_qp(PhysicalQp* qp, sim::NodeId peer, std::uint32_t peer_qpn) {
  if (!qp || qp->kind != QpKind::rc) co_return Status::invalid_op;
  if (qp->state != QpState::init) co_return Status::bad_state;
  co_await clk_.delay(costs_.configure_qp);
  if (qp->state != QpState::init) co_return Status::bad_state;
  qp->state = QpState::rtr;
  // Connectionless handshake: one wire round trip riding inside the
  // configured handshake budget.
  Ns rtt = fabric_.latency(id_, peer) + fabric_.latency(peer, id_);
  Ns local = costs_.handshake > rtt ? costs_.handshake - rtt : 0;
  co_await clk_.delay(local);
  fabric_.record(sim::WireOp::ctrl, id_, peer, 64);
  co_await clk_.delay(fabric_.latency(id_, peer));
  fabric_.record(sim::WireOp::ctrl, peer, id_, 64);
  co_await clk_.delay(fabric_.latency(peer, id_));
  qp->state = QpState::rts;
  qp->peer = peer;
  qp->peer_qpn = peer_qpn;
  co_return Status::ok;
}

Status Nic::configure_qp_boot(PhysicalQp* qp, sim::NodeId peer, std::uint32_t peer_qpn) {
  if (!qp || qp->kind != QpKind::rc) return Status::invalid_op;
  if (qp->state != QpState::init) return Status::bad_state;
  qp->state = QpState::rts;
  qp->peer = peer;
  qp->peer_qpn = peer_qpn;
  return Status::ok;
}

DctTarget Nic::create_dct_target(std::uint64_t key) {
  DctTarget t;
  t.dct_num = next_dct_num_++;
  t.dct_key = key;
  dct_targets_[t.dct_num] = key;
  return t;
}

sim::Task<MemoryRegion> Nic::register_mr(std::uint64_t base, std::int64_t length, bool remote_read,
                                         bool remote_write) {
  if (length <= 0) co_return MemoryRegion{};  // valid=false, fails every check
  co_await clk_.delay(costs_.register_mr);
  MemoryRegion mr;
  mr.mr_id = next_mr_key_;
  mr.base = base;
  mr.length = length;
  mr.lkey = next_mr_key_;
  mr.rkey = next_mr_key_;
  next_mr_key_++;
  mr.remote_read = remote_read;
  mr.remote_write = remote_write;
  mr.registered_at = clk_.now();
  mr.valid = true;
  mrs_[mr.rkey] = mr;
  co_return mr;
}

MemoryRegion Nic::register_mr_boot(std::uint64_t base, std::int64_t length, bool remote_read,
                                   bool remote_write) {
  if (length <= 0) return MemoryRegion{};
  MemoryRegion mr;
  mr.mr_id = next_mr_key_;
  mr.base = base;
  mr.length = length;
  mr.lkey = next_mr_key_;
  mr.rkey = next_mr_key_;
  next_mr_key_++;
  mr.remote_read = remote_read;
  mr.remote_write = remote_write;
  mr.registered_at = clk_.now();
  mr.valid = true;
  mrs_[mr.rkey] = mr;
  return mr;
}

Status Nic::deregister_mr(std::uint32_t rkey) {
  auto it = mrs_.find(rkey);
  if (it == mrs_.end() || !it->second.valid) return Status::invalid_mr;
  it->second.valid = false;
  return Status::ok;
}

const MemoryRegion* Nic::find_mr(std::uint32_t key) const {
  auto it = mrs_.find(key);
  return it == mrs_.end() ? nullptr : &it->second;
}

PhysicalQp* Nic::find_qp(std::uint32_t qpn) {
  auto it = by_qpn_.find(qpn);
  return it == by_qpn_.end() ? nullptr : it->second;
}

void Nic::send_ctrl(const sim::NodeId& dst, std::int64_t bytes,
                    std::function<void(sim::Ns)> on_delivery) {
  fabric_.record(sim::WireOp::ctrl, id_, dst, bytes);
  clk_.schedule(fabric_.latency(id_, dst),
                [fn = std::move(on_delivery), this] { fn(clk_.now()); });
}

Status Nic::validate(PhysicalQp* qp, const WorkRequest& wr) const {
  if (wr.len < 0) return Status::invalid_arg;
  if (wr.op != Opcode::send) {
    if (!wr.raddr || !wr.rkey) return Status::invalid_arg;
  } else {
    if (wr.raddr || wr.rkey) return Status::invalid_arg;
  }
  if (qp->kind == QpKind::dc) {
    if (!wr.route) return Status::invalid_arg;
    if (!fabric_.known(wr.route->owner)) return Status::invalid_arg;
  } else {
    // RC SENDs may carry a route as receive-side demux metadata; one-sided
    // requests address memory, not an endpoint, so a route is malformed.
    if (wr.route && wr.op != Opcode::send) return Status::invalid_arg;
    if (!qp->peer) return Status::not_connected;
  }
  const MemoryRegion* mr = find_mr(wr.lkey);
  if (!mr || !mr->valid || !mr->contains(wr.laddr, wr.len)) return Status::invalid_mr;
  return Status::ok;
}

Status Nic::post_send(PhysicalQp* qp, const std::vector<WorkRequest>& wrs) {
  if (!qp || qp->is_dct_endpoint) return Status::invalid_op;
  if (wrs.empty()) return Status::invalid_arg;
  if (qp->state == QpState::err) {
    // Rejected and flushed: one error completion per request, no slot taken.
    for (auto& wr : wrs)
      push_completion(qp, Completion{wr.wr_id, WcStatus::flush_err, 0, false, 0}, 0, false);
    return Status::bad_state;
  }
  if (!qp->usable_for_post()) return Status::bad_state;
  for (auto& wr : wrs) {
    if (Status st = validate(qp, wr); st != Status::ok) {
      enter_err(qp);
      return st;
    }
    if (static_cast<int>(qp->sq.size()) >= qp->sq_depth) {
      enter_err(qp);
      return Status::overflow;
    }
    std::uint64_t seq = qp->next_seq++;
    qp->sq.push_back(SqEntry{seq, wr.wr_id, wr.signaled, false});
    launch(qp, wr, seq);
  }
  return Status::ok;
}

void Nic::launch(PhysicalQp* qp, const WorkRequest& wr, std::uint64_t seq) {
  // Outbound payload is snapshotted at the doorbell, like a DMA engine
  // reading the source buffer when the request is processed.
  Payload payload;
  if (wr.op != Opcode::read && wr.len > 0) {
    payload = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(wr.len));
    mem_.read(wr.laddr, payload->data(), wr.len);
  }
  Ns busy = costs_.data_op_base;
  if (wr.op != Opcode::read) busy += Config::bytes_cost_ns(wr.len, costs_.per_byte_ps);
  sim::NodeId dst = qp->kind == QpKind::dc ? wr.route->owner : *qp->peer;
  if (qp->kind == QpKind::dc) {
    busy += costs_.dc_op_extra;
    if (!qp->dc_cur_peer || !(*qp->dc_cur_peer == dst)) {
      busy += costs_.dc_reconnect;
      qp->dc_cur_peer = dst;
    }
  }
  Ns departure = tx_engine_.acquire(clk_.now(), busy);
  clk_.schedule(departure - clk_.now(), [this, qp, wr, seq, dst, payload = std::move(payload)] {
    sim::WireOp kind = wr.op == Opcode::read    ? sim::WireOp::read
                       : wr.op == Opcode::write ? sim::WireOp::write
                                                : sim::WireOp::send;
    fabric_.record(kind, id_, dst, wr.len);
    Nic* target = fabric_.nic_at(dst);
    if (!target) {
      finish_wr(qp, seq, wr, WcStatus::rem_access_err, nullptr);
      return;
    }
    clk_.schedule(fabric_.latency(id_, dst), [qp, wr, seq, target, payload = std::move(payload)] {
      target->arrive(qp, wr, seq, std::move(payload));
    });
  });
}

// Runs on the target NIC: serialize on its inbound engine, execute the memory
// or message operation, then send the outcome back to the initiator.
void Nic::arrive(PhysicalQp* src_qp, const WorkRequest& wr, std::uint64_t seq, Payload payload) {
  Ns busy = costs_.server_op;
  if (wr.op == Opcode::read) busy += Config::bytes_cost_ns(wr.len, costs_.per_byte_ps);
  Ns done = rx_engine_.acquire(clk_.now(), busy);
  clk_.schedule(done - clk_.now(), [this, src_qp, wr, seq, payload = std::move(payload)] {
    if (wr.route) {
      auto it = dct_targets_.find(wr.route->target.dct_num);
      if (it == dct_targets_.end() || it->second != wr.route->target.dct_key)
        return reply(src_qp, seq, wr, WcStatus::rem_access_err, nullptr);
    }

    if (wr.op == Opcode::read || wr.op == Opcode::write) {
      const MemoryRegion* mr = find_mr(*wr.rkey);
      bool perm = mr && mr->valid && mr->contains(*wr.raddr, wr.len) &&
                  (wr.op == Opcode::read ? mr->remote_read : mr->remote_write);
      if (!perm) return reply(src_qp, seq, wr, WcStatus::rem_access_err, nullptr);
      if (wr.op == Opcode::read) {
        auto data = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(wr.len));
        if (!mem_.read(*wr.raddr, data->data(), wr.len))
          return reply(src_qp, seq, wr, WcStatus::rem_access_err, nullptr);
        return reply(src_qp, seq, wr, WcStatus::ok, std::move(data));
      }
      if (wr.len > 0 && !mem_.write(*wr.raddr, payload->data(), wr.len))
        return reply(src_qp, seq, wr, WcStatus::rem_access_err, nullptr);
      return reply(src_qp, seq, wr, WcStatus::ok, nullptr);
    }

    // SEND: consume a receive buffer on the addressed QP. Routed sends land
    // in the shared endpoint's queue regardless of transport.
    PhysicalQp* dst_qp = wr.route ? dct_endpoint_ : find_qp(src_qp->peer_qpn);
    std::uint32_t dct = wr.route ? wr.route->target.dct_num : 0;
    if (!dst_qp || dst_qp->state == QpState::err)
      return reply(src_qp, seq, wr, WcStatus::rem_access_err, nullptr);
    if (dst_qp->rq.empty()) return reply(src_qp, seq, wr, WcStatus::overflow_err, nullptr);
    RecvBuffer buf = dst_qp->rq.front();
    dst_qp->rq.pop_front();
    if (buf.len < wr.len) {
      push_completion(dst_qp,
                      Completion{buf.wr_id, WcStatus::loc_err, wr.len, true, buf.addr, dct}, 0,
                      false);
      return reply(src_qp, seq, wr, WcStatus::overflow_err, nullptr);
    }
    if (wr.len > 0) mem_.write(buf.addr, payload->data(), wr.len);
    push_completion(dst_qp, Completion{buf.wr_id, WcStatus::ok, wr.len, true, buf.addr, dct}, 0,
                    false);
    return reply(src_qp, seq, wr, WcStatus::ok, nullptr);
  });
}

void Nic::reply(PhysicalQp* src_qp, std::uint64_t seq, const WorkRequest& wr, WcStatus st,
                Payload data) {
  Nic* src = fabric_.nic_at(src_qp->owner);
  clk_.schedule(fabric_.latency(id_, src_qp->owner),
                [src, src_qp, seq, wr, st, data = std::move(data)]() mutable {
                  src->finish_wr(src_qp, seq, wr, st, std::move(data));
                });
}

void Nic::deliver_in_order(PhysicalQp* qp, std::uint64_t seq, std::function<void()> fn) {
  qp->holdback[seq] = std::move(fn);
  while (!qp->holdback.empty() && qp->holdback.begin()->first == qp->next_deliver) {
    auto run = std::move(qp->holdback.begin()->second);
    qp->holdback.erase(qp->holdback.begin());
    qp->next_deliver++;
    run();
  }
}

void Nic::finish_wr(PhysicalQp* qp, std::uint64_t seq, const WorkRequest& wr, WcStatus st,
                    Payload data) {
  deliver_in_order(qp, seq, [this, qp, seq, wr, st, data = std::move(data)] {
    SqEntry* e = find_entry(qp, seq);
    if (!e || e->finished) return;  // flushed while in flight
    e->finished = true;
    if (st == WcStatus::ok) {
      // READ: returned data lands in the local buffer now.
      if (wr.op == Opcode::read && wr.len > 0 && data) mem_.write(wr.laddr, data->data(), wr.len);
      if (wr.signaled)
        push_completion(qp, Completion{wr.wr_id, WcStatus::ok, wr.len, false, 0}, seq, true);
      return;
    }
    push_completion(qp, Completion{wr.wr_id, st, 0, false, 0}, seq, true);
    // Remote failures break an RC channel but never a hardware-managed DC
    // connection; local hazards were already handled at the doorbell.
    if (qp->kind == QpKind::rc) enter_err(qp);
  });
}

void Nic::push_completion(PhysicalQp* qp, const Completion& c, std::uint64_t seq, bool has_seq) {
  if (static_cast<int>(qp->cq.size()) >= qp->cq_depth) {
    // Completion-queue overrun is unrecoverable on real hardware.
    if (qp->state != QpState::err) enter_err(qp);
    return;
  }
  qp->cq.push_back(PhysicalQp::CqItem{c, seq, has_seq});
  qp->cq_wait.notify_all();
}

void Nic::enter_err(PhysicalQp* qp) {
  if (qp->state == QpState::err) return;
  qp->state = QpState::err;
  for (auto& e : qp->sq) {
    if (e.finished) continue;
    e.finished = true;
    push_completion(qp, Completion{e.wr_id, WcStatus::flush_err, 0, false, 0}, e.seq, true);
  }
  qp->holdback.clear();
  qp->cq_wait.notify_all();
}

SqEntry* Nic::find_entry(PhysicalQp* qp, std::uint64_t seq) {
  for (auto& e : qp->sq)
    if (e.seq == seq) return &e;
  return nullptr;
}

std::optional<Completion> Nic::poll_cq(PhysicalQp* qp) {
  if (!qp || qp->cq.empty()) return std::nullopt;
  auto item = qp->cq.front();
  qp->cq.pop_front();
  if (item.has_seq) {
    // The polled completion frees its own slot plus every earlier slot still
    // held by an unsignaled request.
    while (!qp->sq.empty() && qp->sq.front().seq <= item.seq) qp->sq.pop_front();
  }
  return item.c;
}

Status Nic::post_recv(PhysicalQp* qp, const RecvBuffer& buf) {
  if (!qp) return Status::invalid_op;
  if (qp->state == QpState::err) return Status::bad_state;
  const MemoryRegion* mr = find_mr(buf.lkey);
  if (!mr || !mr->valid || !mr->contains(buf.addr, buf.len)) return Status::invalid_mr;
  if (static_cast<int>(qp->rq.size()) >= qp->rq_depth) return Status::overflow;
  qp->rq.push_back(buf);
  return Status::ok;
}

}  // namespace vrdma::nic
