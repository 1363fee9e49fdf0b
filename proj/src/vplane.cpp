#include "vrdma/vplane/plane.hpp"

#include <algorithm>
#include <cassert>
#include <stdexcept>

#include "vrdma/bgd/bgd.hpp"

namespace vrdma::vplane {

namespace {

// Admission cap for one QP: never more outstanding requests than the CQ can
// hold, or a burst of signaled tails could overrun it and wedge the QP.
int post_cap(const nic::PhysicalQp* qp) { return std::min(qp->sq_depth, qp->cq_depth); }

}  // namespace

NodePlane::NodePlane(sim::SimClock& clk, sim::Fabric& fabric, const sim::Config& cfg,
                     nic::Nic& nic, std::vector<meta::MetaServer*> metas, PlaneDirectory& dir,
                     int cpus)
    : clk_(clk),
      fabric_(fabric),
      nic_(nic),
      metas_(std::move(metas)),
      dir_(dir),
      cpus_(cpus),
      mr_store_(cfg.get_i64("vplane.lease_period_ns")) {
  if (metas_.empty()) throw std::invalid_argument("at least one meta server required");
  if (cpus_ <= 0) throw std::invalid_argument("cpu count must be positive");
  syscall_ns_ = cfg.get_i64("fabric.syscall_overhead_ns");
  syscall_ctrl_ns_ = cfg.get_i64("fabric.syscall_ctrl_ns");
  poll_attempt_ns_ = cfg.get_i64("vplane.poll_attempt_ns");
  post_wr_ns_ = cfg.get_i64("vplane.post_wr_ns");
  ack_timeout_ns_ = cfg.get_i64("vplane.transfer_ack_timeout_ns");
  copy_ps_ = cfg.get_i64("vplane.copy_per_byte_ps");
  prepost_bytes_ = cfg.get_i64("vplane.prepost_buffer_bytes");
  vqp_meta_bytes_ = cfg.get_i64("vplane.vqp_meta_bytes");
  dc_pool_size_ = static_cast<int>(cfg.get_i64("vplane.dc_pool_size"));
  backlog_cap_ = static_cast<int>(cfg.get_i64("vplane.backlog_cap"));
  max_vqps_ = static_cast<std::uint32_t>(cfg.get_i64("vplane.max_vqps"));
  pools_.resize(static_cast<std::size_t>(cpus_));
  dir_[nic_.id()] = this;
}

sim::Task<> NodePlane::boot() {
  co_await nic_.init_context();
  // The whole simulated heap, mapped once; see kHeapRkey.
  heap_mr_ = nic_.register_mr_boot(0, std::int64_t{1} << 60, true, true);
  if (heap_mr_.rkey != kHeapRkey)
    throw std::logic_error("heap mapping must be the node's first region");
  local_mrs_[heap_mr_.lkey] = heap_mr_;
  for (auto* m : metas_) m->upsert_mr(nic_.id(), heap_mr_);
  const std::int64_t blen = kHeaderBytes + prepost_bytes_;
  for (int i = 0; i < backlog_cap_; i++) {
    const std::uint64_t addr = nic_.mem().alloc(blen);
    Status st = nic_.post_recv(nic_.dct_endpoint(),
                               nic::RecvBuffer{static_cast<std::uint64_t>(i), addr, blen,
                                               heap_mr_.lkey});
    assert(st == Status::ok);
    (void)st;
  }
  for (int c = 0; c < cpus_; c++) {
    for (int k = 0; k < dc_pool_size_; k++) {
      nic::PhysicalQp* qp = co_await nic_.create_qp(nic::QpKind::dc);
      if (!qp) throw std::runtime_error("device QP budget exhausted while building the DC pool");
      pools_[static_cast<std::size_t>(c)].dc.push_back(qp);
    }
  }
  meta_client_ = std::make_unique<meta::MetaClient>(clk_, fabric_, nic_, *metas_[0]);
  Status st = co_await meta_client_->connect();
  assert(st == Status::ok);
  (void)st;
  pump_task_ = pump_endpoint();
  booted_ = true;
}

VirtualQP* NodePlane::vqp_create(int cpu) {
  if (cpu < 0 || cpu >= cpus_ || vqps_.size() >= max_vqps_) return nullptr;
  auto vq = std::make_unique<VirtualQP>(clk_);
  vq->id = static_cast<std::uint32_t>(vqps_.size() + 1);
  vq->cpu = cpu;
  nic_.meter().charge(nic::MemKind::vqp_meta, vqp_meta_bytes_);
  vqps_.push_back(std::move(vq));
  return vqps_.back().get();
}

sim::Task<std::optional<nic::DctTarget>> NodePlane::resolve_route(sim::NodeId addr) {
  if (auto t = dc_cache_.get(addr)) co_return t;
  auto git = lookups_inflight_.find(addr);
  if (git != lookups_inflight_.end()) {
    // Another connect already has the lookup in flight; piggyback on it so
    // a burst of connects to one address pays for one wire round trip.
    auto gate = git->second;
    while (!gate->done) co_await gate->wait.wait();
    co_return gate->result;
  }
  auto gate = std::make_shared<LookupGate>(clk_);
  lookups_inflight_[addr] = gate;
  meta_lookups_++;
  std::optional<nic::DctTarget> r = co_await meta_client_->lookup(addr);
  if (r) dc_cache_.put(addr, *r);
  gate->done = true;
  gate->result = r;
  lookups_inflight_.erase(addr);
  gate->wait.notify_all();
  co_return r;
}

nic::PhysicalQp* NodePlane::pick_qp(int cpu, const sim::NodeId& addr, bool* used_rc) {
  CpuPool& p = pools_[static_cast<std::size_t>(cpu)];
  auto it = p.rc.find(addr);
  if (it != p.rc.end() && !it->second.empty()) {
    if (used_rc) *used_rc = true;
    const std::size_t i = p.rc_rr[addr]++ % it->second.size();
    return it->second[i];
  }
  if (used_rc) *used_rc = false;
  return p.dc[p.dc_rr++ % p.dc.size()];
}

sim::Task<Status> NodePlane::qconnect(VirtualQP* vq, sim::NodeId addr) {
  if (!vq) co_return Status::invalid_arg;
  co_await clk_.delay(syscall_ctrl_ns_);
  if (vq->qp) {
    const bool same = vq->peer_addr && *vq->peer_addr == addr;
    co_return same ? Status::ok : Status::invalid_op;
  }
  CpuPool& p = pools_[static_cast<std::size_t>(vq->cpu)];
  auto it = p.rc.find(addr);
  if (it != p.rc.end() && !it->second.empty()) {
    // A promoted channel to this address already exists: bind to it with
    // zero wire traffic. The route cache is warm by construction (promotion
    // is only ever triggered by earlier DC-path traffic).
    const std::size_t i = p.rc_rr[addr]++ % it->second.size();
    vq->peer_addr = addr;
    vq->dct_meta = dc_cache_.get(addr);
    vq->qp = it->second[i];
    co_return Status::ok;
  }
  auto route = co_await resolve_route(addr);
  if (!route) co_return Status::not_found;
  vq->peer_addr = addr;
  vq->dct_meta = *route;
  CpuPool& pp = pools_[static_cast<std::size_t>(vq->cpu)];
  vq->qp = pp.dc[pp.dc_rr++ % pp.dc.size()];
  co_return Status::ok;
}

void NodePlane::publish_dct(const sim::NodeId& addr, const nic::DctTarget& t) {
  for (auto* m : metas_) m->upsert_dct(addr, t);
}

sim::Task<Status> NodePlane::qbind(VirtualQP* vq, sim::NodeId addr) {
  if (!vq) co_return Status::invalid_arg;
  co_await clk_.delay(syscall_ctrl_ns_);
  if (vq->bound_addr) co_return Status::invalid_op;
  if (!(addr.gid == nic_.id().gid)) co_return Status::invalid_arg;
  if (bound_addrs_.count(addr)) co_return Status::duplicate;
  const nic::DctTarget t = nic_.create_dct_target(meta::key_digest(addr));
  vq->bound_addr = addr;
  vq->own_dct = t;
  bound_addrs_[addr] = vq->id;
  bound_by_dct_[t.dct_num] = vq->id;
  publish_dct(addr, t);
  co_return Status::ok;
}

sim::Task<Status> NodePlane::validate_wrs(VirtualQP* vq, const std::vector<VWorkRequest>& wrs) {
  for (const auto& w : wrs) {
    if (w.len < 0) co_return Status::invalid_arg;
    if (w.op == nic::Opcode::send) {
      if (!vq->dct_meta || vq->dct_meta->dct_num == 0) co_return Status::invalid_op;
      if (w.len > 0 && !nic_.mem().valid_range(w.laddr, w.len)) co_return Status::invalid_arg;
      continue;
    }
    auto lit = local_mrs_.find(w.lkey);
    if (lit == local_mrs_.end() || !lit->second.valid || !lit->second.contains(w.laddr, w.len))
      co_return Status::invalid_mr;
    const sim::NodeId owner = physical_of(*vq->peer_addr);
    const MrCacheEntry* e = mr_store_.fresh(owner, w.rkey, clk_.now());
    if (!e) {
      auto rec = co_await meta_client_->fetch_remote_mr(owner, w.rkey);
      MrCacheEntry ne;
      ne.cached_at = clk_.now();
      if (rec) {
        ne.base = rec->base;
        ne.length = rec->length;
        ne.remote_read = rec->remote_read;
        ne.remote_write = rec->remote_write;
        ne.valid = true;
      }
      mr_store_.put(owner, w.rkey, ne);
      e = mr_store_.fresh(owner, w.rkey, clk_.now());
    }
    if (!e || !e->covers(w.raddr, w.len, w.op == nic::Opcode::write))
      co_return Status::invalid_mr;
  }
  co_return Status::ok;
}

sim::Task<> NodePlane::drain_to(nic::PhysicalQp* qp, int need) {
  while (post_cap(qp) - qp->uncomp_cnt() < need) {
    drain_polls_++;
    if (!dispatch_one(qp)) co_await clk_.delay(poll_attempt_ns_);
  }
}

sim::Task<Status> NodePlane::post_segment(VirtualQP* vq, const std::vector<VWorkRequest>& wrs) {
  const int n = static_cast<int>(wrs.size());
  co_await drain_to(vq->qp, n);
  Status st = co_await validate_wrs(vq, wrs);
  if (st != Status::ok) co_return st;
  sim::Ns copy_total = 0;
  for (const auto& w : wrs)
    if (w.op == nic::Opcode::send && w.len <= prepost_bytes_)
      copy_total += sim::Config::bytes_cost_ns(w.len, copy_ps_);
  if (copy_total > 0) co_await clk_.delay(copy_total);
  // Validation and staging can suspend, so other VQPs may have consumed
  // slots meanwhile; reclaim them, then encode and post without suspending
  // so the segment hits the wire as one contiguous run.
  co_await drain_to(vq->qp, n);
  nic::PhysicalQp* qp = vq->qp;
  std::vector<nic::WorkRequest> phys;
  phys.reserve(wrs.size());
  std::uint32_t unsig = 0;
  for (std::size_t i = 0; i < wrs.size(); i++) {
    const VWorkRequest& w = wrs[i];
    nic::WorkRequest p;
    p.op = w.op;
    p.signaled = w.signaled;
    const bool last = i + 1 == wrs.size();
    if (w.signaled) {
      vq->comp_queue.push_back(CompEntry{false, w.wr_id, nic::WcStatus::ok});
      p.wr_id = encode_wr_id(vq->id, unsig + 1);
      unsig = 0;
    } else if (last) {
      // Force-signal the tail of an unsignaled run so its slots stay
      // reclaimable; the marker wakes nobody.
      p.signaled = true;
      p.wr_id = encode_wr_id(kNoneRef, unsig + 1);
    } else {
      p.wr_id = encode_wr_id(vq->id, 0);
      unsig++;
    }
    if (w.op == nic::Opcode::send) {
      const bool zc = w.len > prepost_bytes_;
      const std::int64_t wire = kHeaderBytes + (zc ? kDescriptorBytes : w.len);
      const std::uint64_t base = nic_.mem().alloc(wire);
      MsgHeader hdr;
      hdr.src = vq->bound_addr ? *vq->bound_addr : nic_.id();
      hdr.src_dct = vq->own_dct ? *vq->own_dct : nic::DctTarget{};
      hdr.zero_copy = zc;
      hdr.payload_len = static_cast<std::uint32_t>(w.len);
      std::vector<std::uint8_t> buf(static_cast<std::size_t>(wire));
      encode_msg_header(hdr, buf.data());
      if (zc) {
        ZcDescriptor d;
        d.src_addr = w.laddr;
        d.size = static_cast<std::uint32_t>(w.len);
        d.dst_vqp = vq->dct_meta->dct_num;
        encode_zc_descriptor(d, buf.data() + kHeaderBytes);
      } else if (w.len > 0) {
        nic_.mem().read(w.laddr, buf.data() + kHeaderBytes, w.len);
      }
      nic_.mem().write(base, buf.data(), wire);
      p.laddr = base;
      p.len = wire;
      p.lkey = heap_mr_.lkey;
      p.route = nic::DctRoute{physical_of(*vq->peer_addr), *vq->dct_meta};
    } else {
      p.laddr = w.laddr;
      p.len = w.len;
      p.lkey = w.lkey;
      p.raddr = w.raddr;
      p.rkey = w.rkey;
      if (qp->kind == nic::QpKind::dc)
        p.route = nic::DctRoute{physical_of(*vq->peer_addr),
                                vq->dct_meta ? *vq->dct_meta : nic::DctTarget{}};
    }
    phys.push_back(p);
  }
  st = nic_.post_send(qp, phys);
  if (st == Status::ok && promoter_ && vq->peer_addr) {
    for (std::size_t k = 0; k < wrs.size(); k++) promoter_->record(vq->cpu, *vq->peer_addr);
    if (qp->kind == nic::QpKind::rc) promoter_->touch(qp);
  }
  co_return st;
}

sim::Task<Status> NodePlane::post_send_virtualized(VirtualQP* vq, std::vector<VWorkRequest> wrs) {
  if (!vq) co_return Status::invalid_arg;
  co_await clk_.delay(syscall_ns_);
  if (wrs.empty()) co_return Status::invalid_arg;
  if (!vq->qp) co_return Status::not_connected;
  while (vq->busy) co_await vq->busy_wait.wait();
  vq->busy = true;
  // Validate the whole burst before anything reaches a queue: a malformed
  // request never leaves a partial post behind, no matter how the burst is
  // later segmented.
  Status st = co_await validate_wrs(vq, wrs);
  if (st != Status::ok) {
    vq->busy = false;
    vq->busy_wait.notify_all();
    co_return st;
  }
  std::size_t i = 0;
  while (i < wrs.size() && st == Status::ok) {
    const std::size_t cap = static_cast<std::size_t>(std::max(post_cap(vq->qp), 1));
    const std::size_t n = std::min(cap, wrs.size() - i);
    std::vector<VWorkRequest> seg(wrs.begin() + static_cast<std::ptrdiff_t>(i),
                                  wrs.begin() + static_cast<std::ptrdiff_t>(i + n));
    st = co_await post_segment(vq, seg);
    i += n;
  }
  vq->busy = false;
  vq->busy_wait.notify_all();
  co_return st;
}

bool NodePlane::dispatch_one(nic::PhysicalQp* qp) {
  if (!qp) return false;
  auto c = nic_.poll_cq(qp);
  if (!c) return false;
  if (c->is_recv) {
    handle_msg(*c);
    return true;
  }
  const DecodedWrId d = decode_wr_id(c->wr_id);
  if (d.ref == kKernelRef) {
    auto& q = kernel_cb_[qp->qpn];
    assert(!q.empty() && "kernel completion without a registered callback");
    if (!q.empty()) {
      auto fn = std::move(q.front());
      q.pop_front();
      fn(*c);
    }
    return true;
  }
  // comp_cnt 0 marks an unsignaled request surfacing only as a flush;
  // kNoneRef marks an injected tail. Neither wakes a user record.
  if (d.ref == kNoneRef || d.comp_cnt == 0) return true;
  VirtualQP* tv = vqp(d.ref);
  assert(tv && "completion for an unknown VQP");
  if (!tv) return true;
  for (auto& e : tv->comp_queue) {
    if (!e.ready) {
      e.ready = true;
      e.status = c->status;
      return true;
    }
  }
  assert(false && "signaled completion with no pending record");
  return true;
}

void NodePlane::poll_inner(VirtualQP* vq) {
  if (vq && vq->qp) dispatch_one(vq->qp);
}

std::optional<VComp> NodePlane::poll_cq_virtualized(VirtualQP* vq) {
  if (!vq) return std::nullopt;
  poll_inner(vq);
  if (!vq->comp_queue.empty() && vq->comp_queue.front().ready) {
    const CompEntry e = vq->comp_queue.front();
    vq->comp_queue.pop_front();
    return VComp{e.user_wr_id, e.status};
  }
  return std::nullopt;
}

Status NodePlane::post_recv_virtualized(VirtualQP* vq, const std::vector<nic::RecvBuffer>& bufs) {
  if (!vq) return Status::invalid_arg;
  for (const auto& b : bufs)
    if (b.len <= 0 || !nic_.mem().valid_range(b.addr, b.len)) return Status::invalid_arg;
  for (const auto& b : bufs) vq->recv_queue.push_back(b);
  while (!vq->held.empty() && !vq->recv_queue.empty()) {
    PendingMsg pm = std::move(vq->held.front());
    vq->held.pop_front();
    const nic::RecvBuffer user = vq->recv_queue.front();
    vq->recv_queue.pop_front();
    start_delivery(vq, std::move(pm), user);
  }
  return Status::ok;
}

void NodePlane::repost_kernel_buf(const nic::RecvBuffer& kbuf) {
  Status st = nic_.post_recv(nic_.dct_endpoint(), kbuf);
  assert(st == Status::ok);
  (void)st;
}

void NodePlane::handle_msg(const nic::Completion& c) {
  const nic::RecvBuffer kbuf{c.wr_id, c.recv_addr, kHeaderBytes + prepost_bytes_,
                             heap_mr_.lkey};
  std::uint8_t raw[kHeaderBytes];
  if (!nic_.mem().read(c.recv_addr, raw, kHeaderBytes)) {
    repost_kernel_buf(kbuf);
    return;
  }
  auto hdr = decode_msg_header(raw, kHeaderBytes);
  if (!hdr) {
    repost_kernel_buf(kbuf);
    return;
  }
  auto bit = bound_by_dct_.find(c.dct_num);
  if (bit == bound_by_dct_.end()) {
    repost_kernel_buf(kbuf);
    return;
  }
  VirtualQP* vq = vqp(bit->second);
  if (!vq) {
    repost_kernel_buf(kbuf);
    return;
  }
  PendingMsg pm{*hdr, kbuf};
  if (vq->held.empty() && !vq->recv_queue.empty()) {
    const nic::RecvBuffer user = vq->recv_queue.front();
    vq->recv_queue.pop_front();
    start_delivery(vq, std::move(pm), user);
  } else {
    // No user buffer yet (or older messages still waiting): park the
    // message in its kernel buffer. The buffer is not re-posted, so a
    // sustained overrun drains the endpoint queue and senders see RNR.
    vq->held.push_back(std::move(pm));
  }
}

void NodePlane::start_delivery(VirtualQP* vq, PendingMsg pm, const nic::RecvBuffer& user) {
  if (pm.hdr.zero_copy) {
    std::uint8_t raw[kDescriptorBytes];
    nic_.mem().read(pm.kbuf.addr + kHeaderBytes, raw, kDescriptorBytes);
    const auto d = decode_zc_descriptor(raw, kDescriptorBytes);
    vq->delivered.push_back(DeliveredMsg{false, pm.hdr, user.addr,
                                         d ? static_cast<std::int64_t>(d->size) : 0,
                                         nic::WcStatus::ok});
    DeliveredMsg* entry = &vq->delivered.back();
    const bool addressed_here = d && vq->own_dct && d->dst_vqp == vq->own_dct->dct_num;
    if (!addressed_here || user.len < static_cast<std::int64_t>(d->size)) {
      entry->ready = true;
      entry->status = nic::WcStatus::loc_err;
      entry->len = 0;
      repost_kernel_buf(pm.kbuf);
      return;
    }
    CpuPool& p = pools_[static_cast<std::size_t>(vq->cpu)];
    nic::PhysicalQp* qp = p.dc[p.dc_rr++ % p.dc.size()];
    clk_.schedule(post_wr_ns_,
                  [this, qp, entry, src_addr = d->src_addr,
                   size = static_cast<std::int64_t>(d->size), dst = user.addr,
                   src = pm.hdr.src, sdct = pm.hdr.src_dct, kbuf = pm.kbuf] {
                    start_zc_read(qp, entry, src_addr, size, dst, src, sdct, kbuf);
                  });
    return;
  }
  const std::int64_t plen = static_cast<std::int64_t>(pm.hdr.payload_len);
  vq->delivered.push_back(DeliveredMsg{false, pm.hdr, user.addr, plen, nic::WcStatus::ok});
  DeliveredMsg* entry = &vq->delivered.back();
  if (user.len < plen) {
    entry->ready = true;
    entry->status = nic::WcStatus::loc_err;
    entry->len = 0;
    repost_kernel_buf(pm.kbuf);
    return;
  }
  const sim::Ns copy_ns = sim::Config::bytes_cost_ns(plen, copy_ps_);
  clk_.schedule(copy_ns, [this, entry, kbuf = pm.kbuf, dst = user.addr, plen] {
    if (plen > 0) {
      std::vector<std::uint8_t> buf(static_cast<std::size_t>(plen));
      nic_.mem().read(kbuf.addr + kHeaderBytes, buf.data(), plen);
      nic_.mem().write(dst, buf.data(), plen);
    }
    entry->ready = true;
    repost_kernel_buf(kbuf);
  });
}

void NodePlane::start_zc_read(nic::PhysicalQp* qp, DeliveredMsg* entry, std::uint64_t src_addr,
                              std::int64_t size, std::uint64_t dst_addr, sim::NodeId src_node,
                              nic::DctTarget src_dct, nic::RecvBuffer kbuf) {
  if (post_cap(qp) - qp->uncomp_cnt() < 1) {
    dispatch_one(qp);
    if (post_cap(qp) - qp->uncomp_cnt() < 1) {
      clk_.schedule(poll_attempt_ns_,
                    [this, qp, entry, src_addr, size, dst_addr, src_node, src_dct, kbuf] {
                      start_zc_read(qp, entry, src_addr, size, dst_addr, src_node, src_dct,
                                    kbuf);
                    });
      return;
    }
  }
  auto done = std::make_shared<bool>(false);
  kernel_cb_[qp->qpn].push_back([this, entry, kbuf, done](nic::Completion c) {
    *done = true;
    entry->ready = true;
    entry->status = c.status;
    if (c.status != nic::WcStatus::ok) entry->len = 0;
    repost_kernel_buf(kbuf);
  });
  nic::WorkRequest p;
  p.op = nic::Opcode::read;
  p.wr_id = encode_wr_id(kKernelRef, 1);
  p.signaled = true;
  p.laddr = dst_addr;
  p.len = size;
  p.lkey = heap_mr_.lkey;
  p.raddr = src_addr;
  p.rkey = kHeapRkey;
  p.route = nic::DctRoute{physical_of(src_node), src_dct};
  const Status st = nic_.post_send(qp, {p});
  if (st != Status::ok && st != Status::bad_state) {
    // Rejected before reaching the queue, so no completion will ever fire.
    kernel_cb_[qp->qpn].pop_back();
    entry->ready = true;
    entry->status = nic::WcStatus::loc_err;
    entry->len = 0;
    repost_kernel_buf(kbuf);
    return;
  }
  pump_kernel(qp, done);
}

void NodePlane::pump_kernel(nic::PhysicalQp* qp, std::shared_ptr<bool> done) {
  while (!*done && dispatch_one(qp)) {
  }
  if (*done) return;
  clk_.schedule(poll_attempt_ns_, [this, qp, done] { pump_kernel(qp, done); });
}

sim::Task<> NodePlane::pump_endpoint() {
  nic::PhysicalQp* ep = nic_.dct_endpoint();
  while (true) {
    co_await ep->cq_wait.wait();
    while (dispatch_one(ep)) {
    }
  }
}

VirtualQP* NodePlane::reply_vqp_for(VirtualQP* parent, const MsgHeader& hdr) {
  auto it = parent->reply_vqps.find(hdr.src);
  if (it != parent->reply_vqps.end()) return vqp(it->second);
  VirtualQP* rv = vqp_create(parent->cpu);
  if (!rv) return nullptr;
  rv->peer_addr = hdr.src;
  rv->dct_meta = hdr.src_dct;
  rv->qp = pick_qp(parent->cpu, hdr.src, nullptr);
  // The reply channel speaks with the parent's identity so the peer's own
  // replies route back to the parent; it is never entered in the bound
  // maps, the parent stays the sole receive endpoint for the address.
  rv->bound_addr = parent->bound_addr;
  rv->own_dct = parent->own_dct;
  if (hdr.src_dct.dct_num != 0) dc_cache_.put(hdr.src, hdr.src_dct);
  parent->reply_vqps[hdr.src] = rv->id;
  return rv;
}

std::vector<Msg> NodePlane::qpop_msgs(VirtualQP* vq) {
  std::vector<Msg> out;
  if (!vq) return out;
  while (!vq->delivered.empty() && vq->delivered.front().ready) {
    const DeliveredMsg d = vq->delivered.front();
    vq->delivered.pop_front();
    VirtualQP* rv = reply_vqp_for(vq, d.hdr);
    out.push_back(Msg{rv ? rv->id : 0, d.addr, d.len, d.status});
  }
  return out;
}

sim::Task<bool> NodePlane::transfer_physical_qp(VirtualQP* vq, nic::PhysicalQp* new_qp) {
  if (!vq || !new_qp || !vq->qp || !vq->peer_addr) co_return false;
  if (vq->qp == new_qp) co_return true;
  const sim::NodeId peer_node = physical_of(*vq->peer_addr);
  if (new_qp->kind == nic::QpKind::rc) {
    if (!new_qp->peer || !(*new_qp->peer == peer_node) || !new_qp->usable_for_post())
      co_return false;
  } else {
    if (new_qp->is_dct_endpoint || !vq->dct_meta || vq->dct_meta->dct_num == 0) co_return false;
  }
  while (vq->busy) co_await vq->busy_wait.wait();
  vq->busy = true;
  nic::PhysicalQp* old = vq->qp;
  transfers_on_[old->qpn]++;
  transfers_on_[new_qp->qpn]++;
  // Fence: a kernel-tagged zero-length READ is the last request this VQP
  // puts on the old QP; its completion proves the pipeline has drained.
  co_await clk_.delay(post_wr_ns_);
  co_await drain_to(old, 1);
  auto done = std::make_shared<bool>(false);
  kernel_cb_[old->qpn].push_back([done](nic::Completion) { *done = true; });
  nic::WorkRequest f;
  f.op = nic::Opcode::read;
  f.wr_id = encode_wr_id(kKernelRef, 1);
  f.signaled = true;
  f.laddr = 0;
  f.len = 0;
  f.lkey = heap_mr_.lkey;
  f.raddr = 0;
  f.rkey = kHeapRkey;
  if (old->kind == nic::QpKind::dc)
    f.route = nic::DctRoute{peer_node, vq->dct_meta ? *vq->dct_meta : nic::DctTarget{}};
  const Status st = nic_.post_send(old, {f});
  if (st != Status::ok && st != Status::bad_state) {
    kernel_cb_[old->qpn].pop_back();
    *done = true;
  }
  while (!*done) {
    if (!dispatch_one(old)) co_await clk_.delay(poll_attempt_ns_);
  }
  const std::uint64_t token = next_token_++;
  auto gate = std::make_shared<CtrlGate>(clk_);
  gates_[token] = gate;
  nic_.send_ctrl(peer_node, 16, [this, peer_node, token](sim::Ns) {
    auto it = dir_.find(peer_node);
    if (it != dir_.end()) it->second->on_transfer_notify(nic_.id(), token);
  });
  const sim::EventHandle timeout = clk_.schedule(ack_timeout_ns_, [gate] {
    if (!gate->fired) {
      gate->fired = true;
      gate->value = 0;
      gate->wait.notify_all();
    }
  });
  while (!gate->fired) co_await gate->wait.wait();
  const bool acked = gate->value == 1;
  clk_.cancel(timeout);
  gates_.erase(token);
  if (acked) vq->qp = new_qp;
  auto dec = [this](std::uint32_t qpn) {
    auto it = transfers_on_.find(qpn);
    if (it != transfers_on_.end() && --it->second <= 0) transfers_on_.erase(it);
  };
  dec(old->qpn);
  dec(new_qp->qpn);
  vq->busy = false;
  vq->busy_wait.notify_all();
  co_return acked;
}

sim::Task<nic::MemoryRegion> NodePlane::register_mr_virtualized(std::uint64_t base,
                                                                std::int64_t length,
                                                                bool remote_read,
                                                                bool remote_write) {
  co_await clk_.delay(syscall_ctrl_ns_);
  nic::MemoryRegion mr = co_await nic_.register_mr(base, length, remote_read, remote_write);
  if (!mr.valid) co_return mr;
  local_mrs_[mr.lkey] = mr;
  for (auto* m : metas_) m->upsert_mr(nic_.id(), mr);
  co_return mr;
}

sim::Task<Status> NodePlane::deregister_mr_virtualized(std::uint32_t rkey) {
  co_await clk_.delay(syscall_ctrl_ns_);
  auto it = local_mrs_.find(rkey);
  if (it == local_mrs_.end() || !it->second.valid) co_return Status::invalid_mr;
  it->second.valid = false;
  for (auto* m : metas_) m->remove_mr(nic_.id(), rkey);
  // Remote caches may answer from a pre-removal snapshot for up to one
  // lease period; the device mapping stays alive exactly that long.
  clk_.schedule(mr_store_.lease_period(), [this, rkey] { nic_.deregister_mr(rkey); });
  co_return Status::ok;
}

std::vector<VirtualQP*> NodePlane::vqps_on(int cpu, const sim::NodeId& peer) {
  std::vector<VirtualQP*> out;
  for (auto& up : vqps_) {
    VirtualQP* v = up.get();
    if (v->cpu == cpu && v->qp && v->peer_addr && *v->peer_addr == peer) out.push_back(v);
  }
  return out;
}

std::vector<VirtualQP*> NodePlane::vqps_using(const nic::PhysicalQp* qp) {
  std::vector<VirtualQP*> out;
  for (auto& up : vqps_)
    if (up->qp == qp) out.push_back(up.get());
  return out;
}

bool NodePlane::qp_in_transfer(const nic::PhysicalQp* qp) const {
  auto it = transfers_on_.find(qp->qpn);
  return it != transfers_on_.end() && it->second > 0;
}

sim::Task<std::uint32_t> NodePlane::request_rc_half(sim::NodeId peer_node,
                                                    std::uint32_t local_qpn) {
  const std::uint64_t token = next_token_++;
  auto gate = std::make_shared<CtrlGate>(clk_);
  gates_[token] = gate;
  nic_.send_ctrl(peer_node, 24, [this, peer_node, local_qpn, token](sim::Ns) {
    auto it = dir_.find(peer_node);
    if (it != dir_.end()) {
      it->second->on_rc_half_request(nic_.id(), local_qpn, token);
    } else {
      on_rc_half_reply(token, 0);  // nobody listening: bounce
    }
  });
  while (!gate->fired) co_await gate->wait.wait();
  const std::uint32_t qpn = gate->value;
  gates_.erase(token);
  co_return qpn;
}

void NodePlane::retire_rc_half(sim::NodeId peer_node, std::uint32_t peer_qpn) {
  nic_.send_ctrl(peer_node, 8, [this, peer_node, peer_qpn](sim::Ns) {
    auto it = dir_.find(peer_node);
    if (it != dir_.end()) it->second->on_rc_retire(peer_qpn);
  });
}

void NodePlane::on_rc_half_request(sim::NodeId from, std::uint32_t from_qpn,
                                   std::uint64_t token) {
  ctrl_tasks_.push_back(rc_half_task(from, from_qpn, token));
}

sim::Task<> NodePlane::rc_half_task(sim::NodeId from, std::uint32_t from_qpn,
                                    std::uint64_t token) {
  nic::PhysicalQp* qp = co_await nic_.create_qp(nic::QpKind::rc);
  std::uint32_t result = 0;
  if (qp) {
    const Status st = co_await nic_.configure_qp(qp, from, from_qpn);
    if (st == Status::ok) {
      passive_rc_.push_back(qp);
      result = qp->qpn;
    } else {
      nic_.destroy_qp(qp);
    }
  }
  nic_.send_ctrl(from, 8, [this, from, token, result](sim::Ns) {
    auto it = dir_.find(from);
    if (it != dir_.end()) it->second->on_rc_half_reply(token, result);
  });
}

void NodePlane::on_rc_half_reply(std::uint64_t token, std::uint32_t qpn) {
  auto it = gates_.find(token);
  if (it == gates_.end()) return;
  auto gate = it->second;
  if (!gate->fired) {
    gate->fired = true;
    gate->value = qpn;
    gate->wait.notify_all();
  }
}

void NodePlane::on_transfer_notify(sim::NodeId from, std::uint64_t token) {
  if (drop_acks_ > 0) {
    drop_acks_--;
    return;
  }
  nic_.send_ctrl(from, 8, [this, from, token](sim::Ns) {
    auto it = dir_.find(from);
    if (it != dir_.end()) it->second->on_transfer_ack(token);
  });
}

void NodePlane::on_transfer_ack(std::uint64_t token) {
  auto it = gates_.find(token);
  if (it == gates_.end()) return;
  auto gate = it->second;
  if (!gate->fired) {
    gate->fired = true;
    gate->value = 1;
    gate->wait.notify_all();
  }
}

void NodePlane::on_rc_retire(std::uint32_t qpn) {
  nic::PhysicalQp* qp = nic_.find_qp(qpn);
  if (!qp || qp->is_dct_endpoint) return;
  std::erase(passive_rc_, qp);
  nic_.destroy_qp(qp);
}

}  // namespace vrdma::vplane
