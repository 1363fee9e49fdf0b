#include "vrdma/meta/meta.hpp"

#include <cstring>
#include <iomanip>
#include <sstream>

namespace vrdma::meta {

namespace {

constexpr int kRpcRecvSlots = 64;
constexpr int kClientScratchSlots = 256;
constexpr int kClientRecvSlots = 32;

void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::uint64_t key_digest(const sim::NodeId& id) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : id.gid) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  h ^= static_cast<std::uint8_t>(id.port & 0xff);
  h *= 0x100000001b3ull;
  h ^= static_cast<std::uint8_t>(id.port >> 8);
  h *= 0x100000001b3ull;
  if (h <= kIndirectTag) h += 0x9e3779b97f4a7c15ull;  // reserve the index tags
  return h;
}

MetaServer::MetaServer(sim::SimClock& clk, sim::Fabric& fabric, nic::Nic& host,
                       const sim::Config& cfg)
    : clk_(clk),
      fabric_(fabric),
      host_(host),
      entry_bytes_(cfg.get_i64("meta.entry_bytes")),
      read_bytes_(cfg.get_i64("meta.read_bytes")),
      rpc_service_ns_(cfg.get_i64("meta.rpc_service_ns")) {
  fabric_.mark_meta_node(host_.id());
  std::int64_t index_bytes = static_cast<std::int64_t>(kIndexBuckets) * kSlotBytes;
  std::int64_t entry_bytes = static_cast<std::int64_t>(kIndexBuckets) * kSlotBytes;
  std::int64_t spill_bytes = static_cast<std::int64_t>(kSpillSlots) * kSlotBytes;
  index_base_ = host_.mem().alloc(index_bytes + entry_bytes + spill_bytes);
  entry_base_ = index_base_ + static_cast<std::uint64_t>(index_bytes);
  spill_base_ = entry_base_ + static_cast<std::uint64_t>(entry_bytes);
  store_mr_ = host_.register_mr_boot(index_base_, index_bytes + entry_bytes + spill_bytes,
                                     /*remote_read=*/true, /*remote_write=*/false);
}

std::uint32_t MetaServer::bucket_of(std::uint64_t digest) const {
  std::uint64_t h = (digest ^ salt_) * 0x2545f4914f6cdd1dull;
  return static_cast<std::uint32_t>(h >> 51);  // top 13 bits, kIndexBuckets = 2^13
}

void MetaServer::write_entry_at(std::uint64_t addr, std::uint64_t digest,
                                const nic::DctTarget& v) {
  std::uint8_t buf[kSlotBytes] = {};
  nic::encode_dct_target(v, buf);
  for (int i = 0; i < 5; i++)
    buf[nic::kDctTargetBytes + i] = static_cast<std::uint8_t>(digest >> (8 * i));
  host_.mem().write(addr, buf, kSlotBytes);
}

void MetaServer::rebuild_bucket(std::uint32_t bucket) {
  const auto& slots = bucket_slots_[bucket];
  std::uint8_t buf[kSlotBytes] = {};
  if (slots.size() == 1) {
    const Entry& e = entries_[slots[0]];
    put_u64(buf, e.digest);
    put_u32(buf + 8, e.slot);
  } else {
    // Several keys share the bucket: move them into a fresh spill block and
    // pick a block-local salt that separates them, so a reader still
    // resolves any key with one more READ.
    auto k = static_cast<std::uint32_t>(slots.size());
    if (spill_next_ + k > kSpillSlots) throw std::runtime_error("meta spill region full");
    std::uint32_t base = spill_next_;
    spill_next_ += k;
    std::uint32_t salt2 = 0;
    for (;; salt2++) {
      if (salt2 > 10'000'000u) throw std::runtime_error("no separating bucket salt");
      std::vector<char> used(k, 0);
      bool ok = true;
      for (auto s : slots) {
        auto pos = second_slot(entries_[s].digest, salt2, k);
        if (used[pos]) {
          ok = false;
          break;
        }
        used[pos] = 1;
      }
      if (ok) break;
    }
    for (auto s : slots) {
      const Entry& e = entries_[s];
      std::uint64_t addr =
          spill_base_ +
          static_cast<std::uint64_t>(base + second_slot(e.digest, salt2, k)) * kSlotBytes;
      write_entry_at(addr, e.digest, e.value);
    }
    put_u64(buf, kIndirectTag);
    put_u32(buf + 8, base);
    put_u32(buf + 12, salt2);
    put_u32(buf + 16, k);
  }
  host_.mem().write(index_base_ + static_cast<std::uint64_t>(bucket) * kSlotBytes, buf,
                    kSlotBytes);
}

void MetaServer::upsert_dct(const sim::NodeId& owner, const nic::DctTarget& value) {
  std::uint64_t digest = key_digest(owner);
  if (auto it = slot_of_.find(owner); it != slot_of_.end()) {
    std::uint32_t slot = it->second;
    entries_[slot].value = value;
    write_entry_at(entry_base_ + static_cast<std::uint64_t>(slot) * kSlotBytes, digest, value);
    // If the key sits in a spill block, refresh its copy in place.
    std::uint8_t b[kSlotBytes];
    std::uint32_t bucket = bucket_of(digest);
    host_.mem().read(index_base_ + static_cast<std::uint64_t>(bucket) * kSlotBytes, b, kSlotBytes);
    if (get_u64(b) == kIndirectTag) {
      std::uint32_t base = get_u32(b + 8), salt2 = get_u32(b + 12), k = get_u32(b + 16);
      std::uint64_t addr =
          spill_base_ +
          static_cast<std::uint64_t>(base + second_slot(digest, salt2, k)) * kSlotBytes;
      write_entry_at(addr, digest, value);
    }
    return;
  }
  if (entries_.size() >= kIndexBuckets) throw std::runtime_error("meta store full");
  auto slot = static_cast<std::uint32_t>(entries_.size());
  entries_.push_back(Entry{owner, digest, value, slot});
  slot_of_[owner] = slot;
  digest_slot_[digest] = slot;
  write_entry_at(entry_base_ + static_cast<std::uint64_t>(slot) * kSlotBytes, digest, value);
  std::uint32_t bucket = bucket_of(digest);
  bucket_slots_[bucket].push_back(slot);
  rebuild_bucket(bucket);
}

std::optional<nic::DctTarget> MetaServer::get_dct(const sim::NodeId& owner) const {
  auto it = slot_of_.find(owner);
  if (it == slot_of_.end()) return std::nullopt;
  return entries_[it->second].value;
}

std::int64_t MetaServer::store_bytes() const {
  return static_cast<std::int64_t>(entries_.size()) * entry_bytes_;
}

void MetaServer::upsert_mr(const sim::NodeId& owner, const nic::MemoryRegion& mr) {
  mr_entries_[MrKey{owner, mr.rkey}] =
      MrVal{mr.base, mr.length, mr.remote_read, mr.remote_write};
}

void MetaServer::remove_mr(const sim::NodeId& owner, std::uint32_t rkey) {
  mr_entries_.erase(MrKey{owner, rkey});
}

bool MetaServer::mr_valid(const sim::NodeId& owner, std::uint32_t rkey, std::uint64_t addr,
                          std::int64_t len) const {
  auto it = mr_entries_.find(MrKey{owner, rkey});
  if (it == mr_entries_.end() || len <= 0) return false;
  const MrVal& v = it->second;
  return addr >= v.base &&
         addr + static_cast<std::uint64_t>(len) <= v.base + static_cast<std::uint64_t>(v.length);
}

std::optional<MrRecord> MetaServer::get_mr(const sim::NodeId& owner, std::uint32_t rkey) const {
  auto it = mr_entries_.find(MrKey{owner, rkey});
  if (it == mr_entries_.end()) return std::nullopt;
  const MrVal& v = it->second;
  return MrRecord{v.base, v.length, v.remote_read, v.remote_write};
}

sim::Task<nic::PhysicalQp*> MetaServer::accept_client(sim::NodeId client,
                                                      std::uint32_t client_qpn) {
  auto* qp = co_await host_.create_qp(nic::QpKind::rc);
  if (!qp) co_return nullptr;
  std::int64_t arena = static_cast<std::int64_t>(kRpcRecvSlots + 1) * kSlotBytes;
  std::uint64_t base = host_.mem().alloc(arena);
  auto mr = host_.register_mr_boot(base, arena, false, false);
  for (int i = 0; i < kRpcRecvSlots; i++) {
    host_.post_recv(qp, nic::RecvBuffer{static_cast<std::uint64_t>(i),
                                        base + static_cast<std::uint64_t>(i) * kSlotBytes,
                                        kSlotBytes, mr.lkey});
  }
  auto st = co_await host_.configure_qp(qp, client, client_qpn);
  if (st != Status::ok) {
    host_.destroy_qp(qp);
    co_return nullptr;
  }
  std::uint64_t reply_addr = base + static_cast<std::uint64_t>(kRpcRecvSlots) * kSlotBytes;
  servers_.push_back(serve_qp(qp, reply_addr, mr.lkey));
  co_return qp;
}

sim::Task<> MetaServer::serve_qp(nic::PhysicalQp* qp, std::uint64_t reply_addr,
                                 std::uint32_t lkey) {
  for (;;) {
    co_await qp->cq_wait.wait();
    for (;;) {
      auto c = host_.poll_cq(qp);
      if (!c) break;
      if (!c->is_recv) continue;  // reply send completions
      if (c->status != nic::WcStatus::ok) co_return;
      std::uint8_t req[kSlotBytes];
      host_.mem().read(c->recv_addr, req, kSlotBytes);
      host_.post_recv(qp, nic::RecvBuffer{c->wr_id, c->recv_addr, kSlotBytes, lkey});
      std::uint64_t digest = get_u64(req);
      std::uint64_t token = get_u64(req + 8);
      sim::Ns done = rpc_worker_.acquire(clk_.now(), rpc_service_ns_);
      cpu_events_++;
      clk_.schedule(done - clk_.now(), [this, qp, reply_addr, lkey, digest, token] {
        nic::DctTarget v{};  // zero dct_num encodes not-found
        if (auto it = digest_slot_.find(digest); it != digest_slot_.end())
          v = entries_[it->second].value;
        std::uint8_t rep[kSlotBytes] = {};
        nic::encode_dct_target(v, rep);
        put_u64(rep + nic::kDctTargetBytes, token);
        host_.mem().write(reply_addr, rep, kSlotBytes);
        nic::WorkRequest wr;
        wr.op = nic::Opcode::send;
        wr.wr_id = token;
        wr.signaled = true;
        wr.laddr = reply_addr;
        wr.len = kSlotBytes;
        wr.lkey = lkey;
        host_.post_send(qp, {wr});
      });
    }
  }
}

void MetaServer::dump_csv(std::ostream& os) const {
  os << "gid,port,dct_num,dct_key\n";
  for (const auto& e : entries_) {
    std::ostringstream gid;
    gid << std::hex << std::setfill('0');
    for (auto b : e.owner.gid) gid << std::setw(2) << static_cast<unsigned>(b);
    os << gid.str() << ',' << std::dec << e.owner.port << ',' << e.value.dct_num << ','
       << e.value.dct_key << '\n';
  }
}

MetaClient::MetaClient(sim::SimClock& clk, sim::Fabric& fabric, nic::Nic& local,
                       MetaServer& server)
    : clk_(clk),
      fabric_(fabric),
      local_(local),
      server_(server),
      slot_wait_(clk),
      reply_wait_(clk),
      mr_check_rtt_(local.costs().mr_check_rtt) {}

sim::Task<Status> MetaClient::connect() {
  if (qp_) co_return Status::duplicate;
  auto* mine = co_await local_.create_qp(nic::QpKind::rc);
  if (!mine) co_return Status::exhausted;
  auto* remote = co_await server_.accept_client(local_.id(), mine->qpn);
  if (!remote) co_return Status::exhausted;
  auto st = co_await local_.configure_qp(mine, server_.host().id(), remote->qpn);
  if (st != Status::ok) co_return st;
  std::int64_t arena =
      static_cast<std::int64_t>(kClientScratchSlots + kClientRecvSlots) * kSlotBytes;
  std::uint64_t base = local_.mem().alloc(arena);
  scratch_mr_ = local_.register_mr_boot(base, arena, false, false);
  for (int i = 0; i < kClientScratchSlots; i++)
    free_slots_.push_back(base + static_cast<std::uint64_t>(i) * kSlotBytes);
  for (int i = 0; i < kClientRecvSlots; i++) {
    std::uint64_t addr =
        base + static_cast<std::uint64_t>(kClientScratchSlots + i) * kSlotBytes;
    local_.post_recv(mine, nic::RecvBuffer{0x100000ull + static_cast<std::uint64_t>(i), addr,
                                           kSlotBytes, scratch_mr_.lkey});
  }
  qp_ = mine;
  pump_task_ = pump();
  co_return Status::ok;
}

sim::Task<> MetaClient::pump() {
  for (;;) {
    co_await qp_->cq_wait.wait();
    for (;;) {
      auto c = local_.poll_cq(qp_);
      if (!c) break;
      if (c->is_recv) {
        if (c->status != nic::WcStatus::ok) co_return;
        std::uint8_t rep[kSlotBytes];
        local_.mem().read(c->recv_addr, rep, kSlotBytes);
        local_.post_recv(qp_, nic::RecvBuffer{c->wr_id, c->recv_addr, kSlotBytes,
                                              scratch_mr_.lkey});
        std::uint64_t token = get_u64(rep + nic::kDctTargetBytes);
        recv_replies_[token] = nic::decode_dct_target(rep);
        reply_wait_.notify_all();
      } else if (auto it = pending_.find(c->wr_id); it != pending_.end()) {
        auto fn = std::move(it->second);
        pending_.erase(it);
        fn(*c);
      }
    }
  }
}

sim::Task<std::uint64_t> MetaClient::take_slot() {
  while (free_slots_.empty()) co_await slot_wait_.wait();
  std::uint64_t a = free_slots_.back();
  free_slots_.pop_back();
  co_return a;
}

void MetaClient::give_slot(std::uint64_t addr) {
  free_slots_.push_back(addr);
  slot_wait_.notify_all();
}

sim::Task<std::optional<std::vector<std::uint8_t>>> MetaClient::read20(std::uint64_t raddr) {
  std::uint64_t slot = co_await take_slot();
  std::uint64_t id = next_wr_id_++;
  nic::WorkRequest wr;
  wr.op = nic::Opcode::read;
  wr.wr_id = id;
  wr.signaled = true;
  wr.laddr = slot;
  wr.len = kSlotBytes;
  wr.lkey = scratch_mr_.lkey;
  wr.raddr = raddr;
  wr.rkey = server_.store_rkey();
  auto st = local_.post_send(qp_, {wr});
  if (st != Status::ok) {
    give_slot(slot);
    co_return std::nullopt;
  }
  struct CompletionAwaiter {
    MetaClient* mc;
    std::uint64_t id;
    nic::Completion c{};
    bool await_ready() const noexcept { return false; }
    void await_suspend(std::coroutine_handle<> h) {
      mc->pending_[id] = [this, h](nic::Completion cc) {
        c = cc;
        h.resume();
      };
    }
    nic::Completion await_resume() const noexcept { return c; }
  };
  nic::Completion c = co_await CompletionAwaiter{this, id};
  if (c.status != nic::WcStatus::ok) {
    give_slot(slot);
    co_return std::nullopt;
  }
  std::vector<std::uint8_t> out(kSlotBytes);
  local_.mem().read(slot, out.data(), kSlotBytes);
  give_slot(slot);
  co_return out;
}

sim::Task<std::optional<nic::DctTarget>> MetaClient::lookup(sim::NodeId target) {
  std::uint64_t digest = key_digest(target);
  std::uint32_t bucket = server_.bucket_of(digest);
  auto b = co_await read20(server_.index_base() + static_cast<std::uint64_t>(bucket) * kSlotBytes);
  if (!b) co_return std::nullopt;
  std::uint64_t tag = get_u64(b->data());
  std::uint64_t entry_addr;
  if (tag == kIndirectTag) {
    std::uint32_t base = get_u32(b->data() + 8);
    std::uint32_t salt2 = get_u32(b->data() + 12);
    std::uint32_t k = get_u32(b->data() + 16);
    entry_addr = server_.spill_base() +
                 static_cast<std::uint64_t>(base + second_slot(digest, salt2, k)) * kSlotBytes;
  } else if (tag == digest) {
    entry_addr =
        server_.entry_base() + static_cast<std::uint64_t>(get_u32(b->data() + 8)) * kSlotBytes;
  } else {
    co_return std::nullopt;  // empty bucket or a different key
  }
  auto e = co_await read20(entry_addr);
  if (!e) co_return std::nullopt;
  for (int i = 0; i < 5; i++)
    if ((*e)[nic::kDctTargetBytes + i] != static_cast<std::uint8_t>(digest >> (8 * i)))
      co_return std::nullopt;
  auto v = nic::decode_dct_target(e->data());
  if (v.dct_num == 0) co_return std::nullopt;
  co_return v;
}

sim::Task<std::optional<nic::DctTarget>> MetaClient::rpc_lookup(sim::NodeId target) {
  std::uint64_t digest = key_digest(target);
  std::uint64_t token = next_wr_id_++;
  std::uint64_t slot = co_await take_slot();
  std::uint8_t req[kSlotBytes] = {};
  put_u64(req, digest);
  put_u64(req + 8, token);
  local_.mem().write(slot, req, kSlotBytes);
  nic::WorkRequest wr;
  wr.op = nic::Opcode::send;
  wr.wr_id = token;
  wr.signaled = true;
  wr.laddr = slot;
  wr.len = kSlotBytes;
  wr.lkey = scratch_mr_.lkey;
  auto st = local_.post_send(qp_, {wr});
  give_slot(slot);  // payload is snapshotted at the doorbell
  if (st != Status::ok) co_return std::nullopt;
  pending_[token] = [](nic::Completion) {};  // request send completion: ignore
  while (!recv_replies_.count(token)) co_await reply_wait_.wait();
  nic::DctTarget v = recv_replies_[token];
  recv_replies_.erase(token);
  if (v.dct_num == 0) co_return std::nullopt;
  co_return v;
}

sim::Task<bool> MetaClient::check_remote_mr(sim::NodeId owner, std::uint32_t rkey,
                                            std::uint64_t addr, std::int64_t len) {
  sim::NodeId meta = server_.host().id();
  sim::Ns rtt = fabric_.latency(local_.id(), meta) + fabric_.latency(meta, local_.id());
  sim::Ns busy = mr_check_rtt_ > rtt ? mr_check_rtt_ - rtt : 0;
  co_await clk_.delay(busy);
  auto st = std::make_shared<std::pair<bool, bool>>(false, false);
  local_.send_ctrl(meta, 40, [this, st, owner, rkey, addr, len](sim::Ns) {
    bool ok = server_.mr_valid(owner, rkey, addr, len);
    server_.host().send_ctrl(local_.id(), 8, [this, st, ok](sim::Ns) {
      st->first = true;
      st->second = ok;
      reply_wait_.notify_all();
    });
  });
  while (!st->first) co_await reply_wait_.wait();
  co_return st->second;
}

sim::Task<std::optional<MrRecord>> MetaClient::fetch_remote_mr(sim::NodeId owner,
                                                               std::uint32_t rkey) {
  sim::NodeId meta = server_.host().id();
  sim::Ns rtt = fabric_.latency(local_.id(), meta) + fabric_.latency(meta, local_.id());
  sim::Ns busy = mr_check_rtt_ > rtt ? mr_check_rtt_ - rtt : 0;
  co_await clk_.delay(busy);
  struct State {
    bool done = false;
    std::optional<MrRecord> rec;
  };
  auto st = std::make_shared<State>();
  local_.send_ctrl(meta, 24, [this, st, owner, rkey](sim::Ns) {
    auto rec = server_.get_mr(owner, rkey);
    server_.host().send_ctrl(local_.id(), 24, [this, st, rec](sim::Ns) {
      st->done = true;
      st->rec = rec;
      reply_wait_.notify_all();
    });
  });
  while (!st->done) co_await reply_wait_.wait();
  co_return st->rec;
}

}  // namespace vrdma::meta
