#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>
#include <utility>
#include <vector>

#include "plane_rig.hpp"

using namespace vrdma;
using namespace vrdma::sim;
using namespace vrdma::nic;
using namespace vrdma::vplane;
using namespace rigtest;

namespace {

// Randomized one-sided request streams. Lengths stay small so the wire cost
// never dominates. Bursts are well formed by default; a generator option adds
// deliberately bad requests (unknown keys, negative lengths) and bursts wider
// than the device send queue.
struct SpecWr {
  bool is_write = false;
  std::int64_t len = 0;
  bool signaled = true;
  std::uint64_t wr_id = 0;
};
enum class Defect { none, bad_lkey, bad_rkey, neg_len };
struct SpecBurst {
  std::vector<SpecWr> wrs;
  int polls_after = 0;
  Defect defect = Defect::none;
  std::size_t defect_at = 0;
};
using Stream = std::vector<SpecBurst>;

struct GenOpts {
  int defect_percent = 0;
  int over_depth_percent = 0;
  int sq_depth = 8;
};

Stream gen_stream(std::mt19937_64& rng, int min_total, int max_total, int max_burst,
                  int sig_percent, bool force_last_signaled, std::uint64_t id_base,
                  GenOpts opts = {}) {
  const int total = min_total + static_cast<int>(rng() % (max_total - min_total + 1));
  Stream st;
  int made = 0;
  std::uint64_t next_id = id_base;
  while (made < total) {
    SpecBurst b;
    int n = 1 + static_cast<int>(rng() % max_burst);
    if (opts.over_depth_percent > 0 &&
        rng() % 100 < static_cast<std::uint64_t>(opts.over_depth_percent))
      n = opts.sq_depth + 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < n; i++, made++) {
      SpecWr w;
      w.is_write = rng() % 2 == 0;
      w.len = static_cast<std::int64_t>(rng() % 65);
      w.signaled = rng() % 100 < static_cast<std::uint64_t>(sig_percent);
      w.wr_id = next_id++;
      b.wrs.push_back(w);
    }
    if (opts.defect_percent > 0 &&
        rng() % 100 < static_cast<std::uint64_t>(opts.defect_percent)) {
      b.defect = static_cast<Defect>(1 + rng() % 3);
      b.defect_at = rng() % b.wrs.size();
    }
    b.polls_after = static_cast<int>(rng() % 4);
    st.push_back(std::move(b));
  }
  if (force_last_signaled) st.back().wrs.back().signaled = true;
  return st;
}

// Completions the virtualized path owes the caller. A burst carrying a bad
// request is rejected whole before anything reaches a queue, so none of its
// ids ever surface.
std::vector<std::uint64_t> signaled_ids(const Stream& st) {
  std::vector<std::uint64_t> ids;
  for (const auto& b : st) {
    if (b.defect != Defect::none) continue;
    for (const auto& w : b.wrs)
      if (w.signaled) ids.push_back(w.wr_id);
  }
  return ids;
}

std::vector<VWorkRequest> to_virtual(const SpecBurst& b, std::uint64_t laddr, std::uint32_t lkey,
                                     std::uint64_t raddr) {
  std::vector<VWorkRequest> wrs;
  for (const auto& s : b.wrs) {
    VWorkRequest w = read_wr(s.wr_id, laddr, lkey, raddr, kHeapRkey, s.len, s.signaled);
    if (s.is_write) w.op = Opcode::write;
    wrs.push_back(w);
  }
  if (b.defect == Defect::bad_lkey) wrs[b.defect_at].lkey = lkey + 0x9999;
  if (b.defect == Defect::bad_rkey) wrs[b.defect_at].rkey = 0xdead0001;
  if (b.defect == Defect::neg_len) wrs[b.defect_at].len = -3;
  return wrs;
}

std::vector<WorkRequest> to_raw(const SpecBurst& b, std::uint64_t laddr, std::uint32_t lkey,
                                std::uint64_t raddr, const DctRoute& route) {
  std::vector<WorkRequest> wrs;
  for (const auto& s : b.wrs) {
    WorkRequest w;
    w.op = s.is_write ? Opcode::write : Opcode::read;
    w.wr_id = s.wr_id;
    w.signaled = s.signaled;
    w.laddr = laddr;
    w.len = s.len;
    w.lkey = lkey;
    w.raddr = raddr;
    w.rkey = kHeapRkey;
    w.route = route;
    wrs.push_back(w);
  }
  if (b.defect == Defect::bad_lkey) wrs[b.defect_at].lkey = lkey + 0x9999;
  if (b.defect == Defect::bad_rkey) wrs[b.defect_at].rkey = 0xdead0001;
  if (b.defect == Defect::neg_len) wrs[b.defect_at].len = -3;
  return wrs;
}

struct ExecOut {
  std::vector<std::uint64_t> surfaced;
  bool all_ok = true;
  bool post_ok = true;
  bool transfers_ok = true;
  bool timed_out = false;
};

void take(ExecOut* out, const VComp& c) {
  out->surfaced.push_back(c.wr_id);
  if (c.status != WcStatus::ok) out->all_ok = false;
}

// Runs one stream through a virtual queue: post bursts, make the scripted
// number of poll attempts after each, then collect the remaining signaled
// completions. Optional migrations fire at the given burst boundaries.
Task<> virt_worker(SimClock& clk, NodePlane& pl, VirtualQP* vq, const Stream& st,
                   std::uint64_t laddr, std::uint32_t lkey, std::uint64_t raddr,
                   std::uint64_t jitter_seed, Ns budget,
                   const std::vector<std::pair<std::size_t, PhysicalQp*>>* transfers,
                   ExecOut* out) {
  std::mt19937_64 rng(jitter_seed);
  const Ns deadline = clk.now() + budget;
  const std::size_t want = signaled_ids(st).size();
  for (std::size_t i = 0; i < st.size(); i++) {
    if (transfers) {
      for (const auto& [at, dst] : *transfers)
        if (at == i && !co_await pl.transfer_physical_qp(vq, dst)) out->transfers_ok = false;
    }
    if (jitter_seed != 0) co_await clk.delay(static_cast<Ns>(rng() % 300));
    const Status s = co_await pl.post_send_virtualized(vq, to_virtual(st[i], laddr, lkey, raddr));
    // A bad burst must be rejected; a clean one must be accepted.
    if ((s == Status::ok) != (st[i].defect == Defect::none)) out->post_ok = false;
    for (int k = 0; k < st[i].polls_after; k++)
      if (auto c = pl.poll_cq_virtualized(vq)) take(out, *c);
  }
  while (out->surfaced.size() < want) {
    if (clk.now() > deadline) {
      out->timed_out = true;
      co_return;
    }
    if (auto c = pl.poll_cq_virtualized(vq)) {
      take(out, *c);
      continue;
    }
    co_await clk.delay(100);
  }
}

// The same stream driven straight at the device, bypassing virtualization.
Task<> raw_worker(SimClock& clk, Nic& nic, PhysicalQp* qp, const Stream& st, std::uint64_t laddr,
                  std::uint32_t lkey, std::uint64_t raddr, const DctRoute& route, Ns budget,
                  ExecOut* out) {
  const Ns deadline = clk.now() + budget;
  const std::size_t want = signaled_ids(st).size();
  for (const auto& b : st) {
    if (nic.post_send(qp, to_raw(b, laddr, lkey, raddr, route)) != Status::ok)
      out->post_ok = false;
    for (int k = 0; k < b.polls_after; k++) {
      if (auto c = nic.poll_cq(qp)) {
        out->surfaced.push_back(c->wr_id);
        if (c->status != WcStatus::ok) out->all_ok = false;
      }
    }
    co_await clk.delay(100);
  }
  while (out->surfaced.size() < want) {
    if (clk.now() > deadline) {
      out->timed_out = true;
      co_return;
    }
    if (auto c = nic.poll_cq(qp)) {
      out->surfaced.push_back(c->wr_id);
      if (c->status != WcStatus::ok) out->all_ok = false;
      continue;
    }
    co_await clk.delay(100);
  }
}

// Extra polls flush internal bookkeeping completions (forced tail signals)
// left in the device queue; none of them may surface as user completions.
bool sweep_clean(NodePlane& pl, VirtualQP* vq, int attempts = 64) {
  for (int i = 0; i < attempts; i++)
    if (pl.poll_cq_virtualized(vq).has_value()) return false;
  return true;
}

void run_all(SimClock& clk, std::vector<Task<>>& ts) {
  clk.run_until([&] {
    for (auto& t : ts)
      if (!t.done()) return false;
    return true;
  });
}

}  // namespace

TEST_CASE("hostile streams multiplexed on one queue never wedge the device") {
  Config cfg;
  REQUIRE(cfg.set("nic.sq_max_depth", "8") == Status::ok);
  REQUIRE(cfg.set("nic.cq_max_depth", "8") == Status::ok);
  REQUIRE(cfg.set("vplane.dc_pool_size", "1") == Status::ok);
  PlaneRig rig(2, cfg);
  auto& a = rig.plane(0);
  auto& b = rig.plane(1);

  VirtualQP* server_vq = b.vqp_create(0);
  auto bind = b.qbind(server_vq, rig.svc(1));
  REQUIRE(run_task(rig.clk, bind) == Status::ok);
  const std::uint64_t local = rig.nic(0).mem().alloc(4096);
  const std::uint64_t remote = rig.nic(1).mem().alloc(4096);
  const std::uint32_t lkey = a.heap_mr().lkey;

  // One probe connect up front: learns the peer route for the raw replays
  // and warms the region cache.
  VirtualQP* probe = a.vqp_create(0);
  auto pc = a.qconnect(probe, rig.svc(1));
  REQUIRE(run_task(rig.clk, pc) == Status::ok);
  REQUIRE(probe->dct_meta.has_value());
  const DctRoute route{physical_of(rig.svc(1)), *probe->dct_meta};
  PhysicalQp* shared = a.pool(0).dc[0];

  constexpr int kCases = 10000;
  int raw_broken = 0;
  for (int case_i = 0; case_i < kCases; case_i++) {
    std::mt19937_64 rng(0x51a9e000u + static_cast<std::uint64_t>(case_i));
    const int n = 2 + static_cast<int>(rng() % 7);

    std::vector<VirtualQP*> vqs;
    std::vector<Stream> streams;
    std::vector<ExecOut> outs(static_cast<std::size_t>(n));
    for (int w = 0; w < n; w++) {
      VirtualQP* vq = a.vqp_create(0);
      REQUIRE(vq);
      auto conn = a.qconnect(vq, rig.svc(1));
      if (run_task(rig.clk, conn) != Status::ok) FAIL("connect failed in case " << case_i);
      vqs.push_back(vq);
      // One burst in five carries a bad request, one in ten is wider than
      // the whole device send queue.
      streams.push_back(gen_stream(rng, 3, 6, 3, 70, false,
                                   static_cast<std::uint64_t>(case_i) * 1000 +
                                       static_cast<std::uint64_t>(w) * 100,
                                   GenOpts{20, 10, 8}));
    }

    std::vector<Task<>> workers;
    for (int w = 0; w < n; w++)
      workers.push_back(virt_worker(rig.clk, a, vqs[static_cast<std::size_t>(w)],
                                    streams[static_cast<std::size_t>(w)], local, lkey, remote,
                                    rng(), Ns{500'000'000}, nullptr,
                                    &outs[static_cast<std::size_t>(w)]));
    run_all(rig.clk, workers);

    if (shared->state == QpState::err) FAIL("shared queue broke in case " << case_i);
    for (int w = 0; w < n; w++) {
      const auto& o = outs[static_cast<std::size_t>(w)];
      if (o.timed_out || !o.post_ok || !o.all_ok)
        FAIL("stream " << w << " failed in case " << case_i);
      if (o.surfaced != signaled_ids(streams[static_cast<std::size_t>(w)]))
        FAIL("completion order broke in case " << case_i);
    }
    rig.clk.run_until_idle();
    for (auto* vq : vqs)
      if (!sweep_clean(a, vq)) FAIL("unclaimed completion in case " << case_i);
    if (shared->uncomp_cnt() != 0) FAIL("leaked send slots in case " << case_i);

    // Replay the same bursts straight at a raw queue of the same shape, the
    // way uncoordinated users would: nobody drains anyone else's backlog,
    // and bad or over-wide posts hit the device unfiltered.
    auto rawt = rig.nic(0).create_qp(QpKind::dc);
    PhysicalQp* raw = run_task(rig.clk, rawt);
    REQUIRE(raw);
    std::vector<const SpecBurst*> order;
    for (const auto& st : streams)
      for (const auto& burst : st) order.push_back(&burst);
    std::shuffle(order.begin(), order.end(), rng);
    for (const auto* burst : order)
      (void)rig.nic(0).post_send(raw, to_raw(*burst, local, lkey, remote, route));
    rig.clk.run_until_idle();
    if (raw->state == QpState::err) raw_broken++;
    rig.nic(0).destroy_qp(raw);
  }
  CHECK(shared->state != QpState::err);
  CHECK(raw_broken >= 1);
  MESSAGE("raw replays that broke the device: ", raw_broken, " of ", kCases);
}

TEST_CASE("random post and poll interleavings: total, ordered, slot balanced") {
  Config cfg;
  REQUIRE(cfg.set("nic.sq_max_depth", "4") == Status::ok);
  REQUIRE(cfg.set("nic.cq_max_depth", "4") == Status::ok);
  REQUIRE(cfg.set("vplane.dc_pool_size", "1") == Status::ok);
  PlaneRig rig(2, cfg);
  auto& a = rig.plane(0);
  auto& b = rig.plane(1);

  VirtualQP* server_vq = b.vqp_create(0);
  auto bind = b.qbind(server_vq, rig.svc(1));
  REQUIRE(run_task(rig.clk, bind) == Status::ok);
  const std::uint64_t local = rig.nic(0).mem().alloc(4096);
  const std::uint64_t remote = rig.nic(1).mem().alloc(4096);
  const std::uint32_t lkey = a.heap_mr().lkey;
  PhysicalQp* shared = a.pool(0).dc[0];

  constexpr int kCases = 2000;
  for (int case_i = 0; case_i < kCases; case_i++) {
    std::mt19937_64 rng(0xd15bacc0u + static_cast<std::uint64_t>(case_i));
    const int n = 1 + static_cast<int>(rng() % 4);
    std::vector<VirtualQP*> vqs;
    std::vector<Stream> streams;
    std::vector<ExecOut> outs(static_cast<std::size_t>(n));
    for (int w = 0; w < n; w++) {
      VirtualQP* vq = a.vqp_create(0);
      auto conn = a.qconnect(vq, rig.svc(1));
      if (run_task(rig.clk, conn) != Status::ok) FAIL("connect failed in case " << case_i);
      vqs.push_back(vq);
      streams.push_back(gen_stream(rng, 2, 5, 4, 60, false,
                                   static_cast<std::uint64_t>(case_i) * 1000 +
                                       static_cast<std::uint64_t>(w) * 100));
    }

    // One scheduler interleaves everything: posts in random order, polls on
    // arbitrary queues (idle ones included), and random gaps.
    auto driver = [](SimClock& clk, NodePlane& pl, std::vector<VirtualQP*> qs,
                     const std::vector<Stream>* sts, std::uint64_t laddr, std::uint32_t lk,
                     std::uint64_t raddr, std::uint64_t seed,
                     std::vector<ExecOut>* os) -> Task<> {
      std::mt19937_64 r(seed);
      std::vector<std::size_t> cursor(qs.size(), 0);
      auto remaining = [&] {
        std::vector<std::size_t> v;
        for (std::size_t w = 0; w < qs.size(); w++)
          if (cursor[w] < (*sts)[w].size()) v.push_back(w);
        return v;
      };
      for (auto left = remaining(); !left.empty(); left = remaining()) {
        const std::uint64_t act = r() % 10;
        if (act < 6) {
          const std::size_t w = left[r() % left.size()];
          const SpecBurst& burst = (*sts)[w][cursor[w]++];
          const Status s =
              co_await pl.post_send_virtualized(qs[w], to_virtual(burst, laddr, lk, raddr));
          if (s != Status::ok) (*os)[w].post_ok = false;
        } else if (act < 9) {
          const std::size_t w = r() % qs.size();
          if (auto c = pl.poll_cq_virtualized(qs[w])) take(&(*os)[w], *c);
        } else {
          co_await clk.delay(r() % 200);
        }
      }
      // Collect everything that is still owed.
      for (std::size_t w = 0; w < qs.size(); w++) {
        const std::size_t want = signaled_ids((*sts)[w]).size();
        const Ns deadline = clk.now() + 500'000'000;
        while ((*os)[w].surfaced.size() < want) {
          if (clk.now() > deadline) {
            (*os)[w].timed_out = true;
            break;
          }
          if (auto c = pl.poll_cq_virtualized(qs[w])) {
            take(&(*os)[w], *c);
            continue;
          }
          co_await clk.delay(100);
        }
      }
    }(rig.clk, a, vqs, &streams, local, lkey, remote, rng(), &outs);
    run_task(rig.clk, driver);

    if (shared->state == QpState::err) FAIL("shared queue broke in case " << case_i);
    for (int w = 0; w < n; w++) {
      const auto& o = outs[static_cast<std::size_t>(w)];
      if (o.timed_out || !o.post_ok || !o.all_ok)
        FAIL("stream " << w << " failed in case " << case_i);
      if (o.surfaced != signaled_ids(streams[static_cast<std::size_t>(w)]))
        FAIL("completion order broke in case " << case_i);
    }
    rig.clk.run_until_idle();
    for (auto* vq : vqs)
      if (!sweep_clean(a, vq)) FAIL("unclaimed completion in case " << case_i);
    if (shared->uncomp_cnt() != 0) FAIL("leaked send slots in case " << case_i);
  }
}

TEST_CASE("a lone virtual channel is indistinguishable from the raw device") {
  Config cfg;
  REQUIRE(cfg.set("vplane.dc_pool_size", "1") == Status::ok);
  PlaneRig rig(2, cfg);
  auto& a = rig.plane(0);
  auto& b = rig.plane(1);

  VirtualQP* server_vq = b.vqp_create(0);
  auto bind = b.qbind(server_vq, rig.svc(1));
  REQUIRE(run_task(rig.clk, bind) == Status::ok);
  const std::uint64_t local = rig.nic(0).mem().alloc(4096);
  const std::uint64_t remote = rig.nic(1).mem().alloc(4096);
  const std::uint32_t lkey = a.heap_mr().lkey;

  VirtualQP* probe = a.vqp_create(0);
  auto pc = a.qconnect(probe, rig.svc(1));
  REQUIRE(run_task(rig.clk, pc) == Status::ok);
  const DctRoute route{physical_of(rig.svc(1)), *probe->dct_meta};

  auto rawt = rig.nic(0).create_qp(QpKind::dc);
  PhysicalQp* raw = run_task(rig.clk, rawt);
  REQUIRE(raw);

  constexpr int kCases = 1000;
  for (int case_i = 0; case_i < kCases; case_i++) {
    std::mt19937_64 rng(0x0eac1e00u + static_cast<std::uint64_t>(case_i));
    // The raw device frees queue slots only when a later signaled completion
    // is polled, so comparable streams end with a signaled request.
    const Stream st =
        gen_stream(rng, 6, 30, 5, 60, true, static_cast<std::uint64_t>(case_i) * 1000);

    VirtualQP* vq = a.vqp_create(0);
    auto conn = a.qconnect(vq, rig.svc(1));
    if (run_task(rig.clk, conn) != Status::ok) FAIL("connect failed in case " << case_i);

    ExecOut virt_out;
    auto vt = virt_worker(rig.clk, a, vq, st, local, lkey, remote, 0, Ns{500'000'000}, nullptr,
                          &virt_out);
    run_task(rig.clk, vt);
    ExecOut raw_out;
    auto rt =
        raw_worker(rig.clk, rig.nic(0), raw, st, local, lkey, remote, route, Ns{500'000'000},
                   &raw_out);
    run_task(rig.clk, rt);

    if (virt_out.timed_out || raw_out.timed_out) FAIL("stream stuck in case " << case_i);
    if (!virt_out.post_ok || !raw_out.post_ok) FAIL("post failed in case " << case_i);
    if (!virt_out.all_ok || !raw_out.all_ok) FAIL("completion error in case " << case_i);
    if (virt_out.surfaced != raw_out.surfaced)
      FAIL("virtual and raw surfaced different sequences in case " << case_i);

    rig.clk.run_until_idle();
    if (!sweep_clean(a, vq)) FAIL("unclaimed completion in case " << case_i);
    if (vq->qp->uncomp_cnt() != 0 || raw->uncomp_cnt() != 0)
      FAIL("leaked send slots in case " << case_i);
  }
  CHECK(raw->state != QpState::err);
}

TEST_CASE("live migrations are invisible to the request stream") {
  Config cfg;
  REQUIRE(cfg.set("vplane.dc_pool_size", "4") == Status::ok);
  PlaneRig rig(3, cfg);
  auto& base = rig.plane(0);
  auto& moved = rig.plane(1);
  auto& srv = rig.plane(2);

  VirtualQP* server_vq = srv.vqp_create(0);
  auto bind = srv.qbind(server_vq, rig.svc(2));
  REQUIRE(run_task(rig.clk, bind) == Status::ok);
  const std::uint64_t local0 = rig.nic(0).mem().alloc(4096);
  const std::uint64_t local1 = rig.nic(1).mem().alloc(4096);
  const std::uint64_t remote = rig.nic(2).mem().alloc(4096);

  constexpr int kCases = 1000;
  for (int case_i = 0; case_i < kCases; case_i++) {
    std::mt19937_64 rng(0x7a45fe50u + static_cast<std::uint64_t>(case_i));
    const Stream st =
        gen_stream(rng, 6, 25, 4, 60, false, static_cast<std::uint64_t>(case_i) * 1000);

    VirtualQP* v0 = base.vqp_create(0);
    auto c0 = base.qconnect(v0, rig.svc(2));
    if (run_task(rig.clk, c0) != Status::ok) FAIL("connect failed in case " << case_i);
    VirtualQP* v1 = moved.vqp_create(0);
    auto c1 = moved.qconnect(v1, rig.svc(2));
    if (run_task(rig.clk, c1) != Status::ok) FAIL("connect failed in case " << case_i);

    ExecOut base_out;
    auto bt = virt_worker(rig.clk, base, v0, st, local0, base.heap_mr().lkey, remote, 0,
                          Ns{500'000'000}, nullptr, &base_out);
    run_task(rig.clk, bt);

    // 1..3 migrations at random burst boundaries, each hop to a pool member
    // different from wherever the channel sits at that point.
    const auto& dc = moved.pool(0).dc;
    std::vector<std::pair<std::size_t, PhysicalQp*>> transfers;
    const int n_tr = 1 + static_cast<int>(rng() % 3);
    for (int t = 0; t < n_tr; t++) transfers.emplace_back(rng() % st.size(), nullptr);
    std::sort(transfers.begin(), transfers.end(),
              [](const auto& x, const auto& y) { return x.first < y.first; });
    PhysicalQp* cur = v1->qp;
    for (auto& [at, dst] : transfers) {
      std::size_t k = rng() % dc.size();
      if (dc[k] == cur) k = (k + 1) % dc.size();
      dst = dc[k];
      cur = dst;
    }

    ExecOut moved_out;
    auto mt = virt_worker(rig.clk, moved, v1, st, local1, moved.heap_mr().lkey, remote, 0,
                          Ns{500'000'000}, &transfers, &moved_out);
    run_task(rig.clk, mt);

    if (base_out.timed_out || moved_out.timed_out) FAIL("stream stuck in case " << case_i);
    if (!moved_out.transfers_ok) FAIL("migration failed in case " << case_i);
    if (!base_out.all_ok || !moved_out.all_ok) FAIL("completion error in case " << case_i);
    if (base_out.surfaced != moved_out.surfaced)
      FAIL("migration changed the surfaced sequence in case " << case_i);

    rig.clk.run_until_idle();
    if (!sweep_clean(base, v0) || !sweep_clean(moved, v1))
      FAIL("unclaimed completion in case " << case_i);
  }
}
