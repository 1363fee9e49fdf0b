#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <memory>
#include <vector>

#include "plane_rig.hpp"
#include "vrdma/bgd/bgd.hpp"

using namespace vrdma;
using namespace vrdma::sim;
using namespace vrdma::nic;
using namespace vrdma::vplane;
using namespace rigtest;

namespace {

Task<Ns> timed_sync_read(SimClock& clk, NodePlane& pl, VirtualQP* vq, std::uint64_t laddr,
                         std::uint32_t lkey, std::uint64_t raddr) {
  const Ns t0 = clk.now();
  const Status st = co_await pl.post_send_virtualized(vq, {read_wr(1, laddr, lkey, raddr,
                                                                   kHeapRkey, 8)});
  CHECK(st == Status::ok);
  while (true) {
    auto c = pl.poll_cq_virtualized(vq);
    if (c) {
      CHECK(c->status == WcStatus::ok);
      break;
    }
    co_await clk.delay(100);
  }
  co_return clk.now() - t0;
}

}  // namespace

TEST_CASE("request windows tumble and counts reset with them") {
  Config cfg;
  REQUIRE(cfg.set("bgd.window_ns", "1000000") == Status::ok);
  REQUIRE(cfg.set("bgd.threshold", "100") == Status::ok);
  PlaneRig rig(1, cfg);
  bgd::Promoter prom(rig.clk, rig.plane(0), rig.cfg);
  const NodeId peer = rig.svc(0);

  CHECK(prom.window_count(0, peer) == 0);
  for (int i = 0; i < 3; i++) prom.record(0, peer);
  CHECK(prom.window_count(0, peer) == 3);
  CHECK(prom.promotions_started() == 0);

  auto nap = sleep_task(rig.clk, 1000001);
  run_task(rig.clk, nap);
  CHECK(prom.window_count(0, peer) == 0);  // window expired
  prom.record(0, peer);
  CHECK(prom.window_count(0, peer) == 1);  // fresh window, not 4
  CHECK(prom.promotions_started() == 0);
}

TEST_CASE("the threshold boundary is exact: one request short never promotes") {
  Config cfg;
  REQUIRE(cfg.set("bgd.threshold", "64") == Status::ok);
  PlaneRig rig(2, cfg);
  bgd::Promoter prom(rig.clk, rig.plane(0), rig.cfg);
  const NodeId peer = rig.svc(1);

  for (int i = 0; i < 63; i++) prom.record(0, peer);
  rig.clk.run_until_idle();
  CHECK(prom.promotions_started() == 0);
  CHECK(rig.plane(0).pool(0).rc_count() == 0);

  prom.record(0, peer);  // the 64th
  CHECK(prom.promotions_started() == 1);
  rig.clk.run_until_idle();
  CHECK(prom.promotions_done() == 1);
  CHECK(rig.plane(0).pool(0).rc.count(peer) == 1);
  REQUIRE(rig.plane(0).pool(0).rc[peer].size() == 1);
  CHECK(rig.plane(0).pool(0).rc[peer][0]->kind == QpKind::rc);
  CHECK(rig.plane(0).pool(0).rc[peer][0]->state == QpState::rts);

  // Keeping up the traffic does not stack a second channel.
  for (int i = 0; i < 200; i++) prom.record(0, peer);
  rig.clk.run_until_idle();
  CHECK(prom.promotions_started() == 1);
}

TEST_CASE("an existing pooled channel suppresses promotion") {
  Config cfg;
  REQUIRE(cfg.set("bgd.threshold", "2") == Status::ok);
  PlaneRig rig(2, cfg);
  auto& a = rig.plane(0);
  bgd::Promoter prom(rig.clk, a, rig.cfg);
  const NodeId peer = rig.svc(1);

  auto qpa = rig.nic(0).create_qp(QpKind::rc);
  auto qpb = rig.nic(1).create_qp(QpKind::rc);
  PhysicalQp* ra = run_task(rig.clk, qpa);
  PhysicalQp* rb = run_task(rig.clk, qpb);
  REQUIRE(ra);
  REQUIRE(rb);
  auto ca = rig.nic(0).configure_qp(ra, rig.nic(1).id(), rb->qpn);
  auto cb = rig.nic(1).configure_qp(rb, rig.nic(0).id(), ra->qpn);
  REQUIRE(run_task(rig.clk, ca) == Status::ok);
  REQUIRE(run_task(rig.clk, cb) == Status::ok);
  a.pool(0).rc[peer].push_back(ra);

  for (int i = 0; i < 10; i++) prom.record(0, peer);
  rig.clk.run_until_idle();
  CHECK(prom.promotions_started() == 0);
  CHECK(a.pool(0).rc[peer].size() == 1);
}

TEST_CASE("hot paths promote in the background and get faster, not slower") {
  Config cfg = Config::preset("fig3b");
  REQUIRE(cfg.set("bgd.threshold", "4") == Status::ok);
  PlaneRig rig(2, cfg);
  auto& a = rig.plane(0);
  auto& b = rig.plane(1);
  bgd::Promoter prom(rig.clk, a, rig.cfg);

  VirtualQP* server_vq = b.vqp_create(0);
  auto bind = b.qbind(server_vq, rig.svc(1));
  REQUIRE(run_task(rig.clk, bind) == Status::ok);
  VirtualQP* vq = a.vqp_create(0);
  auto conn = a.qconnect(vq, rig.svc(1));
  REQUIRE(run_task(rig.clk, conn) == Status::ok);
  CHECK(vq->qp->kind == QpKind::dc);

  const std::uint64_t local = rig.nic(0).mem().alloc(64);
  const std::uint64_t remote = rig.nic(1).mem().alloc(64);
  const std::uint32_t lkey = a.heap_mr().lkey;

  // Op 1 absorbs the one-time costs (route switch, region fetch).
  auto w = timed_sync_read(rig.clk, a, vq, local, lkey, remote);
  run_task(rig.clk, w);

  // Ops 2..4 run at the multiplexed rate; op 4 trips the threshold, and the
  // caller still pays nothing extra on that op.
  for (int i = 2; i <= 4; i++) {
    auto t = timed_sync_read(rig.clk, a, vq, local, lkey, remote);
    CHECK(run_task(rig.clk, t) == 3300);
  }
  CHECK(prom.promotions_started() == 1);

  rig.clk.run_until_idle();  // background handshake + migration
  CHECK(prom.promotions_done() == 1);
  REQUIRE(vq->qp->kind == QpKind::rc);  // migrated off the shared pool

  // The dedicated channel drops the routing surcharge.
  auto t5 = timed_sync_read(rig.clk, a, vq, local, lkey, remote);
  CHECK(run_task(rig.clk, t5) == 3200);
}

TEST_CASE("over capacity, the coldest channel is recycled and can come back") {
  Config cfg;
  REQUIRE(cfg.set("bgd.threshold", "2") == Status::ok);
  REQUIRE(cfg.set("bgd.rc_capacity", "2") == Status::ok);
  PlaneRig rig(4, cfg);
  auto& a = rig.plane(0);
  bgd::Promoter prom(rig.clk, a, rig.cfg);

  // Publish three services and connect one vq to each.
  VirtualQP* vqs[3];
  std::uint64_t remotes[3];
  const std::uint64_t local = rig.nic(0).mem().alloc(64);
  const std::uint32_t lkey = a.heap_mr().lkey;
  for (int i = 0; i < 3; i++) {
    auto& peer_plane = rig.plane(i + 1);
    VirtualQP* sv = peer_plane.vqp_create(0);
    auto bind = peer_plane.qbind(sv, rig.svc(i + 1));
    REQUIRE(run_task(rig.clk, bind) == Status::ok);
    vqs[i] = a.vqp_create(0);
    auto conn = a.qconnect(vqs[i], rig.svc(i + 1));
    REQUIRE(run_task(rig.clk, conn) == Status::ok);
    remotes[i] = rig.nic(i + 1).mem().alloc(64);
  }
  auto ops = [&](int i, int n) {
    for (int k = 0; k < n; k++) {
      auto t = timed_sync_read(rig.clk, a, vqs[i], local, lkey, remotes[i]);
      run_task(rig.clk, t);
    }
    rig.clk.run_until_idle();
  };

  const std::int64_t qp_bytes_idle = rig.nic(1).meter().of(MemKind::qp);

  ops(0, 2);  // promote peer 1
  ops(1, 2);  // promote peer 2: at capacity
  CHECK(prom.promotions_done() == 2);
  CHECK(a.pool(0).rc_count() == 2);
  CHECK(prom.reclaims() == 0);

  ops(0, 1);  // peer 1 stays warm, peer 2 is now the coldest

  ops(2, 2);  // promote peer 3: over capacity, peer 2's channel is recycled
  CHECK(prom.promotions_done() == 3);
  CHECK(prom.reclaims() == 1);
  CHECK(a.pool(0).rc_count() == 2);
  CHECK(a.pool(0).rc.count(rig.svc(1)) == 1);
  CHECK(a.pool(0).rc.count(rig.svc(2)) == 0);
  CHECK(a.pool(0).rc.count(rig.svc(3)) == 1);
  CHECK(vqs[0]->qp->kind == QpKind::rc);
  CHECK(vqs[1]->qp->kind == QpKind::dc);  // migrated back to the shared pool
  CHECK(vqs[2]->qp->kind == QpKind::rc);

  // The peer side tore down its passive half: device memory returns to the
  // post-boot level.
  CHECK(rig.nic(2).meter().of(MemKind::qp) == qp_bytes_idle);

  // The recycled peer is not blacklisted: more traffic promotes it again,
  // evicting the coldest of the survivors (peer 1).
  ops(1, 2);
  CHECK(prom.promotions_done() == 4);
  CHECK(prom.reclaims() == 2);
  CHECK(a.pool(0).rc.count(rig.svc(1)) == 0);
  CHECK(a.pool(0).rc.count(rig.svc(2)) == 1);
  CHECK(a.pool(0).rc.count(rig.svc(3)) == 1);
  CHECK(vqs[0]->qp->kind == QpKind::dc);
  CHECK(vqs[1]->qp->kind == QpKind::rc);

  // Traffic on every vq still completes after all the shuffling.
  for (int i = 0; i < 3; i++) {
    auto t = timed_sync_read(rig.clk, a, vqs[i], local, lkey, remotes[i]);
    run_task(rig.clk, t);
  }
}
