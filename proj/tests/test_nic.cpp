#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "vrdma/nic/nic.hpp"

using namespace vrdma;
using namespace vrdma::sim;
using namespace vrdma::nic;

namespace {

struct Rig {
  SimClock clk;
  Config cfg;
  Fabric fabric;
  Nic a, b;

  explicit Rig(Config c = Config::preset("fig3b"))
      : cfg(std::move(c)),
        fabric(clk, cfg.get_i64("fabric.wire_latency_ns"), cfg.get_i64("fabric.meta_wire_latency_ns")),
        a(clk, fabric, cfg, make_node_id(0)),
        b(clk, fabric, cfg, make_node_id(1)) {}

  // Registers an MR over a fresh buffer on `n`, instantly (time advances).
  MemoryRegion quick_mr(Nic& n, std::int64_t len, bool rr = true, bool rw = true) {
    auto base = n.mem().alloc(len);
    auto t = n.register_mr(base, len, rr, rw);
    clk.run_until([&] { return t.done(); });
    return t.result();
  }

  // Creates an RC pair a<->b with given depths, fully configured.
  std::pair<PhysicalQp*, PhysicalQp*> rc_pair(int sq = 16, int cq = 16, int rq = 16) {
    auto ta = a.create_qp(QpKind::rc, sq, cq, rq);
    auto tb = b.create_qp(QpKind::rc, sq, cq, rq);
    clk.run_until([&] { return ta.done() && tb.done(); });
    PhysicalQp* qa = ta.result();
    PhysicalQp* qb = tb.result();
    auto ca = a.configure_qp(qa, b.id(), qb->qpn);
    auto cb = b.configure_qp(qb, a.id(), qa->qpn);
    clk.run_until([&] { return ca.done() && cb.done(); });
    REQUIRE(ca.result() == Status::ok);
    REQUIRE(cb.result() == Status::ok);
    return {qa, qb};
  }

  Completion wait_poll(Nic& n, PhysicalQp* qp) {
    std::optional<Completion> c;
    clk.run_until([&] {
      c = n.poll_cq(qp);
      return c.has_value();
    });
    REQUIRE(c.has_value());
    return *c;
  }
};

WorkRequest make_read(std::uint64_t wr_id, const MemoryRegion& local, const MemoryRegion& remote,
                      std::int64_t len, bool signaled = true) {
  WorkRequest wr;
  wr.op = Opcode::read;
  wr.wr_id = wr_id;
  wr.signaled = signaled;
  wr.laddr = local.base;
  wr.len = len;
  wr.lkey = local.lkey;
  wr.raddr = remote.base;
  wr.rkey = remote.rkey;
  return wr;
}

}  // namespace

TEST_CASE("create_qp walks INIT, charges the documented memory, takes 413us") {
  Rig r;
  Ns t0 = r.clk.now();
  auto t = r.a.create_qp(QpKind::rc, 292, 257, 0);
  r.clk.run_until([&] { return t.done(); });
  PhysicalQp* qp = t.result();
  REQUIRE(qp != nullptr);
  CHECK(qp->state == QpState::init);
  CHECK(r.clk.now() - t0 == 413000);
  CHECK(r.a.meter().of(MemKind::qp) == 162816);
  CHECK(r.a.meter().of(MemKind::qp) == r.a.costs().rc_qp_mem);

  auto t2 = r.a.create_qp(QpKind::dc, 292, 257, 0);
  r.clk.run_until([&] { return t2.done(); });
  CHECK(r.a.meter().of(MemKind::qp) == 162816 + 130000);
}

TEST_CASE("create_qp serializes on the device control engine") {
  Rig r;
  auto t1 = r.a.create_qp(QpKind::rc, 4, 4, 0);
  auto t2 = r.a.create_qp(QpKind::rc, 4, 4, 0);
  r.clk.run_until([&] { return t1.done(); });
  CHECK(r.clk.now() == 413000);
  CHECK_FALSE(t2.done());
  r.clk.run_until([&] { return t2.done(); });
  CHECK(r.clk.now() == 826000);
}

TEST_CASE("qp budget exhaustion returns null") {
  Config cfg = Config::preset("fig3b");
  cfg.set("nic.qp_budget", "2");
  Rig r(cfg);
  auto t1 = r.a.create_qp(QpKind::rc, 4, 4, 0);
  auto t2 = r.a.create_qp(QpKind::rc, 4, 4, 0);
  auto t3 = r.a.create_qp(QpKind::rc, 4, 4, 0);
  r.clk.run_until_idle();
  CHECK(t1.result() != nullptr);
  CHECK(t2.result() != nullptr);
  CHECK(t3.result() == nullptr);
}

TEST_CASE("configure_qp takes configure+handshake exactly and reaches RTS") {
  Rig r;
  auto t = r.a.create_qp(QpKind::rc, 4, 4, 4);
  r.clk.run_until([&] { return t.done(); });
  PhysicalQp* qp = t.result();
  Ns t0 = r.clk.now();
  auto c = r.a.configure_qp(qp, r.b.id(), 999);
  r.clk.run_until([&] { return c.done(); });
  CHECK(c.result() == Status::ok);
  CHECK(qp->state == QpState::rts);
  CHECK(*qp->peer == r.b.id());
  CHECK(r.clk.now() - t0 == 1587000 + 376800);
  CHECK(r.fabric.count(WireOp::ctrl) == 2);  // handshake round trip

  auto again = r.a.configure_qp(qp, r.b.id(), 999);
  r.clk.run_until([&] { return again.done(); });
  CHECK(again.result() == Status::bad_state);
  auto dc = r.a.create_qp(QpKind::dc, 4, 4, 4);
  r.clk.run_until([&] { return dc.done(); });
  auto cdc = r.a.configure_qp(dc.result(), r.b.id(), 1);
  r.clk.run_until([&] { return cdc.done(); });
  CHECK(cdc.result() == Status::invalid_op);
}

TEST_CASE("one signaled 8-byte READ completes in exactly 2150ns end to end") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);
  std::uint8_t secret[8] = {1, 2, 3, 4, 5, 6, 7, 8};
  r.b.mem().write(rmr.base, secret, 8);

  Ns t0 = r.clk.now();
  REQUIRE(r.a.post_send(qa, {make_read(77, lmr, rmr, 8)}) == Status::ok);
  auto c = r.wait_poll(r.a, qa);
  CHECK(r.clk.now() - t0 == 2150);  // 150 + 6 + 60 + 2*967
  CHECK(c.wr_id == 77);
  CHECK(c.status == WcStatus::ok);
  CHECK(c.byte_len == 8);
  std::uint8_t got[8];
  r.a.mem().read(lmr.base, got, 8);
  CHECK(std::memcmp(got, secret, 8) == 0);
  CHECK(r.fabric.count(WireOp::read) == 1);
  CHECK(qa->uncomp_cnt() == 0);
}

TEST_CASE("WRITE moves local bytes to the remote and costs the same as READ") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);
  std::uint8_t v[8] = {9, 9, 9, 9, 8, 8, 8, 8};
  r.a.mem().write(lmr.base, v, 8);
  WorkRequest wr = make_read(5, lmr, rmr, 8);
  wr.op = Opcode::write;
  Ns t0 = r.clk.now();
  REQUIRE(r.a.post_send(qa, {wr}) == Status::ok);
  auto c = r.wait_poll(r.a, qa);
  CHECK(c.status == WcStatus::ok);
  CHECK(r.clk.now() - t0 == 2150);
  std::uint8_t got[8];
  r.b.mem().read(rmr.base, got, 8);
  CHECK(std::memcmp(got, v, 8) == 0);
  CHECK(r.fabric.count(WireOp::write) == 1);
}

TEST_CASE("signaled completions poll in post order and free unsignaled slots") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 1024);
  auto rmr = r.quick_mr(r.b, 1024);
  std::vector<WorkRequest> wrs;
  for (int i = 0; i < 8; i++) wrs.push_back(make_read(100 + i, lmr, rmr, 8, (i % 4) == 3));
  REQUIRE(r.a.post_send(qa, wrs) == Status::ok);
  CHECK(qa->uncomp_cnt() == 8);
  auto c1 = r.wait_poll(r.a, qa);
  CHECK(c1.wr_id == 103);
  CHECK(qa->uncomp_cnt() == 4);  // 3 unsignaled + the signaled one freed together
  auto c2 = r.wait_poll(r.a, qa);
  CHECK(c2.wr_id == 107);
  CHECK(qa->uncomp_cnt() == 0);
  CHECK_FALSE(r.a.poll_cq(qa).has_value());
}

TEST_CASE("slot conservation: posted equals freed once the signaled tail is polled") {
  Rig r;
  auto [qa, qb] = r.rc_pair(32, 32, 0);
  auto lmr = r.quick_mr(r.a, 1024);
  auto rmr = r.quick_mr(r.b, 1024);
  Rng rng(7);
  int posted = 0;
  std::vector<WorkRequest> wrs;
  for (int i = 0; i < 20; i++) {
    wrs.push_back(make_read(i, lmr, rmr, 8, rng.chance(0.3)));
    posted++;
  }
  wrs.back().signaled = true;
  REQUIRE(r.a.post_send(qa, wrs) == Status::ok);
  CHECK(qa->uncomp_cnt() == posted);
  int freed = 0;
  while (qa->uncomp_cnt() > 0) {
    int before = qa->uncomp_cnt();
    r.wait_poll(r.a, qa);
    freed += before - qa->uncomp_cnt();
  }
  CHECK(freed == posted);
}

TEST_CASE("posting past sq depth moves the QP to ERR and flushes with FLUSH_ERR") {
  Rig r;
  auto [qa, qb] = r.rc_pair(4, 16, 0);
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);
  std::vector<WorkRequest> wrs;
  for (int i = 0; i < 5; i++) wrs.push_back(make_read(i, lmr, rmr, 8, false));
  CHECK(r.a.post_send(qa, wrs) == Status::overflow);
  CHECK(qa->state == QpState::err);
  int flushed = 0;
  while (auto c = r.a.poll_cq(qa)) {
    CHECK(c->status == WcStatus::flush_err);
    flushed++;
  }
  CHECK(flushed == 4);
  CHECK(qa->uncomp_cnt() == 0);
  // Subsequent posts are rejected and flushed.
  CHECK(r.a.post_send(qa, {make_read(9, lmr, rmr, 8)}) == Status::bad_state);
  auto c = r.a.poll_cq(qa);
  REQUIRE(c.has_value());
  CHECK(c->status == WcStatus::flush_err);
  CHECK(c->wr_id == 9);
}

TEST_CASE("malformed requests poison the QP") {
  Rig r;
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);
  SUBCASE("missing remote on READ") {
    auto [qa, qb] = r.rc_pair();
    auto wr = make_read(1, lmr, rmr, 8);
    wr.raddr.reset();
    CHECK(r.a.post_send(qa, {wr}) == Status::invalid_arg);
    CHECK(qa->state == QpState::err);
  }
  SUBCASE("bad lkey") {
    auto [qa, qb] = r.rc_pair();
    auto wr = make_read(1, lmr, rmr, 8);
    wr.lkey = 0xdead;
    CHECK(r.a.post_send(qa, {wr}) == Status::invalid_mr);
    CHECK(qa->state == QpState::err);
  }
  SUBCASE("length crossing the local region end") {
    auto [qa, qb] = r.rc_pair();
    auto wr = make_read(1, lmr, rmr, 65);
    CHECK(r.a.post_send(qa, {wr}) == Status::invalid_mr);
    CHECK(qa->state == QpState::err);
  }
  SUBCASE("negative length") {
    auto [qa, qb] = r.rc_pair();
    auto wr = make_read(1, lmr, rmr, -1);
    CHECK(r.a.post_send(qa, {wr}) == Status::invalid_arg);
    CHECK(qa->state == QpState::err);
  }
  SUBCASE("earlier requests in the same list get flushed") {
    auto [qa, qb] = r.rc_pair();
    auto good = make_read(1, lmr, rmr, 8);
    auto bad = make_read(2, lmr, rmr, 8);
    bad.lkey = 0xdead;
    CHECK(r.a.post_send(qa, {good, bad}) == Status::invalid_mr);
    CHECK(qa->state == QpState::err);
    auto c = r.a.poll_cq(qa);
    REQUIRE(c.has_value());
    CHECK(c->wr_id == 1);
    CHECK(c->status == WcStatus::flush_err);
  }
}

TEST_CASE("READ crossing the remote region end completes REM_ACCESS_ERR and breaks the RC channel") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 128);
  auto rmr = r.quick_mr(r.b, 64);
  auto wr = make_read(3, lmr, rmr, 65);
  REQUIRE(r.a.post_send(qa, {wr}) == Status::ok);
  auto c = r.wait_poll(r.a, qa);
  CHECK(c.status == WcStatus::rem_access_err);
  CHECK(c.wr_id == 3);
  CHECK(qa->state == QpState::err);
}

TEST_CASE("remote permission flags are enforced") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64, true, false);  // no remote write
  auto wr = make_read(4, lmr, rmr, 8);
  wr.op = Opcode::write;
  REQUIRE(r.a.post_send(qa, {wr}) == Status::ok);
  auto c = r.wait_poll(r.a, qa);
  CHECK(c.status == WcStatus::rem_access_err);
}

TEST_CASE("deregistered MR fails remote access immediately") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);
  CHECK(r.b.deregister_mr(rmr.rkey) == Status::ok);
  REQUIRE(r.a.post_send(qa, {make_read(5, lmr, rmr, 8)}) == Status::ok);
  auto c = r.wait_poll(r.a, qa);
  CHECK(c.status == WcStatus::rem_access_err);
}

TEST_CASE("DC requests route by target metadata and pay the extra hop cost") {
  Rig r;
  auto key = r.b.create_dct_target(0xfeed);
  auto t = r.a.create_qp(QpKind::dc, 16, 16, 0);
  r.clk.run_until([&] { return t.done(); });
  PhysicalQp* qp = t.result();
  CHECK(qp->state == QpState::init);  // DC initiators post from INIT
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);

  auto wr = make_read(11, lmr, rmr, 8);
  wr.route = DctRoute{r.b.id(), key};
  Ns t0 = r.clk.now();
  REQUIRE(r.a.post_send(qp, {wr}) == Status::ok);
  auto c = r.wait_poll(r.a, qp);
  CHECK(c.status == WcStatus::ok);
  // First request pays reconnect: 150+90+1000 + 6 + 60 + 2*967.
  CHECK(r.clk.now() - t0 == 2150 + 90 + 1000);

  // Same target again: connection is kept, reconnect not charged.
  t0 = r.clk.now();
  wr.wr_id = 12;
  REQUIRE(r.a.post_send(qp, {wr}) == Status::ok);
  c = r.wait_poll(r.a, qp);
  CHECK(r.clk.now() - t0 == 2150 + 90);
}

TEST_CASE("alternating DC peers pay reconnect on every request") {
  Config cfg = Config::preset("fig3b");
  Rig r(cfg);
  Nic c(r.clk, r.fabric, cfg, make_node_id(2));
  auto kb = r.b.create_dct_target(1);
  auto kc = c.create_dct_target(2);
  auto t = r.a.create_qp(QpKind::dc, 16, 16, 0);
  r.clk.run_until([&] { return t.done(); });
  PhysicalQp* qp = t.result();
  auto lmr = r.quick_mr(r.a, 64);
  auto rb = r.quick_mr(r.b, 64);
  auto rc_ = r.quick_mr(c, 64);

  auto to_b = make_read(1, lmr, rb, 8, false);
  to_b.route = DctRoute{r.b.id(), kb};
  auto to_c = make_read(2, lmr, rc_, 8, true);
  to_c.route = DctRoute{c.id(), kc};
  // b,c,b,c: four requests, four reconnects.
  auto b2 = to_b;
  b2.wr_id = 3;
  b2.signaled = false;
  auto c2 = to_c;
  c2.wr_id = 4;
  c2.signaled = true;
  Ns t0 = r.clk.now();
  REQUIRE(r.a.post_send(qp, {to_b, to_c, b2, c2}) == Status::ok);
  r.clk.run_until_idle();
  // tx engine serialized: 4 * (150+90+1000) busy plus trailing 6+60+2*967 for
  // the last request's flight.
  std::optional<Completion> comp;
  int polled = 0;
  while ((comp = r.a.poll_cq(qp))) polled++;
  CHECK(polled == 2);
  CHECK(r.clk.now() - t0 == 4 * 1240 + 6 + 60 + 2 * 967);
}

TEST_CASE("wrong dct key is rejected remotely without breaking the DC QP") {
  Rig r;
  auto key = r.b.create_dct_target(0xfeed);
  auto t = r.a.create_qp(QpKind::dc, 16, 16, 0);
  r.clk.run_until([&] { return t.done(); });
  PhysicalQp* qp = t.result();
  auto lmr = r.quick_mr(r.a, 64);
  auto rmr = r.quick_mr(r.b, 64);
  auto wr = make_read(1, lmr, rmr, 8);
  wr.route = DctRoute{r.b.id(), DctTarget{key.dct_num, key.dct_key + 1}};
  REQUIRE(r.a.post_send(qp, {wr}) == Status::ok);
  auto c = r.wait_poll(r.a, qp);
  CHECK(c.status == WcStatus::rem_access_err);
  CHECK(qp->state != QpState::err);

  // The QP remains usable with the right key.
  wr.wr_id = 2;
  wr.route = DctRoute{r.b.id(), key};
  REQUIRE(r.a.post_send(qp, {wr}) == Status::ok);
  c = r.wait_poll(r.a, qp);
  CHECK(c.status == WcStatus::ok);
}

TEST_CASE("SEND/RECV delivers payload into the posted buffer in FIFO order") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 256);
  auto bmr = r.quick_mr(r.b, 256);
  REQUIRE(r.b.post_recv(qb, RecvBuffer{501, bmr.base, 64, bmr.lkey}) == Status::ok);
  REQUIRE(r.b.post_recv(qb, RecvBuffer{502, bmr.base + 64, 64, bmr.lkey}) == Status::ok);

  std::uint8_t m1[3] = {0xaa, 0xbb, 0xcc};
  r.a.mem().write(lmr.base, m1, 3);
  WorkRequest s1;
  s1.op = Opcode::send;
  s1.wr_id = 601;
  s1.signaled = true;
  s1.laddr = lmr.base;
  s1.len = 3;
  s1.lkey = lmr.lkey;
  REQUIRE(r.a.post_send(qa, {s1}) == Status::ok);
  auto sc = r.wait_poll(r.a, qa);
  CHECK(sc.status == WcStatus::ok);

  auto rc = r.b.poll_cq(qb);
  REQUIRE(rc.has_value());
  CHECK(rc->is_recv);
  CHECK(rc->wr_id == 501);
  CHECK(rc->byte_len == 3);
  CHECK(rc->recv_addr == bmr.base);
  std::uint8_t got[3];
  r.b.mem().read(bmr.base, got, 3);
  CHECK(std::memcmp(got, m1, 3) == 0);
  CHECK(r.fabric.count(WireOp::send) == 1);
}

TEST_CASE("SEND with no posted receive buffer fails the sender") {
  Rig r;
  auto [qa, qb] = r.rc_pair();
  auto lmr = r.quick_mr(r.a, 64);
  WorkRequest s;
  s.op = Opcode::send;
  s.wr_id = 1;
  s.signaled = true;
  s.laddr = lmr.base;
  s.len = 8;
  s.lkey = lmr.lkey;
  REQUIRE(r.a.post_send(qa, {s}) == Status::ok);
  auto c = r.wait_poll(r.a, qa);
  CHECK(c.status == WcStatus::overflow_err);
  CHECK(qa->state == QpState::err);
}

TEST_CASE("completion queue overrun is a hard error") {
  Rig r;
  auto [qa, qb] = r.rc_pair(16, 2, 0);  // cq of 2
  auto lmr = r.quick_mr(r.a, 1024);
  auto rmr = r.quick_mr(r.b, 1024);
  std::vector<WorkRequest> wrs;
  for (int i = 0; i < 4; i++) wrs.push_back(make_read(i, lmr, rmr, 8, true));
  REQUIRE(r.a.post_send(qa, wrs) == Status::ok);
  r.clk.run_until_idle();
  CHECK(qa->state == QpState::err);
}

TEST_CASE("dct target serialization is 12 bytes, little endian") {
  DctTarget t{0x01020304, 0x1122334455667788ull};
  std::uint8_t buf[kDctTargetBytes];
  encode_dct_target(t, buf);
  const std::uint8_t want[12] = {0x04, 0x03, 0x02, 0x01, 0x88, 0x77, 0x66,
                                 0x55, 0x44, 0x33, 0x22, 0x11};
  CHECK(std::memcmp(buf, want, 12) == 0);
  auto back = decode_dct_target(buf);
  CHECK(back == t);
}

TEST_CASE("register_mr costs 1400ns flat and zero length is rejected") {
  Rig r;
  Ns t0 = r.clk.now();
  auto mr = r.quick_mr(r.a, 4 << 20);
  CHECK(r.clk.now() - t0 == 1400);
  CHECK(mr.valid);
  auto t = r.a.register_mr(0x5000, 0, true, true);
  r.clk.run_until([&] { return t.done(); });
  CHECK_FALSE(t.result().valid);
}

TEST_CASE("destroy_qp refunds the memory meter") {
  Rig r;
  auto t = r.a.create_qp(QpKind::rc, 292, 257, 0);
  r.clk.run_until([&] { return t.done(); });
  CHECK(r.a.meter().of(MemKind::qp) == 162816);
  CHECK(r.a.qps_live() == 1);
  r.a.destroy_qp(t.result());
  CHECK(r.a.meter().of(MemKind::qp) == 0);
  CHECK(r.a.qps_live() == 0);
}

TEST_CASE("ctrl datagrams are tapped and delivered after one hop") {
  Rig r;
  Ns t0 = r.clk.now();
  Ns delivered_at = -1;
  r.a.send_ctrl(r.b.id(), 32, [&](Ns t) { delivered_at = t; });
  r.clk.run_until_idle();
  CHECK(delivered_at == t0 + 967);
  CHECK(r.fabric.count(WireOp::ctrl) == 1);
  CHECK(r.fabric.pair_count(r.a.id(), r.b.id(), WireOp::ctrl) == 1);
}

TEST_CASE("init_context serializes its device share across processes on a node") {
  Rig r;
  // Two simulated processes on node a start together.
  auto t1 = r.a.init_context();
  auto t2 = r.a.init_context();
  r.clk.run_until([&] { return t1.done(); });
  CHECK(r.clk.now() == 13323200);
  r.clk.run_until([&] { return t2.done(); });
  // Second process: engine share queued behind the first.
  CHECK(r.clk.now() == 3500000 + 13323200);
}
