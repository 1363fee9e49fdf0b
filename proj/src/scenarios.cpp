#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>

#include "vrdma/bench/bench.hpp"
#include "vrdma/bench/world.hpp"
#include "vrdma/bgd/bgd.hpp"

namespace vrdma::bench {
namespace {

using sim::Ns;
using sim::Task;

void run_tasks(sim::SimClock& clk, std::vector<Task<>>& ts) {
  clk.run_until([&] {
    for (auto& t : ts)
      if (!t.done()) return false;
    return true;
  });
}

template <typename T>
T run_one(sim::SimClock& clk, Task<T>& t) {
  clk.run_until([&] { return t.done(); });
  if constexpr (!std::is_void_v<T>) return t.result();
}

std::vector<Baseline> baselines_of(const ScenarioConfig& sc) {
  if (sc.baseline) return {*sc.baseline};
  return {Baseline::krcore, Baseline::verbs, Baseline::lite};
}

// Fabric tap snapshot; every wire_ops cell is a delta against one of these,
// so boot and setup traffic never leaks into a report.
struct Window {
  std::uint64_t ops0;
  explicit Window(sim::Fabric& f) : ops0(f.count_all()) {}
  std::int64_t ops(sim::Fabric& f) const { return static_cast<std::int64_t>(f.count_all() - ops0); }
};

MetricRow make_row(const ScenarioConfig& sc, Baseline b, std::int64_t clients,
                   std::int64_t payload, const std::vector<std::int64_t>& samples,
                   std::int64_t throughput, std::int64_t wire_ops, std::int64_t mem_bytes) {
  MetricRow r;
  r.scenario = sc.scenario;
  r.baseline = to_string(b);
  r.clients = clients;
  r.payload = payload;
  r.p50_ns = nearest_rank(samples, 0.50);
  r.p99_ns = nearest_rank(samples, 0.99);
  r.p999_ns = nearest_rank(samples, 0.999);
  r.throughput_per_s = throughput;
  r.wire_ops = wire_ops;
  r.mem_bytes = mem_bytes;
  return r;
}

std::int64_t per_second(std::int64_t count, Ns elapsed) {
  if (elapsed <= 0) return 0;
  return static_cast<std::int64_t>(static_cast<double>(count) * 1e9 /
                                   static_cast<double>(elapsed));
}

// ---- shared drivers ------------------------------------------------------

vplane::VWorkRequest vread(std::uint64_t wr_id, std::uint64_t laddr, std::uint32_t lkey,
                           std::uint64_t raddr, std::uint32_t rkey, std::int64_t len) {
  vplane::VWorkRequest w;
  w.op = nic::Opcode::read;
  w.wr_id = wr_id;
  w.signaled = true;
  w.laddr = laddr;
  w.len = len;
  w.lkey = lkey;
  w.raddr = raddr;
  w.rkey = rkey;
  return w;
}

nic::WorkRequest rread(std::uint64_t wr_id, std::uint64_t laddr, std::uint32_t lkey,
                       std::uint64_t raddr, std::uint32_t rkey, std::int64_t len) {
  nic::WorkRequest w;
  w.op = nic::Opcode::read;
  w.wr_id = wr_id;
  w.signaled = true;
  w.laddr = laddr;
  w.len = len;
  w.lkey = lkey;
  w.raddr = raddr;
  w.rkey = rkey;
  return w;
}

// One signaled request run to completion; the poll loop models the caller
// spinning on its completion queue.
Task<Ns> plane_sync_op(sim::SimClock* clk, vplane::NodePlane* pl, vplane::VirtualQP* vq,
                       vplane::VWorkRequest wr, Ns grid) {
  const Ns t0 = clk->now();
  (void)co_await pl->post_send_virtualized(vq, {wr});
  for (;;) {
    if (pl->poll_cq_virtualized(vq)) co_return clk->now() - t0;
    co_await clk->delay(grid);
  }
}

// Raw device counterpart; pre_ns models a kernel crossing when the driver is
// not mapped into the caller (zero for user-space verbs).
Task<Ns> raw_sync_op(sim::SimClock* clk, nic::Nic* n, nic::PhysicalQp* qp, nic::WorkRequest wr,
                     Ns grid, Ns pre_ns) {
  const Ns t0 = clk->now();
  if (pre_ns > 0) co_await clk->delay(pre_ns);
  (void)n->post_send(qp, {wr});
  for (;;) {
    if (n->poll_cq(qp)) co_return clk->now() - t0;
    co_await clk->delay(grid);
  }
}

// ---- client/server connection ladder -------------------------------------

// Passive-half progress, observed by the active side the way a connection
// manager rendezvous exposes it.
struct AcceptState {
  Ns create_done = -1;
  Ns rtr_done = -1;
  nic::PhysicalQp* qp = nullptr;
};

// Accept daemon: one manager thread per server creates the passive half and
// walks it to RTR; both steps serialize on the server control engine, which
// caps the accept rate.
Task<> accept_one(sim::SimClock* clk, sim::Fabric* fab, nic::Nic* srv, sim::NodeId client,
                  Ns rtr_ns, Ns wire_in, AcceptState* st) {
  co_await clk->delay(wire_in);
  auto* qp = co_await srv->create_qp(nic::QpKind::rc);
  st->qp = qp;
  st->create_done = clk->now();
  if (qp) {
    const Ns done = srv->ctrl_engine().acquire(clk->now(), rtr_ns);
    if (done > clk->now()) co_await clk->delay(done - clk->now());
  }
  st->rtr_done = clk->now();
  fab->record(sim::WireOp::ctrl, srv->id(), client, 64);
}

// Active half. verbs pays driver context bring-up and the full configure
// with its datagram handshake; the lite model skips both (kernel context is
// already resident) and interleaves its RTR/RTS with the passive half.
// acc == nullptr is peer-to-peer rendezvous: nothing to wait on.
Task<> active_connect(sim::SimClock* clk, sim::Fabric* fab, nic::Nic* cli, sim::NodeId srv,
                      Baseline b, Ns rtr_ns, Ns rts_ns, bool init_each, AcceptState* acc,
                      std::int64_t* lat, Ns* done_at, nic::PhysicalQp** out) {
  const Ns t0 = clk->now();
  fab->record(sim::WireOp::ctrl, cli->id(), srv, 64);
  if (b == Baseline::verbs && init_each) co_await cli->init_context();
  auto* qp = co_await cli->create_qp(nic::QpKind::rc);
  if (qp) {
    if (b == Baseline::verbs) {
      while (acc && acc->rtr_done < 0) co_await clk->delay(100);
      (void)co_await cli->configure_qp(qp, srv, acc && acc->qp ? acc->qp->qpn : 1);
    } else {
      while (acc && acc->create_done < 0) co_await clk->delay(100);
      co_await clk->delay(rtr_ns);
      while (acc && acc->rtr_done < 0) co_await clk->delay(100);
      co_await clk->delay(rts_ns);
      (void)cli->configure_qp_boot(qp, srv, acc && acc->qp ? acc->qp->qpn : 1);
    }
  }
  if (lat) *lat = clk->now() - t0;
  if (done_at) *done_at = clk->now();
  if (out) *out = qp;
}

Task<> kr_connect_worker(sim::SimClock* clk, vplane::NodePlane* pl, sim::NodeId target,
                         std::int64_t* lat, Ns* done_at) {
  auto* vq = pl->vqp_create(0);
  const Ns t0 = clk->now();
  (void)co_await pl->qconnect(vq, target);
  if (lat) *lat = clk->now() - t0;
  if (done_at) *done_at = clk->now();
}

// ---- world setup helpers --------------------------------------------------

void bind_service(World& w, int node) {
  auto* vq = w.plane(node).vqp_create(0);
  auto t = w.plane(node).qbind(vq, w.svc(node));
  (void)run_one(w.clk(), t);
}

struct DataTarget {
  std::uint64_t addr = 0;
  nic::MemoryRegion mr;
};

// Registers a readable region through the plane so remote peers can
// validate the key against the meta service.
DataTarget plane_target(World& w, int node, std::int64_t bytes) {
  DataTarget t;
  t.addr = w.nic(node).mem().alloc(bytes);
  auto reg = w.plane(node).register_mr_virtualized(t.addr, bytes, true, true);
  t.mr = run_one(w.clk(), reg);
  return t;
}

DataTarget raw_target(World& w, int node, std::int64_t bytes) {
  DataTarget t;
  t.addr = w.nic(node).mem().alloc(bytes);
  t.mr = w.nic(node).register_mr_boot(t.addr, bytes, true, true);
  return t;
}

// Reliable channel pair wired outside any measurement window; the client
// half lands in the plane's promoted-channel pool when a pool key is given.
nic::PhysicalQp* boot_rc_pair(World& w, int cli, int srv,
                              const std::optional<sim::NodeId>& pool_key) {
  auto ta = w.nic(cli).create_qp(nic::QpKind::rc);
  nic::PhysicalQp* a = run_one(w.clk(), ta);
  auto tb = w.nic(srv).create_qp(nic::QpKind::rc);
  nic::PhysicalQp* b = run_one(w.clk(), tb);
  if (!a || !b) return nullptr;
  (void)w.nic(cli).configure_qp_boot(a, w.nic(srv).id(), b->qpn);
  (void)w.nic(srv).configure_qp_boot(b, w.nic(cli).id(), a->qpn);
  if (pool_key) w.plane(cli).pool(0).rc[*pool_key].push_back(a);
  return a;
}

// ---- single_connect --------------------------------------------------------

MetricRow single_connect_one(const ScenarioConfig& sc, const sim::Config& cfg, Baseline b) {
  const int n = sc.clients > 0 ? sc.clients : 1;
  World w(cfg);
  std::vector<std::int64_t> lat(static_cast<std::size_t>(n));
  std::vector<Ns> done(static_cast<std::size_t>(n));
  std::vector<int> client_nodes;
  Ns t0 = 0;

  if (b == Baseline::krcore) {
    const int srv = w.add_plane_node(1);
    for (int i = 0; i < n; i++) client_nodes.push_back(w.add_plane_node(1));
    w.boot_planes();
    bind_service(w, srv);
    Window win(w.fabric());
    t0 = w.clk().now();
    std::vector<Task<>> ts;
    for (int i = 0; i < n; i++)
      ts.push_back(kr_connect_worker(&w.clk(), &w.plane(client_nodes[static_cast<std::size_t>(i)]),
                                     w.svc(srv), &lat[static_cast<std::size_t>(i)],
                                     &done[static_cast<std::size_t>(i)]));
    run_tasks(w.clk(), ts);
    const Ns makespan = *std::max_element(done.begin(), done.end()) - t0;
    return make_row(sc, b, n, 0, lat, per_second(n, makespan), win.ops(w.fabric()),
                    w.mem_bytes(client_nodes));
  }

  const int srv = w.add_raw_node();
  for (int i = 0; i < n; i++) client_nodes.push_back(w.add_raw_node());
  {
    // The server machine is already up; only per-connection work is measured.
    auto init = w.nic(srv).init_context();
    run_one(w.clk(), init);
  }
  const Ns rtr = cfg.get_i64("bench.accept_rtr_ns");
  const Ns rts = cfg.get_i64("nic.configure_qp_ns") - rtr;
  Window win(w.fabric());
  t0 = w.clk().now();
  std::vector<AcceptState> acc(static_cast<std::size_t>(n));
  std::vector<Task<>> ts;
  for (int i = 0; i < n; i++) {
    auto& cli = w.nic(client_nodes[static_cast<std::size_t>(i)]);
    ts.push_back(accept_one(&w.clk(), &w.fabric(), &w.nic(srv), cli.id(), rtr,
                            w.fabric().latency(cli.id(), w.nic(srv).id()),
                            &acc[static_cast<std::size_t>(i)]));
    ts.push_back(active_connect(&w.clk(), &w.fabric(), &cli, w.nic(srv).id(), b, rtr, rts,
                                /*init_each=*/true, &acc[static_cast<std::size_t>(i)],
                                &lat[static_cast<std::size_t>(i)],
                                &done[static_cast<std::size_t>(i)], nullptr));
  }
  run_tasks(w.clk(), ts);
  const Ns makespan = *std::max_element(done.begin(), done.end()) - t0;
  std::vector<int> all_nodes = client_nodes;
  all_nodes.push_back(srv);
  return make_row(sc, b, n, 0, lat, per_second(n, makespan), win.ops(w.fabric()),
                  w.mem_bytes(all_nodes));
}

std::vector<MetricRow> run_single_connect(const ScenarioConfig& sc, const sim::Config& cfg) {
  std::vector<MetricRow> rows;
  for (Baseline b : baselines_of(sc)) rows.push_back(single_connect_one(sc, cfg, b));
  return rows;
}

// ---- full_mesh -------------------------------------------------------------

Task<> mesh_kr_worker(sim::SimClock* clk, World* w, int self, int cpu, int nodes,
                      std::int64_t* lat, Ns* done_at) {
  const Ns t0 = clk->now();
  for (int t = 0; t < nodes; t++) {
    if (t == self) continue;
    auto* vq = w->plane(self).vqp_create(cpu);
    (void)co_await w->plane(self).qconnect(vq, w->svc(t));
  }
  *lat = clk->now() - t0;
  *done_at = clk->now();
}

Task<> mesh_raw_worker(sim::SimClock* clk, sim::Fabric* fab, World* w, int self, int self_worker,
                       int nodes, int wpn, Baseline b, Ns rtr, Ns rts, std::int64_t* lat,
                       Ns* done_at) {
  const Ns t0 = clk->now();
  if (b == Baseline::verbs) co_await w->nic(self).init_context();
  for (int t = 0; t < nodes; t++) {
    for (int k = 0; k < wpn; k++) {
      if (t == self && k == self_worker) continue;
      // Peer-to-peer rendezvous: each side raises its own half, so only the
      // local create serializes on this node's control engine.
      co_await active_connect(clk, fab, &w->nic(self), w->nic(t).id(), b, rtr, rts,
                              /*init_each=*/false, nullptr, nullptr, nullptr, nullptr);
    }
  }
  *lat = clk->now() - t0;
  *done_at = clk->now();
}

MetricRow full_mesh_one(const ScenarioConfig& sc, const sim::Config& cfg, Baseline b) {
  const int nodes = static_cast<int>(cfg.get_i64("bench.mesh_nodes"));
  int wpn = static_cast<int>(cfg.get_i64("bench.mesh_workers_per_node"));
  if (sc.clients > 0) wpn = std::max(1, sc.clients / nodes);
  const int workers = nodes * wpn;
  const int cpus = std::min<int>(wpn, cfg.get_i64("bench.node_cpus"));
  World w(cfg);
  std::vector<std::int64_t> lat(static_cast<std::size_t>(workers));
  std::vector<Ns> done(static_cast<std::size_t>(workers));

  if (b == Baseline::krcore) {
    for (int i = 0; i < nodes; i++) w.add_plane_node(cpus);
    w.boot_planes();
    for (int i = 0; i < nodes; i++) bind_service(w, i);
    Window win(w.fabric());
    const Ns t0 = w.clk().now();
    std::vector<Task<>> ts;
    for (int i = 0; i < nodes; i++)
      for (int j = 0; j < wpn; j++) {
        const int idx = i * wpn + j;
        ts.push_back(mesh_kr_worker(&w.clk(), &w, i, j % cpus, nodes,
                                    &lat[static_cast<std::size_t>(idx)],
                                    &done[static_cast<std::size_t>(idx)]));
      }
    run_tasks(w.clk(), ts);
    const Ns makespan = *std::max_element(done.begin(), done.end()) - t0;
    std::vector<int> all(static_cast<std::size_t>(nodes));
    for (int i = 0; i < nodes; i++) all[static_cast<std::size_t>(i)] = i;
    std::vector<std::int64_t> rel(lat);
    return make_row(sc, b, workers, 0, rel, per_second(workers, makespan), win.ops(w.fabric()),
                    w.mem_bytes(all));
  }

  for (int i = 0; i < nodes; i++) w.add_raw_node();
  const Ns rtr = cfg.get_i64("bench.accept_rtr_ns");
  const Ns rts = cfg.get_i64("nic.configure_qp_ns") - rtr;
  Window win(w.fabric());
  const Ns t0 = w.clk().now();
  std::vector<Task<>> ts;
  for (int i = 0; i < nodes; i++)
    for (int j = 0; j < wpn; j++) {
      const int idx = i * wpn + j;
      ts.push_back(mesh_raw_worker(&w.clk(), &w.fabric(), &w, i, j, nodes, wpn, b, rtr, rts,
                                   &lat[static_cast<std::size_t>(idx)],
                                   &done[static_cast<std::size_t>(idx)]));
    }
  run_tasks(w.clk(), ts);
  const Ns makespan = *std::max_element(done.begin(), done.end()) - t0;
  std::vector<int> all(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; i++) all[static_cast<std::size_t>(i)] = i;
  return make_row(sc, b, workers, 0, lat, per_second(workers, makespan), win.ops(w.fabric()),
                  w.mem_bytes(all));
}

std::vector<MetricRow> run_full_mesh(const ScenarioConfig& sc, const sim::Config& cfg) {
  std::vector<MetricRow> rows;
  for (Baseline b : baselines_of(sc)) rows.push_back(full_mesh_one(sc, cfg, b));
  return rows;
}

// ---- data_path -------------------------------------------------------------

Task<> plane_sync_series(sim::SimClock* clk, vplane::NodePlane* pl, vplane::VirtualQP* vq,
                         std::uint64_t laddr, std::uint32_t lkey, const DataTarget* tgt,
                         std::int64_t payload, int requests, Ns grid,
                         std::vector<std::int64_t>* out) {
  for (int i = 0; i < requests; i++) {
    auto op = plane_sync_op(clk, pl, vq,
                            vread(static_cast<std::uint64_t>(i) + 1, laddr, lkey, tgt->addr,
                                  tgt->mr.rkey, payload),
                            grid);
    out->push_back(co_await op);
  }
}

Task<> plane_async_series(sim::SimClock* clk, vplane::NodePlane* pl, vplane::VirtualQP* vq,
                          std::uint64_t laddr, std::uint32_t lkey, const DataTarget* tgt,
                          std::int64_t payload, int requests, Ns grid,
                          std::vector<std::int64_t>* out) {
  // Doorbell-batched pipeline: 16 outstanding requests per window.
  const int window = 16;
  int issued = 0;
  while (issued < requests) {
    const int batch = std::min(window, requests - issued);
    std::vector<vplane::VWorkRequest> wrs;
    for (int i = 0; i < batch; i++)
      wrs.push_back(vread(static_cast<std::uint64_t>(issued + i) + 1, laddr, lkey, tgt->addr,
                          tgt->mr.rkey, payload));
    const Ns t0 = clk->now();
    (void)co_await pl->post_send_virtualized(vq, std::move(wrs));
    int got = 0;
    while (got < batch) {
      if (pl->poll_cq_virtualized(vq)) {
        out->push_back(clk->now() - t0);
        got++;
        continue;
      }
      co_await clk->delay(grid);
    }
    issued += batch;
  }
}

Task<> raw_sync_series(sim::SimClock* clk, nic::Nic* n, nic::PhysicalQp* qp, std::uint64_t laddr,
                       std::uint32_t lkey, const DataTarget* tgt, std::int64_t payload,
                       int requests, Ns grid, Ns pre_ns, std::vector<std::int64_t>* out) {
  for (int i = 0; i < requests; i++) {
    auto op = raw_sync_op(clk, n, qp,
                          rread(static_cast<std::uint64_t>(i) + 1, laddr, lkey, tgt->addr,
                                tgt->mr.rkey, payload),
                          grid, pre_ns);
    out->push_back(co_await op);
  }
}

// krcore rows come in transport order [rc, dc]; verbs and lite emit one row.
std::vector<MetricRow> run_data_path(const ScenarioConfig& sc, const sim::Config& cfg) {
  const std::int64_t payload = sc.payload >= 0 ? sc.payload : 8;
  const int requests = static_cast<int>(cfg.get_i64("bench.data_path_requests"));
  const Ns grid = cfg.get_i64("vplane.poll_attempt_ns");
  std::vector<MetricRow> rows;

  for (Baseline b : baselines_of(sc)) {
    if (b == Baseline::krcore) {
      for (int transport = 0; transport < 2; transport++) {
        World w(cfg);
        const int srv = w.add_plane_node(1);
        const int cli = w.add_plane_node(1);
        w.boot_planes();
        bind_service(w, srv);
        if (transport == 0) boot_rc_pair(w, cli, srv, w.svc(srv));
        auto* vq = w.plane(cli).vqp_create(0);
        auto conn = w.plane(cli).qconnect(vq, w.svc(srv));
        (void)run_one(w.clk(), conn);
        // Registered after the connect so the first request really is the
        // first touch of this key: one region-cache miss, then steady state.
        DataTarget tgt = plane_target(w, srv, std::max<std::int64_t>(payload, 8));
        const std::uint64_t laddr = w.nic(cli).mem().alloc(std::max<std::int64_t>(payload, 8));
        std::vector<std::int64_t> samples;
        Window win(w.fabric());
        const Ns t0 = w.clk().now();
        std::vector<Task<>> ts;
        if (sc.mode == RunMode::async)
          ts.push_back(plane_async_series(&w.clk(), &w.plane(cli), vq, laddr,
                                          w.plane(cli).heap_mr().lkey, &tgt, payload, requests,
                                          grid, &samples));
        else
          ts.push_back(plane_sync_series(&w.clk(), &w.plane(cli), vq, laddr,
                                         w.plane(cli).heap_mr().lkey, &tgt, payload, requests,
                                         grid, &samples));
        run_tasks(w.clk(), ts);
        rows.push_back(make_row(sc, b, 1, payload, samples,
                                per_second(requests, w.clk().now() - t0), win.ops(w.fabric()),
                                w.mem_bytes({cli})));
      }
      continue;
    }

    World w(cfg);
    const int srv = w.add_raw_node();
    const int cli = w.add_raw_node();
    {
      auto i1 = w.nic(srv).init_context();
      run_one(w.clk(), i1);
      auto i2 = w.nic(cli).init_context();
      run_one(w.clk(), i2);
    }
    nic::PhysicalQp* qp = boot_rc_pair(w, cli, srv, std::nullopt);
    DataTarget tgt = raw_target(w, srv, std::max<std::int64_t>(payload, 8));
    const std::uint64_t laddr = w.nic(cli).mem().alloc(std::max<std::int64_t>(payload, 8));
    nic::MemoryRegion lmr = w.nic(cli).register_mr_boot(laddr, std::max<std::int64_t>(payload, 8),
                                                        false, false);
    const Ns pre = b == Baseline::lite ? cfg.get_i64("fabric.syscall_overhead_ns") : 0;
    std::vector<std::int64_t> samples;
    Window win(w.fabric());
    const Ns t0 = w.clk().now();
    std::vector<Task<>> ts;
    ts.push_back(raw_sync_series(&w.clk(), &w.nic(cli), qp, laddr, lmr.lkey, &tgt, payload,
                                 requests, grid, pre, &samples));
    run_tasks(w.clk(), ts);
    rows.push_back(make_row(sc, b, 1, payload, samples, per_second(requests, w.clk().now() - t0),
                            win.ops(w.fabric()), w.mem_bytes({cli})));
  }
  return rows;
}

// ---- pool_sweep ------------------------------------------------------------

// One batch of reads fanned over every target, grouped per virtual queue the
// way a doorbell batch would be; returns the batch makespan.
Task<> pool_batch(sim::SimClock* clk, vplane::NodePlane* pl,
                  std::vector<vplane::VirtualQP*>* vqs, const std::vector<int>* picks,
                  std::uint64_t laddr, std::uint32_t lkey, const std::vector<DataTarget>* tgts,
                  std::int64_t payload, Ns grid, Ns* batch_ns) {
  const Ns t0 = clk->now();
  const std::size_t nt = vqs->size();
  int total = 0;
  for (std::size_t t = 0; t < nt; t++) {
    std::vector<vplane::VWorkRequest> wrs;
    for (std::size_t i = 0; i < picks->size(); i++)
      if (static_cast<std::size_t>((*picks)[i]) == t)
        wrs.push_back(vread(i + 1, laddr, lkey, (*tgts)[t].addr, (*tgts)[t].mr.rkey, payload));
    if (wrs.empty()) continue;
    total += static_cast<int>(wrs.size());
    (void)co_await pl->post_send_virtualized((*vqs)[t], std::move(wrs));
  }
  int got = 0;
  while (got < total) {
    bool any = false;
    for (std::size_t t = 0; t < nt; t++)
      while (pl->poll_cq_virtualized((*vqs)[t])) {
        got++;
        any = true;
      }
    if (!any) co_await clk->delay(grid);
  }
  *batch_ns = clk->now() - t0;
}

MetricRow pool_sweep_point(const ScenarioConfig& sc, const sim::Config& base_cfg, int pool_size,
                           bool rc_baseline) {
  sim::Config cfg = base_cfg;
  if (!rc_baseline)
    (void)cfg.set("vplane.dc_pool_size", std::to_string(pool_size));
  const int targets = static_cast<int>(cfg.get_i64("bench.pool_targets"));
  const int batch = static_cast<int>(cfg.get_i64("bench.pool_batch"));
  const std::int64_t payload = sc.payload >= 0 ? sc.payload : 256;
  const Ns grid = cfg.get_i64("vplane.poll_attempt_ns");

  World w(cfg);
  const int cli = w.add_plane_node(1);
  std::vector<int> srv;
  for (int i = 0; i < targets; i++) srv.push_back(w.add_plane_node(1));
  w.boot_planes();
  for (int s : srv) bind_service(w, s);
  if (rc_baseline)
    for (int s : srv) boot_rc_pair(w, cli, s, w.svc(s));

  std::vector<vplane::VirtualQP*> vqs;
  std::vector<DataTarget> tgts;
  for (int s : srv) {
    auto* vq = w.plane(cli).vqp_create(0);
    auto conn = w.plane(cli).qconnect(vq, w.svc(s));
    (void)run_one(w.clk(), conn);
    vqs.push_back(vq);
    tgts.push_back(plane_target(w, s, std::max<std::int64_t>(payload, 8)));
  }
  // Warm every region cache entry so the batch itself is steady state.
  for (int t = 0; t < targets; t++) {
    auto warm = plane_sync_op(&w.clk(), &w.plane(cli), vqs[static_cast<std::size_t>(t)],
                              vread(900 + static_cast<std::uint64_t>(t), w.nic(cli).mem().alloc(8),
                                    w.plane(cli).heap_mr().lkey,
                                    tgts[static_cast<std::size_t>(t)].addr,
                                    tgts[static_cast<std::size_t>(t)].mr.rkey, 8),
                              grid);
    (void)run_one(w.clk(), warm);
  }

  sim::Rng rng(sc.seed);
  std::vector<int> picks(static_cast<std::size_t>(batch));
  for (auto& p : picks) p = static_cast<int>(rng.below(static_cast<std::uint64_t>(targets)));
  const std::uint64_t laddr = w.nic(cli).mem().alloc(std::max<std::int64_t>(payload, 8));

  Ns batch_ns = 0;
  Window win(w.fabric());
  std::vector<Task<>> ts;
  ts.push_back(pool_batch(&w.clk(), &w.plane(cli), &vqs, &picks, laddr,
                          w.plane(cli).heap_mr().lkey, &tgts, payload, grid, &batch_ns));
  run_tasks(w.clk(), ts);

  MetricRow r = make_row(sc, Baseline::krcore, rc_baseline ? 0 : pool_size, payload,
                         {batch_ns}, per_second(batch, batch_ns), win.ops(w.fabric()),
                         w.mem_bytes({cli}));
  return r;
}

// Sweep rows carry the pool size in the clients column (1..16); the final
// row, clients = 0, is the promoted-reliable-channel baseline.
std::vector<MetricRow> run_pool_sweep(const ScenarioConfig& sc, const sim::Config& cfg) {
  std::vector<MetricRow> rows;
  if (sc.clients > 0) {
    rows.push_back(pool_sweep_point(sc, cfg, sc.clients, false));
    return rows;
  }
  for (int k = 1; k <= 16; k++) rows.push_back(pool_sweep_point(sc, cfg, k, false));
  rows.push_back(pool_sweep_point(sc, cfg, 0, true));
  return rows;
}

// ---- tail_latency ----------------------------------------------------------

Task<> tail_client(sim::SimClock* clk, vplane::NodePlane* pl,
                   std::vector<vplane::VirtualQP*> vqs, std::vector<DataTarget> tgts,
                   std::uint64_t laddr, std::uint32_t lkey, int requests, std::uint64_t seed,
                   Ns grid, std::vector<std::int64_t>* out) {
  sim::Rng rng(seed);
  for (int i = 0; i < requests; i++) {
    const std::size_t t = static_cast<std::size_t>(rng.below(vqs.size()));
    auto op = plane_sync_op(clk, pl, vqs[t],
                            vread(static_cast<std::uint64_t>(i) + 1, laddr, lkey, tgts[t].addr,
                                  tgts[t].mr.rkey, 8),
                            grid);
    out->push_back(co_await op);
  }
}

Task<> tail_raw_client(sim::SimClock* clk, nic::Nic* n, std::vector<nic::PhysicalQp*> qps,
                       std::vector<DataTarget> tgts, std::uint64_t laddr, std::uint32_t lkey,
                       int requests, std::uint64_t seed, Ns grid, Ns pre_ns,
                       std::vector<std::int64_t>* out) {
  sim::Rng rng(seed);
  for (int i = 0; i < requests; i++) {
    const std::size_t t = static_cast<std::size_t>(rng.below(qps.size()));
    auto op = raw_sync_op(clk, n, qps[t],
                          rread(static_cast<std::uint64_t>(i) + 1, laddr, lkey, tgts[t].addr,
                                tgts[t].mr.rkey, 8),
                          grid, pre_ns);
    while (!op.done()) co_await clk->delay(grid);
    out->push_back(op.result());
  }
}

// krcore rows in transport order [rc, dc]; verbs and lite one row each.
std::vector<MetricRow> run_tail_latency(const ScenarioConfig& sc, const sim::Config& base_cfg) {
  const int clients = sc.clients > 0 ? sc.clients
                                     : static_cast<int>(base_cfg.get_i64("bench.tail_clients"));
  const int servers = sc.servers > 0 ? sc.servers
                                     : static_cast<int>(base_cfg.get_i64("bench.tail_servers"));
  const int requests = static_cast<int>(base_cfg.get_i64("bench.tail_requests_per_client"));
  const Ns grid = base_cfg.get_i64("vplane.poll_attempt_ns");
  std::vector<MetricRow> rows;

  for (Baseline b : baselines_of(sc)) {
    const int transports = b == Baseline::krcore ? 2 : 1;
    for (int transport = 0; transport < transports; transport++) {
      sim::Config cfg = base_cfg;
      if (b == Baseline::krcore)
        (void)cfg.set("vplane.dc_pool_size",
                      std::to_string(cfg.get_i64("bench.tail_dc_pool")));
      World w(cfg);
      std::vector<std::int64_t> samples;
      Window* win = nullptr;
      Ns t0 = 0;
      std::vector<int> cli_nodes;

      if (b == Baseline::krcore) {
        std::vector<int> srv_nodes;
        for (int s = 0; s < servers; s++) srv_nodes.push_back(w.add_plane_node(1));
        for (int c = 0; c < clients; c++) cli_nodes.push_back(w.add_plane_node(1));
        w.boot_planes();
        std::vector<DataTarget> tgts;
        for (int s : srv_nodes) {
          bind_service(w, s);
          tgts.push_back(plane_target(w, s, 64));
        }
        std::vector<Task<>> ts;
        std::vector<std::vector<vplane::VirtualQP*>> vq_sets(
            static_cast<std::size_t>(clients));
        for (int c = 0; c < clients; c++) {
          auto& pl = w.plane(cli_nodes[static_cast<std::size_t>(c)]);
          if (transport == 0)
            for (int s : srv_nodes)
              boot_rc_pair(w, cli_nodes[static_cast<std::size_t>(c)], s, w.svc(s));
          for (int s : srv_nodes) {
            auto* vq = pl.vqp_create(0);
            auto conn = pl.qconnect(vq, w.svc(s));
            (void)run_one(w.clk(), conn);
            vq_sets[static_cast<std::size_t>(c)].push_back(vq);
          }
          // Warm region caches outside the measurement.
          for (std::size_t t = 0; t < tgts.size(); t++) {
            auto warm = plane_sync_op(
                &w.clk(), &pl, vq_sets[static_cast<std::size_t>(c)][t],
                vread(800 + t, w.nic(cli_nodes[static_cast<std::size_t>(c)]).mem().alloc(8),
                      pl.heap_mr().lkey, tgts[t].addr, tgts[t].mr.rkey, 8),
                grid);
            (void)run_one(w.clk(), warm);
          }
        }
        win = new Window(w.fabric());
        t0 = w.clk().now();
        for (int c = 0; c < clients; c++)
          ts.push_back(tail_client(&w.clk(), &w.plane(cli_nodes[static_cast<std::size_t>(c)]),
                                   vq_sets[static_cast<std::size_t>(c)], tgts,
                                   w.nic(cli_nodes[static_cast<std::size_t>(c)]).mem().alloc(64),
                                   w.plane(cli_nodes[static_cast<std::size_t>(c)]).heap_mr().lkey,
                                   requests, sc.seed + static_cast<std::uint64_t>(c) * 977,
                                   grid, &samples));
        run_tasks(w.clk(), ts);
      } else {
        std::vector<int> srv_nodes;
        for (int s = 0; s < servers; s++) srv_nodes.push_back(w.add_raw_node());
        for (int c = 0; c < clients; c++) cli_nodes.push_back(w.add_raw_node());
        std::vector<DataTarget> tgts;
        for (int s : srv_nodes) tgts.push_back(raw_target(w, s, 64));
        std::vector<Task<>> ts;
        std::vector<std::vector<nic::PhysicalQp*>> qp_sets(static_cast<std::size_t>(clients));
        std::vector<nic::MemoryRegion> lmrs;
        std::vector<std::uint64_t> laddrs;
        for (int c = 0; c < clients; c++) {
          for (int s : srv_nodes)
            qp_sets[static_cast<std::size_t>(c)].push_back(
                boot_rc_pair(w, cli_nodes[static_cast<std::size_t>(c)], s, std::nullopt));
          const std::uint64_t la = w.nic(cli_nodes[static_cast<std::size_t>(c)]).mem().alloc(64);
          laddrs.push_back(la);
          lmrs.push_back(w.nic(cli_nodes[static_cast<std::size_t>(c)])
                             .register_mr_boot(la, 64, false, false));
        }
        const Ns pre = b == Baseline::lite ? base_cfg.get_i64("fabric.syscall_overhead_ns") : 0;
        win = new Window(w.fabric());
        t0 = w.clk().now();
        for (int c = 0; c < clients; c++)
          ts.push_back(tail_raw_client(&w.clk(), &w.nic(cli_nodes[static_cast<std::size_t>(c)]),
                                       qp_sets[static_cast<std::size_t>(c)], tgts,
                                       laddrs[static_cast<std::size_t>(c)],
                                       lmrs[static_cast<std::size_t>(c)].lkey, requests,
                                       sc.seed + static_cast<std::uint64_t>(c) * 977, grid, pre,
                                       &samples));
        run_tasks(w.clk(), ts);
      }
      const std::int64_t total = static_cast<std::int64_t>(samples.size());
      rows.push_back(make_row(sc, b, clients, 8, samples, per_second(total, w.clk().now() - t0),
                              win->ops(w.fabric()), w.mem_bytes(cli_nodes)));
      delete win;
    }
  }
  return rows;
}

// ---- load_spike ------------------------------------------------------------

struct SpikeShared {
  Ns t_base = 0;
  Ns horizon = 0;
  Ns bucket = 0;
  Ns interval = 0;
  std::int64_t payload = 8;
  int ready_count = 0;
  int workers = 0;
  Ns startup_complete = -1;
  std::int64_t startup_wire = 0;
  std::int64_t startup_mem = 0;
  std::vector<std::vector<std::int64_t>> lat;  // per bucket
};

void spike_sample(SpikeShared* sh, Ns done_at, std::int64_t latency) {
  const Ns rel = done_at - sh->t_base;
  if (rel >= sh->horizon) return;
  sh->lat[static_cast<std::size_t>(rel / sh->bucket)].push_back(latency);
}

Task<> spike_kr_worker(sim::SimClock* clk, World* w, int cli, int cpu,
                       const std::vector<int>* storage,
                       const std::vector<DataTarget>* tgts, std::uint64_t laddr,
                       std::uint64_t seed, Ns grid, SpikeShared* sh, sim::Fabric* fab) {
  auto& pl = w->plane(cli);
  std::vector<vplane::VirtualQP*> vqs;
  for (std::size_t s = 0; s < storage->size(); s++) {
    auto* vq = pl.vqp_create(cpu);
    (void)co_await pl.qconnect(vq, w->svc((*storage)[s]));
    vqs.push_back(vq);
  }
  sh->ready_count++;
  if (sh->ready_count == sh->workers) {
    sh->startup_complete = clk->now() - sh->t_base;
    sh->startup_wire = static_cast<std::int64_t>(fab->count_all());
    sh->startup_mem = w->nic(cli).meter().total();
  }
  sim::Rng rng(seed);
  Ns next = clk->now();
  while (clk->now() - sh->t_base < sh->horizon) {
    const std::size_t t = static_cast<std::size_t>(rng.below(vqs.size()));
    auto op = plane_sync_op(clk, &pl, vqs[t],
                            vread(1, laddr, pl.heap_mr().lkey, (*tgts)[t].addr,
                                  (*tgts)[t].mr.rkey, sh->payload),
                            grid);
    while (!op.done()) co_await clk->delay(grid);
    spike_sample(sh, clk->now(), op.result());
    next += sh->interval;
    if (next > clk->now()) co_await clk->delay(next - clk->now());
  }
}

Task<> spike_raw_worker(sim::SimClock* clk, sim::Fabric* fab, World* w, int cli,
                        const std::vector<int>* storage, const std::vector<DataTarget>* tgts,
                        std::uint64_t laddr, std::uint32_t lkey, Baseline b, Ns rtr, Ns rts,
                        std::vector<AcceptState>* acc, std::size_t acc_base, std::uint64_t seed,
                        Ns grid, Ns pre_ns, SpikeShared* sh) {
  std::vector<nic::PhysicalQp*> qps;
  for (std::size_t s = 0; s < storage->size(); s++) {
    nic::PhysicalQp* qp = nullptr;
    co_await active_connect(clk, fab, &w->nic(cli), w->nic((*storage)[s]).id(), b, rtr, rts,
                            /*init_each=*/s == 0, &(*acc)[acc_base + s], nullptr, nullptr, &qp);
    qps.push_back(qp);
  }
  sh->ready_count++;
  if (sh->ready_count == sh->workers) {
    sh->startup_complete = clk->now() - sh->t_base;
    sh->startup_wire = static_cast<std::int64_t>(fab->count_all());
    sh->startup_mem = w->nic(cli).meter().total();
  }
  sim::Rng rng(seed);
  Ns next = clk->now();
  while (clk->now() - sh->t_base < sh->horizon) {
    const std::size_t t = static_cast<std::size_t>(rng.below(qps.size()));
    auto op = raw_sync_op(clk, &w->nic(cli), qps[t],
                          rread(1, laddr, lkey, (*tgts)[t].addr, (*tgts)[t].mr.rkey, sh->payload),
                          grid, pre_ns);
    while (!op.done()) co_await clk->delay(grid);
    spike_sample(sh, clk->now(), op.result());
    next += sh->interval;
    if (next > clk->now()) co_await clk->delay(next - clk->now());
  }
}

Task<> spike_spawner(sim::SimClock* clk, Ns process_start, int workers,
                     std::vector<Task<>>* out,
                     std::function<Task<>(int)> make_worker) {
  for (int i = 0; i < workers; i++) {
    co_await clk->delay(process_start);
    out->push_back(make_worker(i));
  }
}

Task<> spike_probe(sim::SimClock* clk, sim::Fabric* fab, nic::Nic* cli, Ns bucket, int buckets,
                   std::vector<std::int64_t>* wire_at, std::vector<std::int64_t>* mem_at) {
  for (int i = 0; i < buckets; i++) {
    co_await clk->delay(bucket);
    wire_at->push_back(static_cast<std::int64_t>(fab->count_all()));
    mem_at->push_back(cli->meter().total());
  }
}

// Per baseline: one startup row (payload 0, latency columns carry the
// startup-complete timestamp) followed by one row per 100ms bucket.
std::vector<MetricRow> run_load_spike(const ScenarioConfig& sc, const sim::Config& cfg) {
  const int workers = sc.clients > 0 ? sc.clients
                                     : static_cast<int>(cfg.get_i64("bench.spike_workers"));
  const int storage_n = sc.servers > 0 ? sc.servers
                                       : static_cast<int>(cfg.get_i64("bench.spike_storage_nodes"));
  const Ns process_start = cfg.get_i64("bench.process_start_ns");
  const Ns horizon = cfg.get_i64("bench.spike_horizon_ns");
  const Ns bucket = cfg.get_i64("bench.spike_bucket_ns");
  const int buckets = static_cast<int>(horizon / bucket);
  const std::int64_t rate = cfg.get_i64("bench.spike_get_rate_per_s");
  const Ns grid = cfg.get_i64("vplane.poll_attempt_ns");
  const int cpus = static_cast<int>(cfg.get_i64("bench.node_cpus"));
  std::vector<MetricRow> rows;

  for (Baseline b : baselines_of(sc)) {
    World w(cfg);
    SpikeShared sh;
    sh.horizon = horizon;
    sh.bucket = bucket;
    sh.workers = workers;
    sh.interval = workers > 0 ? static_cast<Ns>(workers) * 1'000'000'000 / rate : 1;
    sh.lat.resize(static_cast<std::size_t>(buckets));
    std::vector<int> storage;
    std::vector<DataTarget> tgts;
    int cli = -1;
    std::vector<Task<>> workers_ts;
    std::vector<Task<>> ctrl_ts;
    std::vector<std::int64_t> wire_at, mem_at;
    std::vector<AcceptState> acc;
    std::unique_ptr<bgd::Promoter> promoter;

    if (b == Baseline::krcore) {
      cli = w.add_plane_node(cpus);
      for (int s = 0; s < storage_n; s++) storage.push_back(w.add_plane_node(1));
      w.boot_planes();
      promoter = std::make_unique<bgd::Promoter>(w.clk(), w.plane(cli), cfg);
      w.plane(cli).attach_promoter(promoter.get());
      for (int s : storage) {
        bind_service(w, s);
        tgts.push_back(plane_target(w, s, 64));
      }
    } else {
      cli = w.add_raw_node();
      for (int s = 0; s < storage_n; s++) storage.push_back(w.add_raw_node());
      for (int s : storage) {
        auto init = w.nic(s).init_context();
        run_one(w.clk(), init);
        tgts.push_back(raw_target(w, s, 64));
      }
      acc.resize(static_cast<std::size_t>(workers * storage_n));
    }
    const std::uint64_t laddr = w.nic(cli).mem().alloc(64);
    nic::MemoryRegion lmr;
    if (b != Baseline::krcore) lmr = w.nic(cli).register_mr_boot(laddr, 64, false, false);

    const Ns rtr = cfg.get_i64("bench.accept_rtr_ns");
    const Ns rts = cfg.get_i64("nic.configure_qp_ns") - rtr;
    const Ns pre = b == Baseline::lite ? cfg.get_i64("fabric.syscall_overhead_ns") : 0;
    Window win(w.fabric());
    sh.t_base = w.clk().now();
    const std::uint64_t wire0 = w.fabric().count_all();

    ctrl_ts.push_back(spike_probe(&w.clk(), &w.fabric(), &w.nic(cli), bucket, buckets, &wire_at,
                                  &mem_at));
    std::function<Task<>(int)> make_worker;
    if (b == Baseline::krcore) {
      make_worker = [&, cli](int i) {
        return spike_kr_worker(&w.clk(), &w, cli, i % cpus, &storage, &tgts, laddr,
                               sc.seed + static_cast<std::uint64_t>(i) * 7919, grid, &sh,
                               &w.fabric());
      };
    } else {
      make_worker = [&, cli, b](int i) {
        // Accept daemons on the storage side start when each connect lands.
        const std::size_t base = static_cast<std::size_t>(i) * storage.size();
        for (std::size_t s = 0; s < storage.size(); s++)
          ctrl_ts.push_back(accept_one(
              &w.clk(), &w.fabric(), &w.nic(storage[s]), w.nic(cli).id(), rtr,
              w.fabric().latency(w.nic(cli).id(), w.nic(storage[s]).id()),
              &acc[base + s]));
        return spike_raw_worker(&w.clk(), &w.fabric(), &w, cli, &storage, &tgts, laddr, lmr.lkey,
                                b, rtr, rts, &acc, base,
                                sc.seed + static_cast<std::uint64_t>(i) * 7919, grid, pre, &sh);
      };
    }
    ctrl_ts.push_back(
        spike_spawner(&w.clk(), process_start, workers, &workers_ts, make_worker));

    w.clk().run_until([&] {
      if (w.clk().now() - sh.t_base < horizon) return false;
      for (auto& t : workers_ts)
        if (!t.done()) return false;
      return static_cast<int>(workers_ts.size()) == workers;
    });

    MetricRow startup = make_row(sc, b, workers, 0,
                                 {sh.startup_complete, sh.startup_complete, sh.startup_complete},
                                 per_second(workers, sh.startup_complete),
                                 sh.startup_wire - static_cast<std::int64_t>(wire0),
                                 sh.startup_mem);
    startup.p50_ns = sh.startup_complete;
    startup.p99_ns = sh.startup_complete;
    startup.p999_ns = sh.startup_complete;
    rows.push_back(startup);
    for (int i = 0; i < buckets; i++) {
      const auto& lats = sh.lat[static_cast<std::size_t>(i)];
      rows.push_back(make_row(
          sc, b, workers, sh.payload, lats,
          static_cast<std::int64_t>(lats.size()) * (1'000'000'000 / bucket),
          (static_cast<std::size_t>(i) < wire_at.size()
               ? wire_at[static_cast<std::size_t>(i)] - static_cast<std::int64_t>(wire0)
               : 0),
          (static_cast<std::size_t>(i) < mem_at.size() ? mem_at[static_cast<std::size_t>(i)]
                                                       : 0)));
    }
  }
  return rows;
}

// ---- memory_model ----------------------------------------------------------

std::vector<MetricRow> run_memory_model(const ScenarioConfig& sc, const sim::Config& cfg) {
  const std::int64_t dc_qps = cfg.get_i64("bench.memory_dc_qps");
  const std::int64_t dc_mem = cfg.get_i64("nic.dc_qp_mem_bytes");
  const std::int64_t rc_mem = cfg.get_i64("nic.rc_qp_mem_bytes");
  const std::int64_t vqp_mem = cfg.get_i64("vplane.vqp_meta_bytes");
  std::vector<std::int64_t> sweep = {0, 1, 10, 100, 1000, 5000};
  if (sc.clients > 0) sweep = {sc.clients};
  std::vector<MetricRow> rows;
  for (Baseline b : baselines_of(sc)) {
    for (std::int64_t n : sweep) {
      const std::int64_t bytes =
          b == Baseline::krcore ? dc_qps * dc_mem + n * vqp_mem : n * rc_mem;
      rows.push_back(make_row(sc, b, n, 0, {}, 0, 0, bytes));
    }
  }
  return rows;
}

// ---- transfer_demo ---------------------------------------------------------

// Two rows: the same request stream before and after a mid-stream move from
// the pooled connectionless channel to a dedicated reliable one.
std::vector<MetricRow> run_transfer_demo(const ScenarioConfig& sc, const sim::Config& cfg) {
  const int requests = static_cast<int>(cfg.get_i64("bench.transfer_requests"));
  const std::int64_t payload = sc.payload >= 0 ? sc.payload : 8;
  const Ns grid = cfg.get_i64("vplane.poll_attempt_ns");
  World w(cfg);
  const int srv = w.add_plane_node(1);
  const int cli = w.add_plane_node(1);
  w.boot_planes();
  bind_service(w, srv);
  auto* vq = w.plane(cli).vqp_create(0);
  auto conn = w.plane(cli).qconnect(vq, w.svc(srv));
  (void)run_one(w.clk(), conn);
  DataTarget tgt = plane_target(w, srv, std::max<std::int64_t>(payload, 8));
  const std::uint64_t laddr = w.nic(cli).mem().alloc(std::max<std::int64_t>(payload, 8));
  {
    auto warm = plane_sync_op(&w.clk(), &w.plane(cli), vq,
                              vread(999, laddr, w.plane(cli).heap_mr().lkey, tgt.addr,
                                    tgt.mr.rkey, 8),
                              grid);
    (void)run_one(w.clk(), warm);
  }

  std::vector<MetricRow> rows;
  const int half = requests / 2;
  for (int phase = 0; phase < 2; phase++) {
    if (phase == 1) {
      nic::PhysicalQp* rc = boot_rc_pair(w, cli, srv, std::nullopt);
      auto tr = w.plane(cli).transfer_physical_qp(vq, rc);
      (void)run_one(w.clk(), tr);
    }
    std::vector<std::int64_t> samples;
    Window win(w.fabric());
    const Ns t0 = w.clk().now();
    std::vector<Task<>> ts;
    ts.push_back(plane_sync_series(&w.clk(), &w.plane(cli), vq, laddr,
                                   w.plane(cli).heap_mr().lkey, &tgt, payload, half, grid,
                                   &samples));
    run_tasks(w.clk(), ts);
    rows.push_back(make_row(sc, Baseline::krcore, 1, payload, samples,
                            per_second(half, w.clk().now() - t0), win.ops(w.fabric()),
                            w.mem_bytes({cli})));
  }
  return rows;
}

}  // namespace

// ---- public API -------------------------------------------------------------

const char* to_string(Baseline b) {
  switch (b) {
    case Baseline::krcore: return "krcore";
    case Baseline::verbs: return "verbs";
    case Baseline::lite: return "lite";
  }
  return "?";
}

std::optional<Baseline> baseline_from(const std::string& s) {
  if (s == "k" || s == "krcore") return Baseline::krcore;
  if (s == "v" || s == "verbs") return Baseline::verbs;
  if (s == "l" || s == "lite") return Baseline::lite;
  return std::nullopt;
}

std::int64_t nearest_rank(std::vector<std::int64_t> samples, double q) {
  if (samples.empty()) return 0;
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<double>(samples.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(q * n));
  if (rank < 1) rank = 1;
  if (rank > samples.size()) rank = samples.size();
  return samples[rank - 1];
}

std::string to_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << kCsvHeader << "\n";
  for (const auto& r : rows)
    out << r.scenario << ',' << r.baseline << ',' << r.clients << ',' << r.payload << ','
        << r.p50_ns << ',' << r.p99_ns << ',' << r.p999_ns << ',' << r.throughput_per_s << ','
        << r.wire_ops << ',' << r.mem_bytes << "\n";
  return out.str();
}

Status write_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) return Status::invalid_arg;
  f << to_csv(rows);
  return f.good() ? Status::ok : Status::invalid_arg;
}

std::optional<std::vector<MetricRow>> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) return std::nullopt;
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 10) return std::nullopt;
    MetricRow r;
    r.scenario = cells[0];
    r.baseline = cells[1];
    try {
      r.clients = std::stoll(cells[2]);
      r.payload = std::stoll(cells[3]);
      r.p50_ns = std::stoll(cells[4]);
      r.p99_ns = std::stoll(cells[5]);
      r.p999_ns = std::stoll(cells[6]);
      r.throughput_per_s = std::stoll(cells[7]);
      r.wire_ops = std::stoll(cells[8]);
      r.mem_bytes = std::stoll(cells[9]);
    } catch (const std::exception&) {
      return std::nullopt;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::optional<std::vector<MetricRow>> read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return std::nullopt;
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_csv(buf.str());
}

const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {
      "single_connect", "full_mesh",    "data_path",    "pool_sweep",
      "tail_latency",   "load_spike",   "memory_model", "transfer_demo"};
  return names;
}

Status validate(const ScenarioConfig& sc) {
  const auto& names = scenario_names();
  if (std::find(names.begin(), names.end(), sc.scenario) == names.end())
    return Status::invalid_arg;
  const auto presets = sim::Config::preset_names();
  if (std::find(presets.begin(), presets.end(), sc.preset) == presets.end())
    return Status::invalid_arg;
  if (sc.clients < 0 || sc.servers < 0) return Status::invalid_arg;
  if (sc.payload < -1 || sc.payload > (1 << 30)) return Status::invalid_arg;
  return Status::ok;
}

std::vector<MetricRow> run_scenario(const ScenarioConfig& sc, const sim::Config& cfg) {
  if (validate(sc) != Status::ok) return {};
  if (sc.scenario == "single_connect") return run_single_connect(sc, cfg);
  if (sc.scenario == "full_mesh") return run_full_mesh(sc, cfg);
  if (sc.scenario == "data_path") return run_data_path(sc, cfg);
  if (sc.scenario == "pool_sweep") return run_pool_sweep(sc, cfg);
  if (sc.scenario == "tail_latency") return run_tail_latency(sc, cfg);
  if (sc.scenario == "load_spike") return run_load_spike(sc, cfg);
  if (sc.scenario == "memory_model") return run_memory_model(sc, cfg);
  if (sc.scenario == "transfer_demo") return run_transfer_demo(sc, cfg);
  return {};
}

}  // namespace vrdma::bench
