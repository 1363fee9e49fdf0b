#pragma once

// Shared fixture for control-plane tests: one meta host on node 0, plane
// nodes from index 1 up, everything booted before the test body runs.
// Requires doctest.h to be included first.

#include <memory>
#include <vector>

#include "vrdma/vplane/plane.hpp"

namespace rigtest {

using namespace vrdma;
using namespace vrdma::sim;
using namespace vrdma::nic;
using namespace vrdma::vplane;

template <typename T>
T run_task(SimClock& clk, Task<T>& t) {
  clk.run_until([&] { return t.done(); });
  REQUIRE(t.done());
  if constexpr (!std::is_void_v<T>) return t.result();
}

struct PlaneRig {
  SimClock clk;
  Config cfg;
  Fabric fabric;
  Nic meta_nic;
  meta::MetaServer server;
  PlaneDirectory dir;
  std::vector<std::unique_ptr<Nic>> nics;
  std::vector<std::unique_ptr<NodePlane>> planes;

  explicit PlaneRig(int n_nodes, Config c = Config(), int cpus = 1)
      : cfg(std::move(c)),
        fabric(clk, cfg.get_i64("fabric.wire_latency_ns"),
               cfg.get_i64("fabric.meta_wire_latency_ns")),
        meta_nic(clk, fabric, cfg, make_node_id(0)),
        server(clk, fabric, meta_nic, cfg) {
    for (int i = 0; i < n_nodes; i++) {
      nics.push_back(std::make_unique<Nic>(clk, fabric, cfg, make_node_id(i + 1)));
      planes.push_back(std::make_unique<NodePlane>(clk, fabric, cfg, *nics.back(),
                                                   std::vector<meta::MetaServer*>{&server}, dir,
                                                   cpus));
    }
    std::vector<Task<>> boots;
    boots.reserve(planes.size());
    for (auto& p : planes) boots.push_back(p->boot());
    clk.run_until([&] {
      for (auto& t : boots)
        if (!t.done()) return false;
      return true;
    });
    for (auto& p : planes) REQUIRE(p->booted());
  }

  NodeId svc(int i) const { return make_node_id(i + 1, 2); }
  NodePlane& plane(int i) { return *planes[static_cast<std::size_t>(i)]; }
  Nic& nic(int i) { return *nics[static_cast<std::size_t>(i)]; }
};

inline VWorkRequest read_wr(std::uint64_t wr_id, std::uint64_t laddr, std::uint32_t lkey,
                            std::uint64_t raddr, std::uint32_t rkey, std::int64_t len,
                            bool signaled = true) {
  VWorkRequest w;
  w.op = Opcode::read;
  w.wr_id = wr_id;
  w.signaled = signaled;
  w.laddr = laddr;
  w.len = len;
  w.lkey = lkey;
  w.raddr = raddr;
  w.rkey = rkey;
  return w;
}

inline VWorkRequest send_wr(std::uint64_t wr_id, std::uint64_t laddr, std::int64_t len,
                            bool signaled = true) {
  VWorkRequest w;
  w.op = Opcode::send;
  w.wr_id = wr_id;
  w.signaled = signaled;
  w.laddr = laddr;
  w.len = len;
  return w;
}

inline Task<> sleep_task(SimClock& clk, Ns d) { co_await clk.delay(d); }

inline void fill_pattern(Nic& nic, std::uint64_t addr, std::int64_t len, std::uint8_t seed) {
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(len));
  for (std::size_t i = 0; i < buf.size(); i++)
    buf[i] = static_cast<std::uint8_t>(seed + 31 * i);
  REQUIRE(nic.mem().write(addr, buf.data(), len));
}

inline bool check_pattern(Nic& nic, std::uint64_t addr, std::int64_t len, std::uint8_t seed) {
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(len));
  if (!nic.mem().read(addr, buf.data(), len)) return false;
  for (std::size_t i = 0; i < buf.size(); i++)
    if (buf[i] != static_cast<std::uint8_t>(seed + 31 * i)) return false;
  return true;
}

}  // namespace rigtest
