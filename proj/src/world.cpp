#include "vrdma/bench/world.hpp"

namespace vrdma::bench {

World::World(sim::Config cfg)
    : cfg_(std::move(cfg)),
      fabric_(clk_, cfg_.get_i64("fabric.wire_latency_ns"),
              cfg_.get_i64("fabric.meta_wire_latency_ns")),
      meta_nic_(clk_, fabric_, cfg_, sim::make_node_id(0)),
      meta_(clk_, fabric_, meta_nic_, cfg_) {
  clk_.set_event_budget(static_cast<std::uint64_t>(cfg_.get_i64("fabric.event_budget")));
}

int World::add_raw_node() {
  const int idx = nodes();
  nics_.push_back(std::make_unique<nic::Nic>(clk_, fabric_, cfg_,
                                             sim::make_node_id(static_cast<std::uint32_t>(idx + 1))));
  planes_.push_back(nullptr);
  return idx;
}

int World::add_plane_node(int cpus) {
  const int idx = nodes();
  nics_.push_back(std::make_unique<nic::Nic>(clk_, fabric_, cfg_,
                                             sim::make_node_id(static_cast<std::uint32_t>(idx + 1))));
  planes_.push_back(std::make_unique<vplane::NodePlane>(
      clk_, fabric_, cfg_, *nics_.back(), std::vector<meta::MetaServer*>{&meta_}, dir_, cpus));
  return idx;
}

void World::boot_planes() {
  std::vector<sim::Task<>> boots;
  for (auto& p : planes_)
    if (p && !p->booted()) boots.push_back(p->boot());
  clk_.run_until([&] {
    for (auto& t : boots)
      if (!t.done()) return false;
    return true;
  });
}

sim::NodeId World::svc(int i, std::uint16_t port) const {
  return sim::make_node_id(static_cast<std::uint32_t>(i + 1), port);
}

std::int64_t World::mem_bytes(const std::vector<int>& node_idx) {
  std::int64_t sum = 0;
  for (int i : node_idx) sum += nic(i).meter().total();
  return sum;
}

}  // namespace vrdma::bench
