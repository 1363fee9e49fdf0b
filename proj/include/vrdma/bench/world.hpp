#pragma once

// Simulated cluster builder shared by the scenario harness: one meta host on
// node 0, then raw nodes (NIC only, driven through the verbs surface) or
// plane nodes (connection virtualization on top) from index 1 up.

#include <memory>
#include <vector>

#include "vrdma/vplane/plane.hpp"

namespace vrdma::bench {

class World {
 public:
  explicit World(sim::Config cfg);

  // Both return the node index. Plane nodes are booted separately so a batch
  // can come up concurrently; boot time stays outside measurement windows.
  int add_raw_node();
  int add_plane_node(int cpus);
  void boot_planes();

  sim::SimClock& clk() { return clk_; }
  const sim::Config& cfg() const { return cfg_; }
  sim::Fabric& fabric() { return fabric_; }
  meta::MetaServer& meta() { return meta_; }
  nic::Nic& nic(int i) { return *nics_[static_cast<std::size_t>(i)]; }
  vplane::NodePlane& plane(int i) { return *planes_[static_cast<std::size_t>(i)]; }
  bool has_plane(int i) const { return planes_[static_cast<std::size_t>(i)] != nullptr; }
  int nodes() const { return static_cast<int>(nics_.size()); }

  // Address a plane's service binds to and peers connect to.
  sim::NodeId svc(int i, std::uint16_t port = 2) const;

  // Simulated connection-state memory currently held across the given nodes.
  std::int64_t mem_bytes(const std::vector<int>& node_idx);

 private:
  sim::SimClock clk_;
  sim::Config cfg_;
  sim::Fabric fabric_;
  nic::Nic meta_nic_;
  meta::MetaServer meta_;
  vplane::PlaneDirectory dir_;
  std::vector<std::unique_ptr<nic::Nic>> nics_;
  std::vector<std::unique_ptr<vplane::NodePlane>> planes_;
};

}  // namespace vrdma::bench
