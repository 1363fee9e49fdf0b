#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vrdma/status.hpp"

namespace vrdma::sim {

// Flat key=value configuration. Every cost parameter of the simulation is a
// key here, loadable from a plain-text file ('#' comments, blank lines
// ignored) and overridable one key at a time. Unknown keys are rejected so a
// typo cannot silently fall back to a default.
class Config {
 public:
  Config();  // default preset

  // Named presets: "default" and "fig3b" (calibrated reproduction preset).
  static Config preset(const std::string& name);
  static std::vector<std::string> preset_names();
  static std::string preset_description(const std::string& name);
  static std::vector<std::string> known_keys();

  Status load_file(const std::string& path);
  Status set(const std::string& key, const std::string& value);
  // Parses "key=value".
  Status set_pair(const std::string& pair);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::int64_t get_i64(const std::string& key) const;
  double get_f64(const std::string& key) const;
  std::string get_str(const std::string& key) const;

  // Per-byte wire/NIC cost in integer picoseconds (the key itself is
  // expressed in nanoseconds and may be fractional, e.g. "0.8").
  std::int64_t per_byte_ps() const;

  // Integer time cost of moving `bytes` at `ps_per_byte` picoseconds/byte.
  static std::int64_t bytes_cost_ns(std::int64_t bytes, std::int64_t ps_per_byte) {
    return bytes * ps_per_byte / 1000;
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace vrdma::sim
