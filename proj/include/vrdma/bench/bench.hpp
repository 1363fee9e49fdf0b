#pragma once

// Scenario harness: experiment shapes built from config, run on the
// simulator, reported as CSV metric rows. Row order per scenario is fixed
// and documented in the README; reruns with the same seed are byte
// identical.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vrdma/nic/types.hpp"
#include "vrdma/sim/config.hpp"

namespace vrdma::bench {

enum class Baseline { krcore, verbs, lite };
enum class RunMode { sync, async };

const char* to_string(Baseline b);
// Accepts the short forms k|v|l and the full names.
std::optional<Baseline> baseline_from(const std::string& s);

struct ScenarioConfig {
  std::string scenario;
  RunMode mode = RunMode::sync;
  int clients = 0;                   // 0 = scenario default
  int servers = 0;                   // 0 = scenario default
  std::int64_t payload = -1;         // -1 = scenario default
  std::optional<Baseline> baseline;  // empty = every baseline the scenario has
  std::string preset = "default";
  std::uint64_t seed = 42;
};

struct MetricRow {
  std::string scenario;
  std::string baseline;
  std::int64_t clients = 0;
  std::int64_t payload = 0;
  std::int64_t p50_ns = 0;
  std::int64_t p99_ns = 0;
  std::int64_t p999_ns = 0;
  std::int64_t throughput_per_s = 0;
  std::int64_t wire_ops = 0;
  std::int64_t mem_bytes = 0;
};

inline constexpr const char* kCsvHeader =
    "scenario,baseline,clients,payload,p50_ns,p99_ns,p999_ns,throughput_per_s,wire_ops,mem_bytes";

// Nearest-rank percentile over the full sample set; q in (0, 1].
std::int64_t nearest_rank(std::vector<std::int64_t> samples, double q);

std::string to_csv(const std::vector<MetricRow>& rows);
Status write_csv(const std::string& path, const std::vector<MetricRow>& rows);
// Parse rows written by to_csv; nullopt on malformed input. Ratio checks go
// through this round trip so they read what a consumer of the file would.
std::optional<std::vector<MetricRow>> parse_csv(const std::string& text);
std::optional<std::vector<MetricRow>> read_csv(const std::string& path);

const std::vector<std::string>& scenario_names();
// Every field checked; unknown scenario names rejected.
Status validate(const ScenarioConfig& sc);

// Runs one scenario on a fresh simulation. cfg carries the preset plus any
// key overrides; sc.preset is informational here (the CLI applies it when
// building cfg).
std::vector<MetricRow> run_scenario(const ScenarioConfig& sc, const sim::Config& cfg);

}  // namespace vrdma::bench
