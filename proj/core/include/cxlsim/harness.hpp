// Experiment orchestration: config loading, the canned suites, reporting and
// the calibration self-check.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cxlsim/coherence.hpp"
#include "cxlsim/engine.hpp"
#include "cxlsim/interconnect.hpp"
#include "cxlsim/nic.hpp"
#include "cxlsim/workloads.hpp"

namespace cxlsim {

enum class DeviceKind : std::uint8_t { CxlNic, PcieNic };

struct WorkloadConfig {
  int numa_node = 7;
  std::uint32_t latency_trials = kLatencyTrials;
  std::uint32_t bandwidth_trials = kBandwidthTrials;
  std::vector<std::uint64_t> dma_sizes;
  std::uint32_t dma_stream = 64;
  std::uint64_t rao_ops = 100000;
  std::uint64_t rao_region_bytes = 1ULL << 30;
  std::vector<CircusKind> rao_patterns;
  std::string rao_cxl_profile = "cxl-asic-1500";
  std::string rao_pcie_profile = "pcie-asic-1500";
  std::uint32_t rpc_messages = 200;
  std::vector<int> rpc_benches{1, 2, 3, 4, 5, 6};
  std::string rpc_profile = "cxl-asic-1500";
};

struct SimConfig {
  std::string profile = "cxl-fpga-400";
  std::uint64_t seed = 1;
  DeviceKind device = DeviceKind::CxlNic;
  std::string out_dir = ".";
  std::uint64_t max_events = Simulator::kDefaultMaxEvents;
  LatencyConfig latency;
  DmaConfig dma;
  Topology topology;
  NicConfig nic;
  WorkloadConfig workload;
  /// section.key -> value as written, for keys set by the file.
  std::map<std::string, std::string> overrides;

  /// Resolved configuration in the same grammar load_config reads.
  std::string render() const;
  /// FNV-1a of render(), as 16 hex digits.
  std::string digest() const;
};

/// Profile defaults with no overrides.
SimConfig default_config(std::string_view profile);
SimConfig parse_config(std::istream& is, std::string_view source = "<config>");
SimConfig parse_config_text(std::string_view text);
/// Throws ConfigError naming the offending key and line.
SimConfig load_config(const std::string& path);

struct Metric {
  std::string name;
  StatSeries series;
};

struct Report {
  std::string experiment;
  std::string config_digest;
  std::string config_text;
  std::vector<Metric> metrics;

  Metric& add(std::string name, std::string unit);
  const Metric& at(std::string_view name) const;
  bool has(std::string_view name) const;
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> n{"numa-latency", "tier-latency", "tier-bandwidth",
                                          "dma-sweep",    "rao",          "rpc"};
  return n;
}

struct RunOptions {
  std::ostream* coherence_trace = nullptr;
  std::ostream* nic_trace = nullptr;
};

/// Throws UsageError for an unknown suite; simulation faults are rethrown
/// as SimFault prefixed with the experiment name.
Report run_experiment(std::string_view suite, const SimConfig& cfg, const RunOptions& opt = {});

std::string render_csv(const Report& r);
std::string render_json(const Report& r);
std::string render_raw(const Report& r);
/// Writes <path> and <path>.raw. Throws std::runtime_error naming the path.
void emit_report(const Report& r, std::string_view format, const std::string& path);

struct CalibrationRow {
  std::string metric;
  std::string unit;
  double target = 0;
  double measured = 0;
  double tolerance_pct = 0;
  double error_pct() const;
  bool pass() const { return error_pct() <= tolerance_pct; }
};

struct CalibrationResult {
  std::string profile;
  std::vector<CalibrationRow> rows;
  double mape = 0;
  bool pass = false;
};

/// Golden targets for a shipped profile (CXL rows for cxl-*, DMA rows for pcie-*).
std::vector<CalibrationRow> golden_table(std::string_view profile);
CalibrationResult calibrate_check(const SimConfig& cfg);
std::string render_calibration(const CalibrationResult& c);

// Lower-level measurements shared by the suites and the tests.
StatSeries measure_tier_latency(const SimConfig& cfg, Tier tier, int node,
                                std::uint32_t trials, std::ostream* coh_trace = nullptr);
StatSeries measure_tier_bandwidth(const SimConfig& cfg, Tier tier, std::uint32_t trials,
                                  std::ostream* coh_trace = nullptr);
double dma_isolated_latency_ns(const DmaConfig& dma, std::uint64_t size);
double dma_stream_gbps(const DmaConfig& dma, std::uint64_t size, std::uint32_t count);

struct RaoResult {
  double makespan_ns = 0;
  std::uint64_t ops = 0;
  std::uint64_t errors = 0;
  double mops() const { return makespan_ns > 0 ? ops * 1000.0 / makespan_ns : 0; }
};
RaoResult run_rao(const SimConfig& cfg, const Profile& profile, DeviceKind dev,
                  const std::vector<RaoRequest>& reqs, const RunOptions& opt = {});

struct RpcBenchResult {
  int bench = 0;
  double deser_cxl_ns = 0;
  double deser_rpcnic_ns = 0;
  double ser_rpcnic_ns = 0;
  double ser_cxl_mem_ns = 0;
  double ser_cxl_cache_ns = 0;
  double ser_cxl_prefetch_ns = 0;
  double construct_host_ns = 0;
  double construct_device_ns = 0;
};
RpcBenchResult run_rpc_bench(const SimConfig& cfg, const Profile& profile, int bench,
                             std::uint32_t messages, const RunOptions& opt = {});

}  // namespace cxlsim
