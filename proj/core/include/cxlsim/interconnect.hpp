// Link timing: CXL.cache latency adders and credits, host-side occupancy,
// NUMA penalties, and the PCIe DMA engine baseline.

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cxlsim/engine.hpp"
#include "cxlsim/protocol.hpp"

namespace cxlsim {

inline constexpr int kNumaNodes = 8;

/// CXL.cache timing. All durations are nanoseconds.
struct LatencyConfig {
  double t_hmc_hit = 115.0;
  double t_link_d2h = 200.0;
  double t_link_h2d = 200.0;
  double t_llc_service = 60.6;
  double t_dram = 112.7;
  double t_cxlmem_adder = 150.0;
  /// LLC pipeline interval consumed by each device request.
  double host_occupancy = 4.54;
  /// Memory-channel interval per line read.
  double mem_occupancy = 4.744;
  /// HMC port interval per device access.
  double hmc_occupancy = 2.553;
  /// Core L1 hit latency (host-side timing is otherwise folded into tiers).
  double t_l1_hit = 1.0;
  std::uint32_t credits = 256;
  std::uint32_t device_mhz = 400;
  std::array<double, kNumaNodes> numa_adders{70, 73, 82, 88, 22, 20, 5, 0};

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
};

struct DmaConfig {
  double t_setup = 2497.2;
  double t_desc_issue = 66.787;
  std::uint32_t link_bytes_per_cycle = 64;
  std::uint32_t freq_mhz = 400;
  /// Fraction of the raw link rate left for payload after TLP framing.
  double link_efficiency = 0.9;
  std::uint32_t max_outstanding = 64;
  bool write_ack_required = true;

  /// Raw link bandwidth in bytes per ns (== GB/s).
  double peak_gbps() const {
    return static_cast<double>(link_bytes_per_cycle) * freq_mhz / 1000.0;
  }
  double payload_gbps() const { return peak_gbps() * link_efficiency; }
  SimTime transfer_time(std::uint64_t bytes) const {
    return SimTime::from_ns(static_cast<double>(bytes) / payload_gbps());
  }
  void validate() const;
};

struct Profile {
  std::string name;
  LatencyConfig latency;
  DmaConfig dma;
};

/// Shipped profiles: cxl-fpga-400, pcie-fpga-400, cxl-asic-1500, pcie-asic-1500.
const std::vector<std::string>& profile_names();
/// Throws ConfigError for unknown names.
Profile lookup_profile(std::string_view name);
/// The shipped profiles as structured text (same grammar as run configs).
std::string_view profiles_text();

/// Additive memory-leg latency for a NUMA node. Throws ConfigError if the
/// node is outside the configured topology.
double numa_penalty(const LatencyConfig& cfg, int node);

// ---------------------------------------------------------------------------

/// A server that accepts one job per `interval`; returns the start time of a
/// job that becomes ready at `ready`.
class OccupancyServer {
 public:
  explicit OccupancyServer(SimTime interval = SimTime()) : interval_(interval) {}
  SimTime reserve(SimTime ready) {
    const SimTime start = max(ready, free_at_);
    free_at_ = start + interval_;
    return start;
  }
  void set_interval(SimTime i) { interval_ = i; }

 private:
  SimTime interval_;
  SimTime free_at_;
};

/// Credit pool for outstanding D2H requests. Waiters are served FIFO.
class CreditPool {
 public:
  explicit CreditPool(std::uint32_t credits) : capacity_(credits) {}

  /// Runs `granted` immediately if a credit is free, otherwise queues it.
  void acquire(std::function<void()> granted);
  void release();

  std::uint32_t in_flight() const { return in_flight_; }
  std::uint32_t capacity() const { return capacity_; }
  std::uint32_t peak_in_flight() const { return peak_; }
  std::uint64_t acquired_total() const { return acquired_; }
  std::uint64_t released_total() const { return released_; }

 private:
  std::uint32_t capacity_;
  std::uint32_t in_flight_ = 0;
  std::uint32_t peak_ = 0;
  std::uint64_t acquired_ = 0;
  std::uint64_t released_ = 0;
  std::deque<std::function<void()>> waiters_;
};

/// The CXL link between the DCOH and the host. Requests on D2H-Req hold a
/// credit until their closing Go-class response is delivered.
class CxlLink {
 public:
  CxlLink(Simulator& sim, const LatencyConfig& cfg);

  void send_d2h(const ProtocolMessage& msg, std::function<void()> on_arrival);
  void send_h2d(const ProtocolMessage& msg, std::function<void()> on_arrival);

  const CreditPool& credits() const { return credits_; }

 private:
  Simulator& sim_;
  SimTime d2h_;
  SimTime h2d_;
  CreditPool credits_;
};

// ---------------------------------------------------------------------------

enum class DmaKind : std::uint8_t { Read, Write };

/// Descriptor-based DMA engine. An isolated transfer takes
/// t_setup + size/bw; descriptors issue no closer than
/// t_desc_issue + size/bw apart and at most max_outstanding are in flight.
class DmaEngine {
 public:
  struct Completion {
    SimTime issued;
    SimTime started;
    SimTime completed;
  };
  using Callback = std::function<void(const Completion&)>;

  DmaEngine(Simulator& sim, const DmaConfig& cfg);

  void transfer(DmaKind kind, Address base, std::uint64_t size, Callback done);

  /// Latency of a single transfer on an idle engine.
  SimTime isolated_latency(std::uint64_t size) const;
  /// Steady-state throughput (GB/s) of a stream of equal-sized descriptors.
  double steady_state_gbps(std::uint64_t size) const;

  std::uint64_t transfers() const { return transfers_; }
  const DmaConfig& config() const { return cfg_; }

 private:
  struct Pending {
    DmaKind kind;
    Address base;
    std::uint64_t size;
    SimTime issued;
    Callback done;
  };
  void try_start();

  Simulator& sim_;
  DmaConfig cfg_;
  SimTime engine_free_;
  std::uint32_t outstanding_ = 0;
  std::uint64_t transfers_ = 0;
  std::deque<Pending> queue_;
};

}  // namespace cxlsim
