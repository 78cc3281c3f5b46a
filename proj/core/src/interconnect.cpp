#include "cxlsim/interconnect.hpp"

#include <algorithm>
#include <sstream>

namespace cxlsim {

namespace {

void require_nonneg(double v, const char* field) {
  if (!(v >= 0.0)) {
    throw ConfigError(std::string("field '") + field + "' must be >= 0");
  }
}

// 400 MHz FPGA profile, solved so the single-request tier latencies sum to
// 115 / 575.6 / 688.3 ns and the LLC/memory streams saturate at 14.10 and
// 13.49 GB/s.
LatencyConfig fpga_latency() { return LatencyConfig{}; }

DmaConfig fpga_dma() { return DmaConfig{}; }

// Device-side cycle counts are kept; host-side timing (LLC, DRAM, NUMA) is
// fixed wall-clock.
LatencyConfig scale_latency(LatencyConfig c, std::uint32_t from_mhz,
                            std::uint32_t to_mhz) {
  const double k = static_cast<double>(from_mhz) / to_mhz;
  c.t_hmc_hit *= k;
  c.t_link_d2h *= k;
  c.t_link_h2d *= k;
  c.hmc_occupancy *= k;
  c.device_mhz = to_mhz;
  return c;
}

// t_setup keeps host_fixed_ns unscaled
DmaConfig scale_dma(DmaConfig c, std::uint32_t from_mhz, std::uint32_t to_mhz,
                    double host_fixed_ns) {
  const double k = static_cast<double>(from_mhz) / to_mhz;
  c.t_setup = host_fixed_ns + (c.t_setup - host_fixed_ns) * k;
  c.t_desc_issue *= k;
  c.freq_mhz = to_mhz;
  return c;
}

std::string render_profiles() {
  std::ostringstream os;
  os.precision(10);
  for (const auto& name : profile_names()) {
    const Profile p = lookup_profile(name);
    const auto& l = p.latency;
    const auto& d = p.dma;
    os << "[profile." << name << "]\n";
    os << "latency.t_hmc_hit = " << l.t_hmc_hit << "\n";
    os << "latency.t_link_d2h = " << l.t_link_d2h << "\n";
    os << "latency.t_link_h2d = " << l.t_link_h2d << "\n";
    os << "latency.t_llc_service = " << l.t_llc_service << "\n";
    os << "latency.t_dram = " << l.t_dram << "\n";
    os << "latency.t_cxlmem_adder = " << l.t_cxlmem_adder << "\n";
    os << "latency.host_occupancy = " << l.host_occupancy << "\n";
    os << "latency.mem_occupancy = " << l.mem_occupancy << "\n";
    os << "latency.hmc_occupancy = " << l.hmc_occupancy << "\n";
    os << "latency.t_l1_hit = " << l.t_l1_hit << "\n";
    os << "latency.credits = " << l.credits << "\n";
    os << "latency.device_mhz = " << l.device_mhz << "\n";
    for (int n = 0; n < kNumaNodes; ++n) {
      os << "latency.numa_adder_" << n << " = " << l.numa_adders[n] << "\n";
    }
    os << "dma.t_setup = " << d.t_setup << "\n";
    os << "dma.t_desc_issue = " << d.t_desc_issue << "\n";
    os << "dma.link_bytes_per_cycle = " << d.link_bytes_per_cycle << "\n";
    os << "dma.freq_mhz = " << d.freq_mhz << "\n";
    os << "dma.link_efficiency = " << d.link_efficiency << "\n";
    os << "dma.max_outstanding = " << d.max_outstanding << "\n";
    os << "dma.write_ack_required = " << (d.write_ack_required ? 1 : 0) << "\n\n";
  }
  return os.str();
}

}  // namespace

void LatencyConfig::validate() const {
  require_nonneg(t_hmc_hit, "t_hmc_hit");
  require_nonneg(t_link_d2h, "t_link_d2h");
  require_nonneg(t_link_h2d, "t_link_h2d");
  require_nonneg(t_llc_service, "t_llc_service");
  require_nonneg(t_dram, "t_dram");
  require_nonneg(t_cxlmem_adder, "t_cxlmem_adder");
  require_nonneg(host_occupancy, "host_occupancy");
  require_nonneg(mem_occupancy, "mem_occupancy");
  require_nonneg(hmc_occupancy, "hmc_occupancy");
  require_nonneg(t_l1_hit, "t_l1_hit");
  for (double a : numa_adders) require_nonneg(a, "numa_adders");
  if (credits < 1) throw ConfigError("field 'credits' must be >= 1");
  if (device_mhz < 1) throw ConfigError("field 'device_mhz' must be >= 1");
}

void DmaConfig::validate() const {
  require_nonneg(t_setup, "t_setup");
  require_nonneg(t_desc_issue, "t_desc_issue");
  if (link_bytes_per_cycle < 1) {
    throw ConfigError("field 'link_bytes_per_cycle' must be >= 1");
  }
  if (freq_mhz < 1) throw ConfigError("field 'freq_mhz' must be >= 1");
  if (!(link_efficiency > 0.0 && link_efficiency <= 1.0)) {
    throw ConfigError("field 'link_efficiency' must be in (0,1]");
  }
  if (max_outstanding < 1) throw ConfigError("field 'max_outstanding' must be >= 1");
}

const std::vector<std::string>& profile_names() {
  static const std::vector<std::string> names{"cxl-fpga-400", "pcie-fpga-400",
                                              "cxl-asic-1500", "pcie-asic-1500"};
  return names;
}

Profile lookup_profile(std::string_view name) {
  if (name == "cxl-fpga-400" || name == "pcie-fpga-400") {
    return Profile{std::string(name), fpga_latency(), fpga_dma()};
  }
  if (name == "cxl-asic-1500" || name == "pcie-asic-1500") {
    return Profile{std::string(name), scale_latency(fpga_latency(), 400, 1500),
                   scale_dma(fpga_dma(), 400, 1500,
                             fpga_latency().t_llc_service + fpga_latency().t_dram)};
  }
  throw ConfigError("unknown profile '" + std::string(name) + "'");
}

std::string_view profiles_text() {
  static const std::string text = render_profiles();
  return text;
}

double numa_penalty(const LatencyConfig& cfg, int node) {
  if (node < 0 || node >= kNumaNodes) {
    throw ConfigError("unknown NUMA node " + std::to_string(node));
  }
  return cfg.numa_adders[static_cast<std::size_t>(node)];
}

// ---------------------------------------------------------------------------

void CreditPool::acquire(std::function<void()> granted) {
  if (in_flight_ < capacity_ && waiters_.empty()) {
    ++in_flight_;
    ++acquired_;
    peak_ = std::max(peak_, in_flight_);
    granted();
    return;
  }
  waiters_.push_back(std::move(granted));
}

void CreditPool::release() {
  if (in_flight_ == 0) throw SimFault("credit released twice");
  --in_flight_;
  ++released_;
  if (!waiters_.empty()) {
    auto next = std::move(waiters_.front());
    waiters_.pop_front();
    ++in_flight_;
    ++acquired_;
    peak_ = std::max(peak_, in_flight_);
    next();
  }
}

CxlLink::CxlLink(Simulator& sim, const LatencyConfig& cfg)
    : sim_(sim),
      d2h_(SimTime::from_ns(cfg.t_link_d2h)),
      h2d_(SimTime::from_ns(cfg.t_link_h2d)),
      credits_(cfg.credits) {}

void CxlLink::send_d2h(const ProtocolMessage& msg,
                       std::function<void()> on_arrival) {
  if (msg.channel == Channel::D2HReq) {
    credits_.acquire([this, cb = std::move(on_arrival)]() mutable {
      sim_.schedule(std::move(cb), d2h_);
    });
    return;
  }
  sim_.schedule(std::move(on_arrival), d2h_);
}

void CxlLink::send_h2d(const ProtocolMessage& msg,
                       std::function<void()> on_arrival) {
  const bool closes = msg.channel == Channel::H2DResp && is_final_go(msg.opcode);
  sim_.schedule(
      [this, closes, cb = std::move(on_arrival)]() {
        if (closes) credits_.release();
        cb();
      },
      h2d_);
}

// ---------------------------------------------------------------------------

DmaEngine::DmaEngine(Simulator& sim, const DmaConfig& cfg) : sim_(sim), cfg_(cfg) {
  cfg_.validate();
}

SimTime DmaEngine::isolated_latency(std::uint64_t size) const {
  return SimTime::from_ns(cfg_.t_setup) + cfg_.transfer_time(size);
}

double DmaEngine::steady_state_gbps(std::uint64_t size) const {
  const double interval =
      cfg_.t_desc_issue + static_cast<double>(size) / cfg_.payload_gbps();
  return static_cast<double>(size) / interval;
}

void DmaEngine::transfer(DmaKind kind, Address base, std::uint64_t size,
                         Callback done) {
  if (size == 0) throw UsageError("DMA transfer of zero bytes");
  queue_.push_back(Pending{kind, base, size, sim_.now(), std::move(done)});
  try_start();
}

void DmaEngine::try_start() {
  while (!queue_.empty() && outstanding_ < cfg_.max_outstanding) {
    Pending p = std::move(queue_.front());
    queue_.pop_front();
    const SimTime xfer = cfg_.transfer_time(p.size);
    const SimTime start = max(sim_.now(), engine_free_);
    engine_free_ = start + SimTime::from_ns(cfg_.t_desc_issue) + xfer;
    const SimTime done_at = start + SimTime::from_ns(cfg_.t_setup) + xfer;
    ++outstanding_;
    ++transfers_;
    sim_.schedule_at(done_at, [this, issued = p.issued, start, done_at,
                               cb = std::move(p.done)]() {
      --outstanding_;
      if (cb) cb(Completion{issued, start, done_at});
      try_start();
    });
  }
}

}  // namespace cxlsim
