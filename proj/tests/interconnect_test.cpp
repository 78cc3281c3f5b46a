#include <gtest/gtest.h>

#include "cxlsim/harness.hpp"
#include "cxlsim/interconnect.hpp"

using namespace cxlsim;

TEST(Profiles, ShippedNamesResolve) {
  for (const auto& n : profile_names()) EXPECT_EQ(lookup_profile(n).name, n);
  EXPECT_THROW(lookup_profile("cxl-fpga-401"), ConfigError);
  EXPECT_NE(profiles_text().find("[profile.cxl-asic-1500]"), std::string_view::npos);
}

TEST(Profiles, FpgaLatencySumsAreExact) {
  const LatencyConfig l = lookup_profile("cxl-fpga-400").latency;
  EXPECT_DOUBLE_EQ(l.t_hmc_hit, 115.0);
  EXPECT_NEAR(l.t_hmc_hit + l.t_link_d2h + l.t_llc_service + l.t_link_h2d, 575.6, 1e-9);
  EXPECT_NEAR(l.t_hmc_hit + l.t_link_d2h + l.t_llc_service + l.t_link_h2d + l.t_dram, 688.3,
              1e-9);
}

TEST(Profiles, AsicScalesDeviceSideOnly) {
  const Profile f = lookup_profile("cxl-fpga-400");
  const Profile a = lookup_profile("cxl-asic-1500");
  const double k = 400.0 / 1500.0;
  EXPECT_NEAR(a.latency.t_hmc_hit, f.latency.t_hmc_hit * k, 1e-9);
  EXPECT_NEAR(a.latency.t_link_d2h, f.latency.t_link_d2h * k, 1e-9);
  EXPECT_DOUBLE_EQ(a.latency.t_dram, f.latency.t_dram);
  EXPECT_DOUBLE_EQ(a.latency.t_llc_service, f.latency.t_llc_service);
  EXPECT_EQ(a.dma.freq_mhz, 1500u);
  EXPECT_LT(a.dma.t_setup, f.dma.t_setup);
  EXPECT_GT(a.dma.t_setup, f.latency.t_llc_service + f.latency.t_dram);
}

TEST(LatencyConfig, ValidationNamesField) {
  LatencyConfig l;
  l.t_dram = -1;
  try {
    l.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("t_dram"), std::string::npos);
  }
  LatencyConfig c;
  c.credits = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Numa, PenaltiesAndRange) {
  const LatencyConfig l;
  EXPECT_EQ(numa_penalty(l, 7), 0.0);
  EXPECT_NEAR(numa_penalty(l, 3), 88.0, 1e-9);
  EXPECT_THROW(numa_penalty(l, 8), ConfigError);
  EXPECT_THROW(numa_penalty(l, -1), ConfigError);
}

TEST(Numa, MemoryHitMediansFollowAdders) {
  const SimConfig cfg = default_config("cxl-fpga-400");
  const double n7 = measure_tier_latency(cfg, Tier::MEM, 7, 20).median();
  const double n3 = measure_tier_latency(cfg, Tier::MEM, 3, 20).median();
  EXPECT_NEAR(n7, 688.3, 688.3 * 0.02);
  EXPECT_NEAR(n3, 776.0, 776.0 * 0.02);
  EXPECT_NEAR(n3 - n7, numa_penalty(cfg.latency, 3), 1e-6);
}

TEST(Numa, ZeroAdderMatchesBaseline) {
  SimConfig cfg = default_config("cxl-fpga-400");
  const double base = measure_tier_latency(cfg, Tier::MEM, 7, 5).median();
  cfg.latency.numa_adders[2] = 0;
  EXPECT_DOUBLE_EQ(measure_tier_latency(cfg, Tier::MEM, 2, 5).median(), base);
}

TEST(LinkBandwidth, StreamsReachCalibratedRates) {
  const SimConfig cfg = default_config("cxl-fpga-400");
  EXPECT_NEAR(measure_tier_bandwidth(cfg, Tier::LLC, 2).median(), 14.10, 14.10 * 0.05);
  EXPECT_NEAR(measure_tier_bandwidth(cfg, Tier::MEM, 2).median(), 13.49, 13.49 * 0.05);
  EXPECT_GE(measure_tier_bandwidth(cfg, Tier::HMC, 2).median(), 0.97 * 25.6);
}

TEST(LinkBandwidth, NeverExceedsPeak) {
  SimConfig cfg = default_config("cxl-fpga-400");
  cfg.latency.host_occupancy = 0;
  cfg.latency.mem_occupancy = 0;
  for (Tier t : {Tier::HMC, Tier::LLC, Tier::MEM}) {
    EXPECT_LE(measure_tier_bandwidth(cfg, t, 1).median(), 25.6 + 1e-9);
  }
}

TEST(CreditPool, FifoWaitersAndConservation) {
  CreditPool p(2);
  std::vector<int> order;
  for (int i = 0; i < 5; ++i) p.acquire([&, i] { order.push_back(i); });
  EXPECT_EQ(order, (std::vector<int>{0, 1}));
  EXPECT_EQ(p.in_flight(), 2u);
  p.release();
  p.release();
  EXPECT_EQ(order, (std::vector<int>{0, 1, 2, 3}));
  p.release();
  p.release();
  p.release();
  EXPECT_EQ(p.in_flight(), 0u);
  EXPECT_EQ(p.peak_in_flight(), 2u);
  EXPECT_EQ(p.acquired_total(), p.released_total());
  EXPECT_THROW(p.release(), SimFault);
}

TEST(CreditPool, LinkHoldsCreditUntilClosingGo) {
  SimConfig cfg = default_config("cxl-fpga-400");
  cfg.latency.credits = 4;
  Simulator sim;
  CoherentSystem coh(sim, cfg.latency);
  const Address base = MemoryMap{}.node_base(7);
  for (int i = 0; i < 64; ++i) coh.device_load(base + i * 64, nullptr);
  sim.run_to_completion();
  EXPECT_EQ(coh.credits().peak_in_flight(), 4u);
  EXPECT_EQ(coh.credits().in_flight(), 0u);
  EXPECT_EQ(coh.credits().acquired_total(), coh.credits().released_total());
}

TEST(OccupancyServer, SerializesJobs) {
  OccupancyServer s(SimTime(10));
  EXPECT_EQ(s.reserve(SimTime(0)).ps(), 0u);
  EXPECT_EQ(s.reserve(SimTime(0)).ps(), 10u);
  EXPECT_EQ(s.reserve(SimTime(100)).ps(), 100u);
}

TEST(Dma, IsolatedLatencyNearTwoPointFiveMicroseconds) {
  const DmaConfig d = lookup_profile("pcie-fpga-400").dma;
  EXPECT_NEAR(dma_isolated_latency_ns(d, 64), 2500.0, 2500.0 * 0.02);
}

TEST(Dma, LatencyMonotoneInSize) {
  const DmaConfig d;
  double prev = 0;
  for (std::uint64_t s = 1; s <= (1u << 20); s *= 2) {
    const double l = dma_isolated_latency_ns(d, s);
    EXPECT_GE(l, prev);
    prev = l;
  }
}

TEST(Dma, StreamBandwidthEndpoints) {
  const DmaConfig d;
  EXPECT_NEAR(dma_stream_gbps(d, 64, 256), 0.92, 0.92 * 0.05);
  EXPECT_NEAR(dma_stream_gbps(d, 256 * 1024, 64), 22.9, 22.9 * 0.05);
  Simulator sim;
  DmaEngine e(sim, d);
  EXPECT_NEAR(e.steady_state_gbps(256 * 1024), 22.9, 22.9 * 0.05);
  EXPECT_LE(e.steady_state_gbps(1u << 30), d.peak_gbps());
}

TEST(Dma, OutstandingLimitAndZeroSize) {
  DmaConfig d;
  d.max_outstanding = 2;
  Simulator sim;
  DmaEngine e(sim, d);
  std::vector<SimTime> starts;
  for (int i = 0; i < 4; ++i) {
    e.transfer(DmaKind::Write, Address(0), 64,
               [&](const DmaEngine::Completion& c) { starts.push_back(c.started); });
  }
  sim.run_to_completion();
  ASSERT_EQ(starts.size(), 4u);
  EXPECT_GE(starts[2], SimTime::from_ns(d.t_setup));
  EXPECT_EQ(e.transfers(), 4u);
  EXPECT_THROW(e.transfer(DmaKind::Read, Address(0), 0, nullptr), UsageError);
}
