#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "cxlsim/harness.hpp"
#include "cxlsim/nic.hpp"
#include "cxlsim/workloads.hpp"

using namespace cxlsim;

TEST(GenLsu, HmcLatencyTrialsRepeatAddresses) {
  const LsuTrace t = gen_lsu(Tier::HMC, LsuMode::Latency, 7);
  EXPECT_EQ(t.accesses.size(), kLatencyLines);
  EXPECT_EQ(t.repeat, kLatencyTrials);
  EXPECT_EQ(t.trial(1), t.trial(0));
  for (const auto& w : t.warmup) EXPECT_EQ(w.place, Tier::HMC);
  EXPECT_THROW(t.trial(kLatencyTrials), UsageError);
}

TEST(GenLsu, AddressesAreOnRequestedNode) {
  const MemoryMap m;
  const LsuTrace t = gen_lsu(Tier::MEM, LsuMode::Bandwidth, 3, m);
  EXPECT_EQ(t.accesses.size(), kBandwidthLines);
  std::set<std::uint64_t> uniq;
  for (const auto& a : t.accesses) {
    EXPECT_EQ(m.node_of(a.line), 3);
    EXPECT_EQ(a.line.offset(), 0u);
    uniq.insert(a.line.value);
  }
  EXPECT_EQ(uniq.size(), kBandwidthLines);
}

TEST(GenLsu, RejectsL1AndBadNode) {
  EXPECT_THROW(gen_lsu(Tier::L1, LsuMode::Latency, 7), UsageError);
  EXPECT_THROW(gen_lsu(Tier::MEM, LsuMode::Latency, 8), ConfigError);
}

TEST(GenLsu, Node3MemoryMedian) {
  const SimConfig cfg = default_config("cxl-fpga-400");
  EXPECT_NEAR(measure_tier_latency(cfg, Tier::MEM, 3, 10).median(), 776.0, 776.0 * 0.02);
}

TEST(GenLsu, TraceTextRoundtrip) {
  const LsuTrace t = gen_lsu(Tier::LLC, LsuMode::Latency, 5);
  std::stringstream ss;
  write_lsu_trace(ss, t);
  const LsuTrace back = read_lsu_trace(ss);
  ASSERT_EQ(back.accesses.size(), t.accesses.size());
  EXPECT_EQ(back.repeat, t.repeat);
  for (std::size_t i = 0; i < t.accesses.size(); ++i) {
    EXPECT_EQ(back.accesses[i].line, t.accesses[i].line);
  }
  EXPECT_EQ(back.warmup.size(), t.warmup.size());
  std::stringstream bad("lode 0x40 64\n");
  EXPECT_THROW(read_lsu_trace(bad), ConfigError);
}

TEST(RaoApply, Semantics) {
  EXPECT_EQ(rao_apply({RaoOp::FAA, {}, 3, 0, 0}, 4), 7u);
  EXPECT_EQ(rao_apply({RaoOp::CAS, {}, 5, 9, 0}, 5), 9u);
  EXPECT_EQ(rao_apply({RaoOp::CAS, {}, 5, 9, 0}, 9), 9u);
  EXPECT_EQ(rao_apply({RaoOp::SWAP, {}, 1, 0, 0}, 8), 1u);
  EXPECT_EQ(rao_apply({RaoOp::AND, {}, 6, 0, 0}, 3), 2u);
  EXPECT_EQ(rao_apply({RaoOp::OR, {}, 6, 0, 0}, 3), 7u);
  EXPECT_EQ(rao_apply({RaoOp::XOR, {}, 6, 0, 0}, 3), 5u);
  for (RaoOp op : {RaoOp::FAA, RaoOp::CAS, RaoOp::SWAP, RaoOp::AND, RaoOp::OR, RaoOp::XOR}) {
    EXPECT_EQ(parse_rao_op(to_string(op)), op);
  }
  EXPECT_THROW(parse_rao_op("FAD"), ConfigError);
}

TEST(CircusTent, CentralHitsOneAddress) {
  CircusPattern p{CircusKind::CENTRAL, 4, Address(1 << 20), 1 << 20, 1};
  const auto r = gen_circustent(p);
  ASSERT_EQ(r.size(), 4u);
  for (const auto& x : r) EXPECT_EQ(x.target, r.front().target);
}

TEST(CircusTent, Stride1SpansTwoLines) {
  CircusPattern p{CircusKind::STRIDE1, 16, Address(1 << 20), 1 << 20, 1};
  std::set<std::uint64_t> lines;
  for (const auto& x : gen_circustent(p)) lines.insert(x.target.line().value);
  EXPECT_EQ(lines.size(), 2u);
}

TEST(CircusTent, PatternsStayInRegionAndAligned) {
  for (CircusKind k : circus_kinds()) {
    CircusPattern p{k, 1000, Address(1 << 20), 1 << 16, 3};
    const auto r = gen_circustent(p);
    EXPECT_EQ(r.size(), 1000u);
    for (const auto& x : r) {
      EXPECT_GE(x.target.value, p.region_base.value);
      EXPECT_LT(x.target.value, p.region_base.value + p.region_bytes);
      EXPECT_EQ(x.target.value % 8, 0u);
    }
    EXPECT_EQ(parse_circus_kind(to_string(k)), k);
    EXPECT_EQ(gen_circustent(p).front().target, r.front().target);
  }
  EXPECT_THROW(gen_circustent({CircusKind::RAND, 0, Address(0), 1 << 20, 1}), UsageError);
  EXPECT_THROW(gen_circustent({CircusKind::RAND, 1, Address(0), 32, 1}), UsageError);
}

TEST(CircusTent, RandHasNearZeroHmcHitRate) {
  const SimConfig cfg = default_config("cxl-asic-1500");
  Simulator sim;
  CoherentSystem coh(sim, cfg.latency, cfg.topology);
  CxlRaoNic nic(sim, coh, cfg.nic);
  CircusPattern p{CircusKind::RAND, 10000, cfg.topology.map.node_base(7), 1ULL << 30, 1};
  for (const auto& r : gen_circustent(p)) nic.submit(r, nullptr);
  sim.run_to_completion();
  const double hits = static_cast<double>(coh.hmc_hits());
  EXPECT_LT(hits / static_cast<double>(coh.hmc_hits() + coh.hmc_misses()), 0.01);
}

TEST(CircusTent, RaoTraceRoundtrip) {
  CircusPattern p{CircusKind::SG, 50, Address(1 << 20), 1 << 20, 2};
  const auto r = gen_circustent(p);
  std::stringstream ss;
  write_rao_trace(ss, r);
  const auto back = read_rao_trace(ss);
  ASSERT_EQ(back.size(), r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(back[i].target, r[i].target);
    EXPECT_EQ(back[i].operand_a, r[i].operand_a);
    EXPECT_EQ(back[i].op, r[i].op);
  }
}

TEST(RpcBench, SizeClassBoundaries) {
  EXPECT_EQ(size_class(32), SizeClass::Small);
  EXPECT_EQ(size_class(33), SizeClass::Medium);
  EXPECT_EQ(size_class(512), SizeClass::Medium);
  EXPECT_EQ(size_class(513), SizeClass::Large);
}

TEST(RpcBench, Bench5FieldsDwarfBench1) {
  const auto b1 = gen_rpc_bench(1, 500, 1);
  const auto b5 = gen_rpc_bench(5, 500, 1);
  EXPECT_GT(mean_field_bytes(b5), 20 * mean_field_bytes(b1));
}

TEST(RpcBench, Bench2NestsAtLeastTenDeep) {
  EXPECT_GE(max_depth(gen_rpc_bench(2, 500, 1)), 10u);
}

TEST(RpcBench, SizeQuotas) {
  for (int b = 1; b <= 6; ++b) {
    const auto bench = gen_rpc_bench(b, b == 1 ? 100000 : 2000, 11);
    std::size_t small = 0, medium = 0;
    for (const auto& m : bench.messages) {
      const auto c = size_class(wire::encoded_size(m, bench.schema));
      small += c == SizeClass::Small;
      medium += c == SizeClass::Medium;
    }
    const double n = static_cast<double>(bench.messages.size());
    EXPECT_NEAR(small / n, 0.56, 0.03) << "bench " << b;
    EXPECT_NEAR(medium / n, 0.37, 0.03) << "bench " << b;
  }
}

TEST(RpcBench, DeterministicAndRoundtrips) {
  const auto a = gen_rpc_bench(3, 200, 5);
  const auto b = gen_rpc_bench(3, 200, 5);
  ASSERT_EQ(a.messages.size(), b.messages.size());
  a.schema.validate();
  for (std::size_t i = 0; i < a.messages.size(); ++i) {
    EXPECT_EQ(a.messages[i], b.messages[i]);
    EXPECT_EQ(wire::decode_message(wire::encode_message(a.messages[i], a.schema), a.schema),
              a.messages[i]);
  }
  EXPECT_THROW(gen_rpc_bench(7, 1, 1), ConfigError);
}
