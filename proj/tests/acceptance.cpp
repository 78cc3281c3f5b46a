#include <algorithm>
#include <cstdio>
#include <cstring>
#include <exception>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "coherence_driver.hpp"
#include "cxlsim/harness.hpp"
#include "cxlsim/nic.hpp"
#include "cxlsim/protowire.hpp"
#include "test_support.hpp"

using namespace cxlsim;

namespace {

struct Check {
  std::ostringstream notes;
  bool ok = true;
  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      notes << " [" << what << "]";
    }
  }
  void within(double v, double target, double frac, const std::string& what) {
    std::ostringstream s;
    s << what << "=" << v << " want " << target << "+-" << frac * 100 << "%";
    expect(v >= target * (1 - frac) && v <= target * (1 + frac), s.str());
  }
  void in_band(double v, double lo, double hi, const std::string& what) {
    std::ostringstream s;
    s << what << "=" << v << " want [" << lo << "," << hi << "]";
    expect(v >= lo && v <= hi, s.str());
  }
};

SimConfig shipped(const char* name) {
  return load_config(std::string(CXLSIM_CONFIG_DIR) + "/" + name);
}

double med(const Report& r, const std::string& m) { return r.at(m).series.median(); }

void c1(Check& c) {
  const Report r = run_experiment("tier-latency", default_config("cxl-fpga-400"));
  c.within(med(r, "HMC"), 115.0, 0.02, "HMC");
  c.within(med(r, "LLC"), 575.6, 0.02, "LLC");
  c.within(med(r, "MEM"), 688.3, 0.02, "MEM");
}

void c2(Check& c) {
  const SimConfig cfg = default_config("cxl-fpga-400");
  const Report r = run_experiment("numa-latency", cfg);
  c.within(med(r, "node7"), 688.0, 0.02, "node7");
  c.within(med(r, "node3"), 776.0, 0.02, "node3");
  for (int a = 0; a < kNumaNodes; ++a) {
    for (int b = 0; b < kNumaNodes; ++b) {
      if (cfg.latency.numa_adders[a] < cfg.latency.numa_adders[b]) {
        c.expect(med(r, "node" + std::to_string(a)) < med(r, "node" + std::to_string(b)),
                 "monotone node" + std::to_string(a) + "<node" + std::to_string(b));
      }
    }
  }
}

void c3(Check& c) {
  const SimConfig cfg = default_config("cxl-fpga-400");
  c.expect(kBandwidthLines == 2048, "stream length 2048");
  const Report r = run_experiment("tier-bandwidth", cfg);
  c.expect(med(r, "HMC") >= 0.97 * 25.6, "HMC=" + std::to_string(med(r, "HMC")));
  c.within(med(r, "LLC"), 14.10, 0.05, "LLC");
  c.within(med(r, "MEM"), 13.49, 0.05, "MEM");
}

void c4(Check& c) {
  const SimConfig cfg = default_config("cxl-fpga-400");
  const Report r = run_experiment("dma-sweep", cfg);
  double lo = 1e300, hi = 0;
  for (std::uint64_t s = 64; s < 8192; s *= 2) {
    const double v = med(r, "latency." + std::to_string(s) + "B");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  c.expect(hi <= lo * 1.10, "latency flat [64B,8KB)");
  c.within(lo, 2500.0, 0.10, "isolated latency");
  c.within(med(r, "bandwidth.64B"), 0.92, 0.05, "bw64B");
  c.within(med(r, "bandwidth.262144B"), 22.9, 0.05, "bw256KB");
  const CalibrationResult cal = calibrate_check(cfg);
  c.expect(cal.mape <= 3.0, "MAPE=" + std::to_string(cal.mape));
}

void c5(Check& c) {
  const SimConfig cfg = shipped("rao.ini");
  c.expect(cfg.workload.rao_cxl_profile == "cxl-asic-1500" &&
               cfg.workload.rao_pcie_profile == "pcie-asic-1500",
           "ASIC profiles");
  const Report r = run_experiment("rao", cfg);
  auto sp = [&](const char* k) { return med(r, std::string(k) + ".speedup"); };
  c.in_band(sp("CENTRAL"), 30, 50, "CENTRAL");
  c.in_band(sp("STRIDE1"), 16, 28, "STRIDE1");
  c.in_band(sp("RAND"), 4, 8, "RAND");
  for (const char* mid : {"SCATTER", "GATHER", "SG"}) {
    c.expect(sp("STRIDE1") > sp(mid) && sp(mid) > sp("RAND"), std::string("order ") + mid);
  }
  c.expect(sp("CENTRAL") > sp("STRIDE1"), "CENTRAL>STRIDE1");
}

void c6(Check& c) {
  const SimConfig cfg = shipped("rpc.ini");
  const Report r = run_experiment("rpc", cfg);
  std::vector<double> deser;
  double gain_sum = 0;
  for (int b : cfg.workload.rpc_benches) {
    const std::string p = "bench" + std::to_string(b) + ".";
    const double d = med(r, p + "deser_speedup");
    deser.push_back(d);
    c.in_band(d, 1.2, 2.2, p + "deser");
    const double mem = med(r, p + "ser_speedup.cxl-mem");
    const double pf = med(r, p + "ser_speedup.cxl-cache+prefetch");
    const double cache = med(r, p + "ser_speedup.cxl-cache");
    c.expect(mem > pf && pf > cache && cache > 1.0, p + "ser ordering");
    c.in_band(mem, 1.8, 4.5, p + "cxl-mem");
    const double g = med(r, p + "prefetch_gain");
    c.expect(g >= 3.0, p + "prefetch_gain>=3");
    gain_sum += g;
  }
  c.expect(cfg.workload.rpc_benches.front() == 1 && cfg.workload.rpc_benches.back() == 6,
           "benches 1..6");
  const auto first_bench = cfg.workload.rpc_benches.begin();
  auto at = [&](int b) {
    return deser[static_cast<std::size_t>(
        std::find(first_bench, cfg.workload.rpc_benches.end(), b) - first_bench)];
  };
  c.expect(at(1) == *std::max_element(deser.begin(), deser.end()), "Bench1 maximal");
  c.expect(at(5) == *std::min_element(deser.begin(), deser.end()), "Bench5 minimal");
  c.within(gain_sum / static_cast<double>(deser.size()), 12.0, 0.5, "avg prefetch gain");
}

void c7(Check& c) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto o = fixtures::run_coherence_property(seed, 100000);
    const std::string s = "seed" + std::to_string(seed) + " ";
    c.expect(o.ops == 100000, s + "ops");
    c.expect(o.swmr_violations == 0, s + "SWMR");
    c.expect(o.data_violations == 0, s + "data");
    c.expect(o.quiescent && o.directory_mismatches == 0, s + "directory");
    c.expect(o.conservation_violations == 0, s + "Go matching");
    c.expect(o.locked_snoop_violations == 0, s + "locked snoop");
    c.expect(o.rao_ops > 0 && o.pushes > 0 && o.evictions > 0, s + "mix");
  }
}

void c8(Check& c) {
  const Profile p = lookup_profile("cxl-fpga-400");
  Simulator sim;
  NicConfig cfg;
  CoherentSystem coh(sim, p.latency);
  const Address x = MemoryMap{}.node_base(7) + 4096;
  CxlRaoNic nic(sim, coh, cfg);
  std::vector<std::uint64_t> olds;
  for (std::uint32_t pe = 0; pe < 4; ++pe) {
    for (int i = 0; i < 250; ++i) {
      nic.submit({RaoOp::FAA, x, 1, 0, pe},
                 [&](const RaoResponse& r) { olds.push_back(r.old_value); });
    }
  }
  sim.run_to_completion();
  std::uint64_t v = 0;
  coh.host_access(0, AccessKind::Load, x, {},
                  [&](const AccessResult& r) { std::memcpy(&v, r.data.data() + x.offset(), 8); });
  sim.run_to_completion();
  c.expect(v == 1000, "final=" + std::to_string(v));
  std::sort(olds.begin(), olds.end());
  std::vector<std::uint64_t> want(1000);
  std::iota(want.begin(), want.end(), 0);
  c.expect(olds == want, "old_value multiset");
}

void c9(Check& c) {
  using namespace wire;
  using Bytes = std::vector<std::uint8_t>;
  c.expect(varint_encode(0) == Bytes{0x00}, "varint 0");
  c.expect(varint_encode(300) == Bytes{0xAC, 0x02}, "varint 300");
  RpcSchema s1;
  s1.types.push_back({"M", {{1, WireType::Varint, FieldKind::Scalar, 0}}});
  Message m1;
  m1.fields.push_back(Field{1, 0, {}, {}});
  c.expect(encode_message(m1, s1).bytes.front() == 0x08, "key 0x08");
  RpcSchema s2;
  s2.types.push_back({"O", {{2, WireType::LengthDelimited, FieldKind::Nested, 1}}});
  s2.types.push_back({"I", {{1, WireType::LengthDelimited, FieldKind::Bytes, 0}}});
  Message in;
  in.type = 1;
  in.fields.push_back(Field{1, 0, "abc", {}});
  Message out;
  Field f;
  f.number = 2;
  f.sub.push_back(in);
  out.fields.push_back(f);
  c.expect(encode_message(out, s2).bytes.front() == 0x12, "key 0x12");

  RandomStream r(2024, "acceptance.varint");
  std::uint64_t bad = 0;
  for (int i = 0; i < 1000000; ++i) {
    const auto v = fixtures::random_varint_value(r);
    const auto e = varint_encode(v);
    const auto d = varint_decode(e);
    if (d.value != v || d.consumed != e.size()) ++bad;
  }
  c.expect(bad == 0, "varint roundtrip failures=" + std::to_string(bad));
  const RpcSchema s = fixtures::codec_schema();
  RandomStream mr(2024, "acceptance.codec");
  bad = 0;
  for (int i = 0; i < 1000000; ++i) {
    const Message m = fixtures::random_message(s, 0, mr);
    if (!(decode_message(encode_message(m, s), s) == m)) ++bad;
  }
  c.expect(bad == 0, "message roundtrip failures=" + std::to_string(bad));
}

void c10(Check& c) {
  SimConfig cfg = default_config("cxl-fpga-400");
  cfg.seed = 77;
  cfg.workload.latency_trials = 50;
  cfg.workload.rao_ops = 5000;
  cfg.workload.rpc_messages = 40;
  for (const char* suite : {"tier-latency", "tier-bandwidth", "numa-latency", "dma-sweep",
                            "rao", "rpc"}) {
    const std::string a = render_csv(run_experiment(suite, cfg));
    const std::string b = render_csv(run_experiment(suite, cfg));
    c.expect(a == b, suite);
  }
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<void(Check&)>>> criteria = {
      {"calibration latencies", c1}, {"NUMA table", c2},
      {"calibration bandwidths", c3}, {"DMA model and MAPE", c4},
      {"RAO speedups", c5},          {"RPC trends", c6},
      {"coherence properties", c7},  {"RAO atomicity oracle", c8},
      {"codec oracle", c9},          {"determinism", c10},
  };
  int failed = 0;
  int n = 0;
  for (const auto& [name, fn] : criteria) {
    ++n;
    Check c;
    try {
      fn(c);
    } catch (const std::exception& e) {
      c.ok = false;
      c.notes << " [exception: " << e.what() << "]";
    }
    std::printf("%s criterion %d: %s%s\n", c.ok ? "PASS" : "FAIL", n, name,
                c.ok ? "" : c.notes.str().c_str());
    std::fflush(stdout);
    if (!c.ok) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
