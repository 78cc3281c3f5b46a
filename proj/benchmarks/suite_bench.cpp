#include <benchmark/benchmark.h>

#include "cxlsim/harness.hpp"

using namespace cxlsim;

static void BM_Suite(benchmark::State& state, const char* suite) {
  SimConfig cfg = default_config("cxl-fpga-400");
  cfg.workload.rao_ops = 5000;
  cfg.workload.rpc_messages = 50;
  for (auto _ : state) benchmark::DoNotOptimize(run_experiment(suite, cfg));
}
BENCHMARK_CAPTURE(BM_Suite, tier_latency, "tier-latency")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Suite, tier_bandwidth, "tier-bandwidth")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Suite, rao, "rao")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Suite, rpc, "rpc")->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
