// Workload generators: LSU calibration traces, CircusTent RAO streams and
// synthetic RPC benches, plus a line-oriented text format for replay.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "cxlsim/coherence.hpp"
#include "cxlsim/protowire.hpp"

namespace cxlsim {

// --- LSU ---------------------------------------------------------------------

enum class LsuMode : std::uint8_t { Latency, Bandwidth };

struct LsuAccess {
  AccessKind kind = AccessKind::Load;
  Address line;
};

struct WarmupDirective {
  Address line;
  Tier place = Tier::MEM;
};

/// One trial's accesses, repeated `repeat` times. Warm-up directives are
/// applied before every trial.
struct LsuTrace {
  Tier tier = Tier::LLC;
  LsuMode mode = LsuMode::Latency;
  int node = 7;
  std::vector<LsuAccess> accesses;
  std::vector<WarmupDirective> warmup;
  std::uint32_t repeat = 1;

  /// Addresses touched by trial `i` (all trials reuse the same lines).
  std::vector<Address> trial(std::uint32_t i) const;
};

inline constexpr std::uint32_t kLatencyLines = 32;
inline constexpr std::uint32_t kLatencyTrials = 1000;
inline constexpr std::uint32_t kBandwidthLines = 2048;
inline constexpr std::uint32_t kBandwidthTrials = 10;

/// tier L1 is rejected with UsageError; node must be a valid NUMA node.
LsuTrace gen_lsu(Tier tier, LsuMode mode, int node, const MemoryMap& map = {});

// --- RAO ---------------------------------------------------------------------

enum class RaoOp : std::uint8_t { FAA, CAS, SWAP, AND, OR, XOR };

struct RaoRequest {
  RaoOp op = RaoOp::FAA;
  Address target;
  std::uint64_t operand_a = 0;
  std::uint64_t operand_b = 0;
  std::uint32_t source = 0;
};

struct RaoResponse {
  std::uint64_t old_value = 0;
  SimTime issued;
  SimTime completion;
  bool error = false;
  Tier tier = Tier::HMC;
};

/// The value stored by `op` given the old value.
std::uint64_t rao_apply(const RaoRequest& r, std::uint64_t old_value);

enum class CircusKind : std::uint8_t { CENTRAL, STRIDE1, SCATTER, GATHER, SG, RAND };

struct CircusPattern {
  CircusKind kind = CircusKind::CENTRAL;
  std::uint64_t n_ops = 1;
  Address region_base;
  std::uint64_t region_bytes = 1ULL << 30;
  std::uint64_t seed = 1;
};

const std::vector<CircusKind>& circus_kinds();
std::string_view to_string(CircusKind k);
CircusKind parse_circus_kind(std::string_view s);
std::string_view to_string(RaoOp op);
RaoOp parse_rao_op(std::string_view s);

/// Throws UsageError when region_bytes < 64 or n_ops == 0.
std::vector<RaoRequest> gen_circustent(const CircusPattern& p);

// --- RPC ---------------------------------------------------------------------

enum class SizeClass : std::uint8_t { Small, Medium, Large };
/// Small: <= 32 B, Medium: 33..512 B, Large: > 512 B (encoded size).
SizeClass size_class(std::size_t encoded_bytes);

/// Every message in a bench shares the bench's schema.
struct RpcBench {
  int bench = 1;
  wire::RpcSchema schema;
  std::vector<wire::Message> messages;
};

/// bench in 1..6; message sizes follow the 56/37/7 % class quotas.
RpcBench gen_rpc_bench(int bench, std::size_t n_messages, std::uint64_t seed);

/// Mean encoded bytes per leaf (scalar or string) field.
double mean_field_bytes(const RpcBench& b);
std::uint32_t max_depth(const RpcBench& b);

// --- Text traces -------------------------------------------------------------
//
//   # comment
//   place <addr-hex> 64 <HMC|LLC|MEM>
//   load  <addr-hex> 64
//   store <addr-hex> 64
//   <FAA|CAS|SWAP|AND|OR|XOR> <addr-hex> 8 <operand_a> <operand_b> <source>
//   repeat <n>

void write_lsu_trace(std::ostream& os, const LsuTrace& t);
LsuTrace read_lsu_trace(std::istream& is);
void write_rao_trace(std::ostream& os, const std::vector<RaoRequest>& reqs);
std::vector<RaoRequest> read_rao_trace(std::istream& is);

}  // namespace cxlsim
