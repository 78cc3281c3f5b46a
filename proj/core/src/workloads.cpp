#include "cxlsim/workloads.hpp"

#include <algorithm>
#include <array>
#include <cinttypes>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace cxlsim {

// ---------------------------------------------------------------------------
// LSU
// ---------------------------------------------------------------------------

std::vector<Address> LsuTrace::trial(std::uint32_t i) const {
  if (i >= repeat) throw UsageError("trial index out of range");
  std::vector<Address> out;
  out.reserve(accesses.size());
  for (const LsuAccess& a : accesses) out.push_back(a.line);
  return out;
}

LsuTrace gen_lsu(Tier tier, LsuMode mode, int node, const MemoryMap& map) {
  if (tier == Tier::L1) throw UsageError("gen_lsu: tier must be HMC, LLC or MEM");
  if (node < 0 || node >= kNumaNodes) {
    throw ConfigError("unknown NUMA node " + std::to_string(node));
  }
  LsuTrace t;
  t.tier = tier;
  t.mode = mode;
  t.node = node;
  const std::uint32_t lines =
      mode == LsuMode::Latency ? kLatencyLines : kBandwidthLines;
  t.repeat = mode == LsuMode::Latency ? kLatencyTrials : kBandwidthTrials;
  const Address base = map.node_base(node) + (1ULL << 20);
  for (std::uint32_t i = 0; i < lines; ++i) {
    const Address a = base + static_cast<std::uint64_t>(i) * kLineBytes;
    t.accesses.push_back({AccessKind::Load, a});
    t.warmup.push_back({a, tier});
  }
  return t;
}

// ---------------------------------------------------------------------------
// RAO / CircusTent
// ---------------------------------------------------------------------------

std::uint64_t rao_apply(const RaoRequest& r, std::uint64_t old) {
  switch (r.op) {
    case RaoOp::FAA: return old + r.operand_a;
    case RaoOp::CAS: return old == r.operand_a ? r.operand_b : old;
    case RaoOp::SWAP: return r.operand_a;
    case RaoOp::AND: return old & r.operand_a;
    case RaoOp::OR: return old | r.operand_a;
    case RaoOp::XOR: return old ^ r.operand_a;
  }
  return old;
}

const std::vector<CircusKind>& circus_kinds() {
  static const std::vector<CircusKind> k{CircusKind::CENTRAL, CircusKind::STRIDE1,
                                         CircusKind::SCATTER, CircusKind::GATHER,
                                         CircusKind::SG,      CircusKind::RAND};
  return k;
}

std::string_view to_string(CircusKind k) {
  switch (k) {
    case CircusKind::CENTRAL: return "CENTRAL";
    case CircusKind::STRIDE1: return "STRIDE1";
    case CircusKind::SCATTER: return "SCATTER";
    case CircusKind::GATHER: return "GATHER";
    case CircusKind::SG: return "SG";
    case CircusKind::RAND: return "RAND";
  }
  return "?";
}

CircusKind parse_circus_kind(std::string_view s) {
  for (CircusKind k : circus_kinds()) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown CircusTent pattern '" + std::string(s) + "'");
}

std::string_view to_string(RaoOp op) {
  switch (op) {
    case RaoOp::FAA: return "FAA";
    case RaoOp::CAS: return "CAS";
    case RaoOp::SWAP: return "SWAP";
    case RaoOp::AND: return "AND";
    case RaoOp::OR: return "OR";
    case RaoOp::XOR: return "XOR";
  }
  return "?";
}

RaoOp parse_rao_op(std::string_view s) {
  for (RaoOp op : {RaoOp::FAA, RaoOp::CAS, RaoOp::SWAP, RaoOp::AND, RaoOp::OR,
                   RaoOp::XOR}) {
    if (to_string(op) == s) return op;
  }
  throw ConfigError("unknown RAO op '" + std::string(s) + "'");
}

std::vector<RaoRequest> gen_circustent(const CircusPattern& p) {
  if (p.region_bytes < kLineBytes) throw UsageError("CircusTent region below 64 B");
  if (p.n_ops == 0) throw UsageError("CircusTent n_ops must be >= 1");
  RandomStream rng(p.seed, std::string("circustent.") + std::string(to_string(p.kind)));
  const std::uint64_t elems = p.region_bytes / 8;
  // Index array in the lower half, data array in the upper half.
  const std::uint64_t half = std::max<std::uint64_t>(1, elems / 2);
  const Address idx_base = p.region_base;
  const Address arr_base = p.region_base + half * 8;
  const std::uint64_t arr_elems = std::max<std::uint64_t>(1, elems - half);

  std::vector<RaoRequest> out;
  out.reserve(p.n_ops);
  auto push = [&](Address a, std::uint64_t operand) {
    if (out.size() < p.n_ops) out.push_back(RaoRequest{RaoOp::FAA, a, operand, 0, 0});
  };
  auto idx = [&](std::uint64_t j) { return idx_base + (j % half) * 8; };
  auto arr = [&](std::uint64_t j) { return arr_base + (j % arr_elems) * 8; };

  std::uint64_t j = 0;
  while (out.size() < p.n_ops) {
    switch (p.kind) {
      case CircusKind::CENTRAL:
        push(p.region_base, 1);
        break;
      case CircusKind::STRIDE1:
        push(p.region_base + (j % elems) * 8, 1);
        break;
      case CircusKind::RAND:
        push(p.region_base + rng.uniform(elems) * 8, 1);
        break;
      case CircusKind::SCATTER: {
        const std::uint64_t dest = rng.uniform(arr_elems);
        push(idx(j), 0);
        push(arr(j), 0);
        push(arr(dest), 1);
        break;
      }
      case CircusKind::GATHER: {
        const std::uint64_t src = rng.uniform(arr_elems);
        push(idx(j), 0);
        push(arr(src), 0);
        push(arr(j), 1);
        break;
      }
      case CircusKind::SG: {
        const std::uint64_t src = rng.uniform(arr_elems);
        const std::uint64_t dest = rng.uniform(arr_elems);
        push(idx(2 * j), 0);
        push(idx(2 * j + 1), 0);
        push(arr(src), 0);
        push(arr(dest), 1);
        break;
      }
    }
    ++j;
  }
  return out;
}

// ---------------------------------------------------------------------------
// RPC benches
// ---------------------------------------------------------------------------

SizeClass size_class(std::size_t n) {
  if (n <= 32) return SizeClass::Small;
  if (n <= 512) return SizeClass::Medium;
  return SizeClass::Large;
}

namespace {

struct Range {
  int lo;
  int hi;
};

struct ClassParams {
  Range scalars;
  Range strings;
  Range str_len;
  Range depth;
  int value_bits;
};

struct BenchProfile {
  int scalar_fields;
  int string_fields;
  int levels;
  std::array<ClassParams, 3> cls;  // Small, Medium, Large
};

const BenchProfile& bench_profile(int bench) {
  static const std::array<BenchProfile, 6> profiles{{
      // 1: many small scalars, shallow
      {64, 2, 3,
       {{{{2, 6}, {0, 0}, {1, 1}, {1, 1}, 7},
         {{8, 40}, {0, 1}, {1, 8}, {1, 2}, 14},
         {{48, 64}, {0, 2}, {1, 8}, {2, 3}, 21}}}},
      // 2: deep nesting
      {6, 2, 12,
       {{{{1, 2}, {0, 0}, {1, 1}, {1, 3}, 7},
         {{1, 4}, {0, 1}, {4, 24}, {4, 10}, 14},
         {{2, 6}, {1, 2}, {16, 64}, {10, 12}, 21}}}},
      // 3: mixed medium
      {16, 6, 4,
       {{{{1, 3}, {0, 1}, {1, 10}, {1, 1}, 14},
         {{3, 12}, {1, 4}, {8, 80}, {1, 3}, 21},
         {{6, 16}, {2, 6}, {64, 320}, {2, 4}, 28}}}},
      // 4: mixed medium, more scalars
      {24, 4, 5,
       {{{{2, 4}, {0, 1}, {1, 8}, {1, 2}, 14},
         {{6, 20}, {1, 3}, {8, 64}, {1, 3}, 21},
         {{12, 24}, {2, 4}, {64, 256}, {2, 5}, 28}}}},
      // 5: large strings
      {4, 8, 2,
       {{{{0, 1}, {1, 1}, {8, 24}, {1, 1}, 7},
         {{0, 2}, {1, 2}, {48, 240}, {1, 1}, 14},
         {{0, 2}, {1, 4}, {1024, 8192}, {1, 2}, 14}}}},
      // 6: mixed, moderate nesting
      {12, 8, 6,
       {{{{1, 3}, {0, 1}, {1, 8}, {1, 2}, 14},
         {{2, 8}, {1, 4}, {8, 64}, {2, 4}, 21},
         {{4, 12}, {2, 6}, {48, 256}, {3, 6}, 28}}}},
  }};
  if (bench < 1 || bench > 6) throw ConfigError("bench must be in 1..6");
  return profiles[static_cast<std::size_t>(bench - 1)];
}

wire::WireType scalar_wire(int i) {
  switch (i % 5) {
    case 2: return wire::WireType::Fixed32;
    case 4: return wire::WireType::Fixed64;
    default: return wire::WireType::Varint;
  }
}

wire::RpcSchema build_schema(int bench, const BenchProfile& bp) {
  wire::RpcSchema s;
  for (int level = 0; level < bp.levels; ++level) {
    wire::MessageType t;
    t.name = "Bench" + std::to_string(bench) + ".L" + std::to_string(level);
    std::uint32_t num = 1;
    for (int i = 0; i < bp.scalar_fields; ++i) {
      t.fields.push_back({num++, scalar_wire(i), wire::FieldKind::Scalar, 0});
    }
    for (int i = 0; i < bp.string_fields; ++i) {
      t.fields.push_back({num++, wire::WireType::LengthDelimited, wire::FieldKind::Bytes, 0});
    }
    if (level + 1 < bp.levels) {
      t.fields.push_back({num++, wire::WireType::LengthDelimited, wire::FieldKind::Nested,
                          static_cast<std::uint32_t>(level + 1)});
    }
    s.types.push_back(std::move(t));
  }
  s.root = 0;
  s.max_depth = 16;
  s.validate();
  return s;
}

int draw(RandomStream& rng, Range r) {
  return static_cast<int>(rng.uniform_range(static_cast<std::uint64_t>(r.lo),
                                            static_cast<std::uint64_t>(r.hi)));
}

std::vector<std::uint32_t> pick(RandomStream& rng, int n, int k) {
  std::vector<std::uint32_t> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(i);
  k = std::min(k, n);
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.uniform(static_cast<std::uint64_t>(n - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

wire::Message gen_level(RandomStream& rng, const wire::RpcSchema& s, const BenchProfile& bp,
                        const ClassParams& cp, std::uint32_t level, int depth) {
  const wire::MessageType& t = s.types[level];
  wire::Message m{level, {}};
  for (std::uint32_t i : pick(rng, bp.scalar_fields, draw(rng, cp.scalars))) {
    const wire::FieldSpec& spec = t.fields[i];
    wire::Field f;
    f.number = spec.number;
    const auto bits = static_cast<std::uint64_t>(1 + rng.uniform(static_cast<std::uint64_t>(cp.value_bits)));
    f.u = rng.next_u64() & (bits >= 64 ? ~0ULL : ((1ULL << bits) - 1));
    if (spec.wire == wire::WireType::Fixed32) f.u &= 0xffffffffULL;
    m.fields.push_back(std::move(f));
  }
  for (std::uint32_t i : pick(rng, bp.string_fields, draw(rng, cp.strings))) {
    const wire::FieldSpec& spec = t.fields[static_cast<std::size_t>(bp.scalar_fields) + i];
    wire::Field f;
    f.number = spec.number;
    const int len = draw(rng, cp.str_len);
    f.bytes.resize(static_cast<std::size_t>(len));
    for (char& c : f.bytes) c = static_cast<char>('a' + rng.uniform(26));
    m.fields.push_back(std::move(f));
  }
  if (depth > 1 && level + 1 < s.types.size()) {
    wire::Field f;
    f.number = t.fields.back().number;
    f.sub.push_back(gen_level(rng, s, bp, cp, level + 1, depth - 1));
    m.fields.push_back(std::move(f));
  }
  std::sort(m.fields.begin(), m.fields.end(),
            [](const wire::Field& a, const wire::Field& b) { return a.number < b.number; });
  return m;
}

}  // namespace

RpcBench gen_rpc_bench(int bench, std::size_t n, std::uint64_t seed) {
  const BenchProfile& bp = bench_profile(bench);
  RpcBench out;
  out.bench = bench;
  out.schema = build_schema(bench, bp);
  RandomStream rng(seed, "rpc.bench" + std::to_string(bench));

  const auto n_small = static_cast<std::size_t>(static_cast<double>(n) * 0.56 + 0.5);
  const auto n_le512 = static_cast<std::size_t>(static_cast<double>(n) * 0.93 + 0.5);
  std::vector<SizeClass> classes;
  classes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    classes.push_back(i < n_small    ? SizeClass::Small
                      : i < n_le512 ? SizeClass::Medium
                                    : SizeClass::Large);
  }
  for (std::size_t i = n; i > 1; --i) {
    std::swap(classes[i - 1], classes[rng.uniform(i)]);
  }

  for (SizeClass c : classes) {
    const ClassParams& cp = bp.cls[static_cast<std::size_t>(c)];
    bool ok = false;
    for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
      wire::Message m = gen_level(rng, out.schema, bp, cp, 0, draw(rng, cp.depth));
      if (size_class(wire::encoded_size(m, out.schema)) == c) {
        out.messages.push_back(std::move(m));
        ok = true;
      }
    }
    if (!ok) throw SimFault("rpc generator could not meet a size-class quota");
  }
  return out;
}

namespace {

void leaf_stats(const wire::Message& m, const wire::RpcSchema& s, double& bytes,
                double& fields) {
  for (const wire::Field& f : m.fields) {
    if (!f.sub.empty()) {
      leaf_stats(f.sub.front(), s, bytes, fields);
      continue;
    }
    wire::Message one{m.type, {f}};
    bytes += static_cast<double>(wire::encoded_size(one, s));
    fields += 1;
  }
}

}  // namespace

double mean_field_bytes(const RpcBench& b) {
  double bytes = 0;
  double fields = 0;
  for (const wire::Message& m : b.messages) leaf_stats(m, b.schema, bytes, fields);
  return fields == 0 ? 0.0 : bytes / fields;
}

std::uint32_t max_depth(const RpcBench& b) {
  std::uint32_t d = 0;
  for (const wire::Message& m : b.messages) d = std::max(d, wire::message_depth(m));
  return d;
}

// ---------------------------------------------------------------------------
// Text traces
// ---------------------------------------------------------------------------

namespace {

std::string hex(Address a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%" PRIx64, a.value);
  return buf;
}

Tier parse_tier(const std::string& s, int lineno) {
  if (s == "HMC") return Tier::HMC;
  if (s == "LLC") return Tier::LLC;
  if (s == "MEM") return Tier::MEM;
  throw ConfigError("trace line " + std::to_string(lineno) + ": bad tier '" + s + "'");
}

std::uint64_t parse_u64(const std::string& s, int lineno) {
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(s, &pos, 0);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("trace line " + std::to_string(lineno) + ": bad number '" + s + "'");
  }
}

template <typename F>
void for_each_record(std::istream& is, F&& f) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string w; ls >> w;) tok.push_back(w);
    if (!tok.empty()) f(tok, lineno);
  }
}

}  // namespace

void write_lsu_trace(std::ostream& os, const LsuTrace& t) {
  os << "# lsu trace\n";
  os << "lsu " << to_string(t.tier) << ' '
     << (t.mode == LsuMode::Latency ? "latency" : "bandwidth") << ' ' << t.node << '\n';
  os << "repeat " << t.repeat << '\n';
  for (const WarmupDirective& w : t.warmup) {
    os << "place " << hex(w.line) << " 64 " << to_string(w.place) << '\n';
  }
  for (const LsuAccess& a : t.accesses) {
    os << (a.kind == AccessKind::Load ? "load " : "store ") << hex(a.line) << " 64\n";
  }
}

LsuTrace read_lsu_trace(std::istream& is) {
  LsuTrace t;
  t.warmup.clear();
  for_each_record(is, [&](const std::vector<std::string>& tok, int ln) {
    const std::string& k = tok[0];
    auto need = [&](std::size_t n) {
      if (tok.size() != n) {
        throw ConfigError("trace line " + std::to_string(ln) + ": expected " +
                          std::to_string(n) + " fields");
      }
    };
    if (k == "lsu") {
      need(4);
      t.tier = parse_tier(tok[1], ln);
      if (tok[2] != "latency" && tok[2] != "bandwidth") {
        throw ConfigError("trace line " + std::to_string(ln) + ": bad mode");
      }
      t.mode = tok[2] == "latency" ? LsuMode::Latency : LsuMode::Bandwidth;
      t.node = static_cast<int>(parse_u64(tok[3], ln));
    } else if (k == "repeat") {
      need(2);
      t.repeat = static_cast<std::uint32_t>(parse_u64(tok[1], ln));
    } else if (k == "place") {
      need(4);
      t.warmup.push_back({Address(parse_u64(tok[1], ln)), parse_tier(tok[3], ln)});
    } else if (k == "load" || k == "store") {
      need(3);
      t.accesses.push_back({k == "load" ? AccessKind::Load : AccessKind::Store,
                            Address(parse_u64(tok[1], ln))});
    } else {
      throw ConfigError("trace line " + std::to_string(ln) + ": unknown record '" + k + "'");
    }
  });
  return t;
}

void write_rao_trace(std::ostream& os, const std::vector<RaoRequest>& reqs) {
  os << "# rao trace\n";
  for (const RaoRequest& r : reqs) {
    os << to_string(r.op) << ' ' << hex(r.target) << " 8 " << r.operand_a << ' '
       << r.operand_b << ' ' << r.source << '\n';
  }
}

std::vector<RaoRequest> read_rao_trace(std::istream& is) {
  std::vector<RaoRequest> out;
  for_each_record(is, [&](const std::vector<std::string>& tok, int ln) {
    if (tok.size() != 6) {
      throw ConfigError("trace line " + std::to_string(ln) + ": expected 6 fields");
    }
    RaoRequest r;
    try {
      r.op = parse_rao_op(tok[0]);
    } catch (const ConfigError&) {
      throw ConfigError("trace line " + std::to_string(ln) + ": unknown op '" + tok[0] + "'");
    }
    r.target = Address(parse_u64(tok[1], ln));
    r.operand_a = parse_u64(tok[3], ln);
    r.operand_b = parse_u64(tok[4], ln);
    r.source = static_cast<std::uint32_t>(parse_u64(tok[5], ln));
    out.push_back(r);
  });
  return out;
}

}  // namespace cxlsim
