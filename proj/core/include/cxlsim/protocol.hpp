// CXL.cache message vocabulary shared by the coherence and interconnect models.

#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace cxlsim {

inline constexpr std::uint64_t kLineBytes = 64;
inline constexpr std::uint64_t kLineMask = ~(kLineBytes - 1);

/// A physical address.
struct Address {
  std::uint64_t value = 0;

  constexpr Address() = default;
  constexpr explicit Address(std::uint64_t v) : value(v) {}

  constexpr Address line() const { return Address(value & kLineMask); }
  constexpr std::uint64_t offset() const { return value & (kLineBytes - 1); }
  constexpr Address operator+(std::uint64_t d) const { return Address(value + d); }
  constexpr auto operator<=>(const Address&) const = default;
};

using LineData = std::array<std::uint8_t, kLineBytes>;

/// Identifies a cache controller (core L1 or the device HMC).
using CacheId = std::uint32_t;

enum class Channel : std::uint8_t { D2HReq, D2HResp, H2DReq, H2DResp };

enum class Opcode : std::uint8_t {
  RdOwn,
  RdShared,
  DirtyEvict,
  CleanEvict,
  NCPush,
  SnpInv,
  SnpData,
  Go,
  GoWritePull,
  GoInvalidate,
  Data,
  WritebackData,
};

enum class StableState : std::uint8_t { I, S, E, M };

/// Where a device access was satisfied.
enum class Tier : std::uint8_t { L1, HMC, LLC, MEM };

struct ProtocolMessage {
  Channel channel = Channel::D2HReq;
  Opcode opcode = Opcode::RdShared;
  Address line;
  CacheId requester = 0;
  bool data_valid = false;
  /// Transaction the message belongs to; pairs requests with responses.
  std::uint64_t txn = 0;
  /// State granted by a Go (E or S); I for Go-class invalidations.
  StableState grant = StableState::I;
};

constexpr bool is_request(Opcode op) {
  return op == Opcode::RdOwn || op == Opcode::RdShared ||
         op == Opcode::DirtyEvict || op == Opcode::CleanEvict ||
         op == Opcode::NCPush;
}
constexpr bool is_snoop(Opcode op) {
  return op == Opcode::SnpInv || op == Opcode::SnpData;
}
constexpr bool is_go_class(Opcode op) {
  return op == Opcode::Go || op == Opcode::GoWritePull ||
         op == Opcode::GoInvalidate;
}
/// Go-class responses that close a request (GoWritePull is intermediate).
constexpr bool is_final_go(Opcode op) {
  return op == Opcode::Go || op == Opcode::GoInvalidate;
}

std::string_view to_string(Channel c);
std::string_view to_string(Opcode op);
std::string_view to_string(StableState s);
std::string_view to_string(Tier t);

}  // namespace cxlsim
