// Directory-based two-level MESI: core L1s and the device HMC are peer caches
// below a shared, inclusive LLC whose per-line metadata is the directory.
//
// The directory is blocking: while a line has a transaction in progress at the
// LLC, later requests for it queue in arrival order. Links are FIFO, so a
// snoop can never overtake the Data/Go of an earlier grant.

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cxlsim/engine.hpp"
#include "cxlsim/interconnect.hpp"
#include "cxlsim/protocol.hpp"

namespace cxlsim {

/// Host and device physical ranges. Host memory is split evenly across the
/// NUMA nodes (node n owns the n-th slice).
struct MemoryMap {
  std::uint64_t host_base = 0;
  std::uint64_t host_size = 32ULL << 30;
  std::uint64_t device_base = 64ULL << 30;
  std::uint64_t device_size = 16ULL << 30;

  bool in_host(Address a) const {
    return a.value >= host_base && a.value - host_base < host_size;
  }
  bool in_device(Address a) const {
    return a.value >= device_base && a.value - device_base < device_size;
  }
  int node_of(Address a) const;
  /// First address of a NUMA node's slice of host memory.
  Address node_base(int node) const;
};

/// Set-associative cache with LRU replacement and per-line lock flags.
class CacheModel {
 public:
  struct Way {
    bool valid = false;
    Address line;
    StableState state = StableState::I;
    bool locked = false;
    std::uint64_t last_touch = 0;
    LineData data{};
  };

  CacheModel(CacheId id, std::uint64_t capacity_bytes, std::uint32_t ways);

  CacheId id() const { return id_; }
  std::uint32_t sets() const { return sets_; }
  std::uint32_t ways() const { return ways_; }
  std::uint64_t capacity() const { return capacity_; }
  std::uint32_t set_index(Address a) const {
    return static_cast<std::uint32_t>((a.value / kLineBytes) & (sets_ - 1));
  }

  Way* find(Address line);
  const Way* find(Address line) const;
  void touch(Way& w) { w.last_touch = ++clock_; }

  /// Way to fill for `line`: an invalid way if one exists, else the
  /// least-recently-touched unlocked way. nullptr when every way is locked.
  Way* victim_for(Address line);
  Way& install(Way& slot, Address line, StableState state, const LineData& data);
  void invalidate(Address line);

  std::vector<Address> resident_lines() const;

 private:
  CacheId id_;
  std::uint64_t capacity_;
  std::uint32_t ways_;
  std::uint32_t sets_;
  std::uint64_t clock_ = 0;
  std::vector<Way> lines_;
};

enum class DirState : std::uint8_t { I, S, EM };

struct DirectoryEntry {
  DirState state = DirState::I;
  std::optional<CacheId> owner;
  std::uint64_t sharers = 0;
  /// Transient: a transaction for the line is in progress at the LLC.
  bool busy = false;
  bool in_llc = false;
  bool llc_dirty = false;
};

enum class AccessKind : std::uint8_t { Load, Store };

struct AccessResult {
  SimTime issued;
  SimTime completed;
  Tier tier = Tier::HMC;
  LineData data{};
};
using AccessCallback = std::function<void(const AccessResult&)>;
using DoneCallback = std::function<void(SimTime)>;

/// One coherence-visible effect, in global delivery order. Loads record the
/// whole line; writes record the bytes written at `offset`.
struct AccessRecord {
  enum class Kind : std::uint8_t { Load, Write };
  Kind kind;
  Address line;
  std::uint32_t offset = 0;
  std::vector<std::uint8_t> bytes;
  CacheId who = 0;
};

struct LoggedMessage {
  SimTime tick;
  ProtocolMessage msg;
};

struct Topology {
  std::uint32_t cores = 2;
  std::uint64_t l1_bytes = 32 * 1024;
  std::uint32_t l1_ways = 8;
  std::uint64_t hmc_bytes = 128 * 1024;
  std::uint32_t hmc_ways = 4;
  MemoryMap map;
};

class CoherentSystem {
 public:
  CoherentSystem(Simulator& sim, const LatencyConfig& cfg, Topology topo = {});
  ~CoherentSystem();
  CoherentSystem(const CoherentSystem&) = delete;
  CoherentSystem& operator=(const CoherentSystem&) = delete;

  Simulator& sim() { return sim_; }
  const LatencyConfig& latency() const { return cfg_; }
  const Topology& topology() const { return topo_; }
  CacheId device_id() const { return topo_.cores; }

  // --- Device (DCOH) side -------------------------------------------------
  void device_load(Address addr, AccessCallback done);
  /// Writes `bytes` at addr.offset() within the line.
  void device_store(Address addr, std::span<const std::uint8_t> bytes,
                    AccessCallback done);
  /// Brings the line into the HMC in S/E unless already present or pending.
  void device_prefetch(Address addr);
  /// Obtains the line in E/M and locks it; `done` sees the locked data.
  void device_acquire_locked(Address addr, AccessCallback done);
  /// Writes into a line this device holds locked (leaves it M).
  void device_write_locked(Address addr, std::span<const std::uint8_t> bytes);
  void unlock_line(Address addr);
  bool is_locked(Address addr) const;
  void hmc_evict(Address addr, DoneCallback done);
  void ncp_push(Address addr, const LineData& data, DoneCallback done);
  /// Device access to its own memory range, bypassing the host hierarchy.
  void device_local_read(Address addr, SimTime latency, AccessCallback done);

  // --- Host side -----------------------------------------------------------
  void host_access(std::uint32_t core, AccessKind kind, Address addr,
                   std::span<const std::uint8_t> bytes, AccessCallback done);

  // --- Warm-up placement (untimed) -----------------------------------------
  void place_in(Address addr, Tier tier);

  // --- Functional (untimed) views ------------------------------------------
  LineData functional_read(Address addr) const;
  /// Coherent I/O write: updates memory and drops every cached copy.
  void functional_dma_write(Address addr, std::span<const std::uint8_t> bytes);

  // --- Inspection -----------------------------------------------------------
  StableState state_of(CacheId cache, Address addr) const;
  DirectoryEntry directory(Address addr) const;
  const CacheModel& cache(CacheId id) const;
  /// True once no transaction, MSHR, write-back or stalled snoop remains.
  bool quiescent() const;

  /// Counts over every line ever touched.
  std::size_t swmr_violations() const;
  std::size_t directory_mismatches() const;
  /// Requests that did not receive exactly one closing Go-class response.
  std::size_t conservation_violations() const;
  /// Snoops that completed against a line while it was locked.
  std::size_t locked_snoop_violations() const { return locked_snoop_violations_; }

  void enable_access_log(bool on) { access_log_on_ = on; }
  const std::vector<AccessRecord>& access_log() const { return access_log_; }
  void enable_message_log(bool on) { message_log_on_ = on; }
  const std::vector<LoggedMessage>& message_log() const { return message_log_; }
  /// Tab-separated trace: tick, channel, opcode, line (hex), requester, data_valid.
  void set_trace_stream(std::ostream* os) { trace_ = os; }

  std::uint64_t messages_sent() const { return messages_; }
  std::uint64_t hmc_hits() const { return hmc_hits_; }
  std::uint64_t hmc_misses() const { return hmc_misses_; }
  const CreditPool& credits() const { return link_.credits(); }

  /// Called whenever the device installs or loses a line (used by the
  /// prefetcher's miss observer).
  void set_device_miss_observer(std::function<void(Address)> obs) {
    miss_observer_ = std::move(obs);
  }

 private:
  struct Peer;
  struct DirLine;
  struct Request;
  struct PendingAccess;

  Peer& peer(CacheId id) { return *peers_[id]; }
  const Peer& peer(CacheId id) const { return *peers_[id]; }
  bool is_device(CacheId id) const { return id == device_id(); }
  DirLine& dir(Address line);
  const DirLine* find_dir(Address line) const;
  void check_range(Address a) const;

  // messaging
  void log(const ProtocolMessage& m);
  void to_llc(CacheId from, ProtocolMessage m, std::function<void()> on_arrival);
  void to_peer(CacheId to, ProtocolMessage m, std::function<void()> on_arrival);

  // peer side
  void access(CacheId who, PendingAccess pa);
  void lookup(CacheId who, PendingAccess pa);
  void issue_request(CacheId who, Opcode op, Address line);
  void on_grant(CacheId who, Address line, StableState grant, const LineData& data,
                Tier tier);
  void install(CacheId who, Address line, StableState st, const LineData& data);
  void evict_way(CacheId who, CacheModel::Way& way, DoneCallback done);
  void on_snoop(CacheId who, const ProtocolMessage& m);
  void respond_snoop(CacheId who, const ProtocolMessage& m);
  bool complete_hit(CacheId who, PendingAccess& pa, Tier tier);
  void retry_waiters(CacheId who, Address line);

  // LLC side
  void llc_receive(Request r);
  void llc_start(Request r);
  void llc_process(Request r);
  void llc_snoop_all(Address line, std::uint64_t targets, Opcode op,
                     std::uint64_t txn, std::function<void()> then);
  void llc_grant(Request r, StableState grant);
  void llc_finish(Address line);
  SimTime memory_ready(Address line);

  void record_write(CacheId who, Address addr, std::span<const std::uint8_t> b);
  void record_load(CacheId who, Address line, const LineData& data);

  Simulator& sim_;
  LatencyConfig cfg_;
  Topology topo_;
  CxlLink link_;
  OccupancyServer llc_pipe_;
  OccupancyServer mem_channel_;
  std::vector<std::unique_ptr<Peer>> peers_;
  std::unordered_map<std::uint64_t, std::unique_ptr<DirLine>> dir_;
  std::unordered_map<std::uint64_t, LineData> memory_;
  std::unordered_set<std::uint64_t> touched_;
  std::uint64_t next_txn_ = 1;

  std::map<std::uint64_t, int> open_requests_;  // txn -> closing Go count
  std::size_t locked_snoop_violations_ = 0;

  bool access_log_on_ = false;
  std::vector<AccessRecord> access_log_;
  bool message_log_on_ = false;
  std::vector<LoggedMessage> message_log_;
  std::ostream* trace_ = nullptr;
  std::uint64_t messages_ = 0;
  std::uint64_t hmc_hits_ = 0;
  std::uint64_t hmc_misses_ = 0;
  std::function<void(Address)> miss_observer_;
};

}  // namespace cxlsim
