// Device models: the CXL-NIC (RAO PEs on the DCOH, NC-P deserializer,
// coherent serializer with a stride prefetcher) and the PCIe-NIC baseline
// (two-DMA atomics, RpcNIC temp-buffer / pre-serialization pipeline).

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "cxlsim/coherence.hpp"
#include "cxlsim/engine.hpp"
#include "cxlsim/interconnect.hpp"
#include "cxlsim/protowire.hpp"
#include "cxlsim/workloads.hpp"

namespace cxlsim {

struct PrefetcherConfig {
  bool enabled = false;
  std::uint32_t table_size = 16;
  std::uint32_t degree = 1;
  /// Confidence (0..3) at which an entry starts issuing.
  std::uint32_t threshold = 1;
  std::uint64_t region_bytes = 4096;
};

struct NicConfig {
  std::uint32_t pe_count = 4;
  std::uint32_t rao_modify_cycles = 1;
  std::uint32_t rao_write_cycles = 8;

  // RpcNIC host-side costs
  double copy_ns = 100.0;
  double mmio_ns = 400.0;
  /// Host software work per decoded leaf field once a message lands.
  double rpcnic_field_ns = 40.0;
  std::uint32_t temp_buffer_bytes = 4096;

  // Hardware decoder / encoder (device cycles unless noted)
  double dec_msg_ns = 120.0;
  double dec_field_cycles = 90.0;
  /// Extra decoder cycles to set up each nested sub-object.
  double dec_nested_cycles = 300.0;
  double dec_bytes_per_cycle = 0.25;
  double enc_msg_ns = 120.0;
  double enc_field_cycles = 36.0;
  double enc_bytes_per_cycle = 4.0;

  // CXL.mem object path
  double devmem_read_ns = 50.0;
  double devmem_occupancy_ns = 2.0;

  // CPU object construction
  double construct_field_ns = 15.0;
  double construct_line_ns = 30.0;
  std::uint32_t cxlmem_write_mlp = 64;

  PrefetcherConfig prefetch;

  void validate() const;
};

// ---------------------------------------------------------------------------

struct NicTraceRecord {
  SimTime tick;
  std::string engine;
  std::string action;
  Address addr;
  std::uint64_t size = 0;
};

/// Device-side trace: tick, engine, action, address, size.
class NicTrace {
 public:
  void enable(bool on) { on_ = on; }
  void set_stream(std::ostream* os) { os_ = os; }
  void record(SimTime tick, std::string engine, std::string action, Address addr,
              std::uint64_t size);
  const std::vector<NicTraceRecord>& records() const { return records_; }
  std::size_t count(std::string_view engine_prefix, std::string_view action) const;

 private:
  bool on_ = false;
  std::ostream* os_ = nullptr;
  std::vector<NicTraceRecord> records_;
};

// ---------------------------------------------------------------------------

/// Processing elements with a per-key lock table. A free PE takes the oldest
/// queued job whose key no other PE holds.
class PePool {
 public:
  using Release = std::function<void()>;
  using Job = std::function<void(std::uint32_t pe, Release release)>;

  explicit PePool(std::uint32_t pes);

  void submit(std::uint64_t key, Job job);

  std::uint32_t pes() const { return pes_; }
  std::uint32_t busy() const { return pes_ - static_cast<std::uint32_t>(free_.size()); }
  std::size_t queued() const { return queued_; }
  /// Largest number of PEs ever seen holding one key at once (must be <= 1).
  std::uint32_t max_holders_per_key() const { return max_holders_; }

 private:
  void dispatch();
  void release(std::uint32_t pe, std::uint64_t key);

  struct Pending {
    std::uint64_t seq;
    Job job;
  };
  std::uint32_t pes_;
  std::set<std::uint32_t> free_;
  std::unordered_map<std::uint64_t, std::deque<Pending>> queues_;
  std::unordered_map<std::uint64_t, std::uint32_t> holders_;
  std::map<std::uint64_t, std::uint64_t> ready_;  // head seq -> key
  std::uint64_t next_seq_ = 0;
  std::size_t queued_ = 0;
  std::uint32_t max_holders_ = 0;
  bool dispatching_ = false;
};

// ---------------------------------------------------------------------------

using RaoCallback = std::function<void(const RaoResponse&)>;

/// RAO PEs on the DCOH: lock the line in the HMC, modify, write, unlock.
class CxlRaoNic {
 public:
  CxlRaoNic(Simulator& sim, CoherentSystem& coh, const NicConfig& cfg,
            NicTrace* trace = nullptr);
  void submit(const RaoRequest& req, RaoCallback done);
  const PePool& pool() const { return pool_; }

 private:
  void execute(std::uint32_t pe, const RaoRequest& req, RaoCallback done,
               PePool::Release release);

  Simulator& sim_;
  CoherentSystem& coh_;
  NicConfig cfg_;
  ClockDomain clk_;
  NicTrace* trace_;
  PePool pool_;
};

/// RAO over PCIe: DMA read, modify, DMA write; a PE holds its target until
/// the write is acknowledged.
class PcieRaoNic {
 public:
  PcieRaoNic(Simulator& sim, DmaEngine& dma, CoherentSystem& mem, const NicConfig& cfg,
             NicTrace* trace = nullptr);
  void submit(const RaoRequest& req, RaoCallback done);
  const PePool& pool() const { return pool_; }

 private:
  void execute(std::uint32_t pe, const RaoRequest& req, RaoCallback done,
               PePool::Release release);

  Simulator& sim_;
  DmaEngine& dma_;
  CoherentSystem& mem_;
  NicConfig cfg_;
  ClockDomain clk_;
  NicTrace* trace_;
  PePool pool_;
};

// ---------------------------------------------------------------------------

/// Multi-stride prefetcher: one entry per region, tracking the last miss,
/// the current stride and a 2-bit confidence counter.
class StridePrefetcher {
 public:
  StridePrefetcher(const PrefetcherConfig& cfg, const MemoryMap& map);
  /// Records a demand miss; returns the lines to prefetch.
  std::vector<Address> on_miss(Address line);
  std::uint64_t issued() const { return issued_; }

 private:
  struct Entry {
    std::uint64_t region = 0;
    std::int64_t last_line = 0;
    std::int64_t stride = 0;
    std::uint32_t confidence = 0;
    std::uint64_t lru = 0;
  };
  PrefetcherConfig cfg_;
  MemoryMap map_;
  std::vector<Entry> table_;
  std::uint64_t clock_ = 0;
  std::uint64_t issued_ = 0;
};

// ---------------------------------------------------------------------------
// Host-object layout
//
// An object of type T with N fields is ceil(N/64) presence words followed by
// N 8-byte slots, starting on a line boundary. A scalar slot holds the value,
// a string slot points at a blob [u64 length][bytes] (8-byte aligned), a
// nested slot points at the sub-object.

/// Functional image of laid-out objects: line address -> contents.
struct HostObject {
  Address root;
  std::map<std::uint64_t, LineData> lines;
  bool operator==(const HostObject&) const = default;
};

class ObjectAllocator {
 public:
  virtual ~ObjectAllocator() = default;
  struct Placement {
    Address addr;
    std::uint32_t slab = 0;
  };
  virtual Placement object(std::uint64_t bytes, bool root) = 0;
  virtual Address blob(std::uint32_t slab, std::uint64_t bytes) = 0;
};

/// Bump allocation in depth-first order (the deserializer arena).
class ArenaAllocator : public ObjectAllocator {
 public:
  explicit ArenaAllocator(Address base) : base_(base), cursor_(base.value) {}
  Placement object(std::uint64_t bytes, bool root) override;
  Address blob(std::uint32_t slab, std::uint64_t bytes) override;
  Address base() const { return base_; }
  std::uint64_t used() const { return cursor_ - base_.value; }
  /// Moves the cursor to the next line boundary.
  void align_line();

 private:
  Address base_;
  std::uint64_t cursor_;
};

/// CPU-side placement: a message's root object and its strings share one
/// slab; every nested object starts in a randomly chosen slab.
class SlabAllocator : public ObjectAllocator {
 public:
  SlabAllocator(Address base, std::uint64_t slab_bytes, std::uint32_t slabs,
                std::uint64_t seed);
  Placement object(std::uint64_t bytes, bool root) override;
  Address blob(std::uint32_t slab, std::uint64_t bytes) override;

 private:
  Address bump(std::uint32_t slab, std::uint64_t bytes, std::uint64_t align);
  Address base_;
  std::uint64_t slab_bytes_;
  std::uint32_t slabs_;
  RandomStream rng_;
  std::vector<std::uint64_t> cursor_;
  std::uint64_t overflow_;
};

std::uint64_t object_bytes(const wire::MessageType& t);

/// One unit of decode work and the destination lines it writes.
struct LayoutStep {
  wire::DecodeEvent::Kind kind;
  std::uint64_t payload_bytes = 0;
  std::vector<std::uint64_t> lines;
};

struct Layout {
  HostObject image;
  std::vector<LayoutStep> steps;  // wire order
  /// Pieces the CPU gathers for pre-serialization, one per leaf field.
  std::vector<std::pair<Address, std::uint64_t>> segments;
  std::size_t fields = 0;         // leaf fields
  std::size_t objects = 0;
  std::uint64_t payload_bytes = 0;
};

Layout layout_message(const wire::Message& m, const wire::RpcSchema& schema,
                      ObjectAllocator& alloc);

/// Reads an object back from memory. Throws wire::EncodeError when a nested
/// pointer does not resolve to a valid object.
wire::Message read_object(const CoherentSystem& mem, Address root,
                          const wire::RpcSchema& schema);

// ---------------------------------------------------------------------------

enum class SerMode : std::uint8_t { CxlMem, CxlCache, CxlCachePrefetch };
std::string_view to_string(SerMode m);

struct DeserResult {
  HostObject object;
  SimTime started;
  SimTime completed;
  std::uint64_t pushes = 0;
  std::uint64_t dma_flushes = 0;
  std::uint64_t ring_updates = 0;
  std::uint64_t arena_bytes = 0;
};

struct SerResult {
  wire::WireBuffer wire;
  SimTime started;
  SimTime completed;
  std::uint64_t copies = 0;
  std::uint64_t doorbells = 0;
  std::uint64_t dma_reads = 0;
  std::uint64_t loads = 0;
};

using DeserCallback = std::function<void(const DeserResult&)>;
using SerCallback = std::function<void(const SerResult&)>;

/// RPC de/serialization datapaths of both NICs over one memory system.
class RpcEngine {
 public:
  RpcEngine(Simulator& sim, CoherentSystem& coh, DmaEngine& dma, const NicConfig& cfg,
            NicTrace* trace = nullptr);

  /// Ring-buffer head line shared with the host consumer.
  void set_ring(Address ring);
  Address ring() const { return ring_; }

  void cxl_deserialize(const wire::WireBuffer& w, const wire::RpcSchema& schema,
                       ArenaAllocator& arena, DeserCallback done);
  void rpcnic_deserialize(const wire::WireBuffer& w, const wire::RpcSchema& schema,
                          ArenaAllocator& arena, DeserCallback done);

  /// Untimed CPU construction: lays the message out and writes it to memory.
  /// Host-range objects end up resident in the LLC.
  Layout construct(const wire::Message& m, const wire::RpcSchema& schema,
                   ObjectAllocator& alloc);
  /// Modeled CPU construction time for a layout (device memory pays the
  /// CXL.mem write adder per line).
  double construction_ns(const Layout& l, bool device_memory) const;

  void cxl_serialize(const Layout& obj, const wire::RpcSchema& schema, SerMode mode,
                     SerCallback done);
  void rpcnic_serialize(const Layout& obj, const wire::RpcSchema& schema,
                        SerCallback done);

  const StridePrefetcher& prefetcher() const { return *prefetcher_; }

 private:
  struct SerWalk;
  double cycles_ns(double cycles) const { return cycles * 1000.0 / device_mhz_; }
  double decode_cost(const LayoutStep& s) const;
  void notify(std::function<void()> then);
  void trace(std::string_view engine, std::string_view action, Address a,
             std::uint64_t size);

  Simulator& sim_;
  CoherentSystem& coh_;
  DmaEngine& dma_;
  NicConfig cfg_;
  NicTrace* trace_;
  double device_mhz_;
  Address ring_;
  Address doorbell_;
  std::uint64_t ring_head_ = 0;
  OccupancyServer devmem_;
  std::unique_ptr<StridePrefetcher> prefetcher_;
  bool prefetch_active_ = false;
};

}  // namespace cxlsim
