#include "cxlsim/coherence.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <ostream>

namespace cxlsim {

// ---------------------------------------------------------------------------
// MemoryMap / CacheModel
// ---------------------------------------------------------------------------

int MemoryMap::node_of(Address a) const {
  const std::uint64_t slice = host_size / kNumaNodes;
  const auto n = static_cast<int>((a.value - host_base) / slice);
  return std::clamp(n, 0, kNumaNodes - 1);
}

Address MemoryMap::node_base(int node) const {
  return Address(host_base + static_cast<std::uint64_t>(node) * (host_size / kNumaNodes));
}

CacheModel::CacheModel(CacheId id, std::uint64_t capacity_bytes, std::uint32_t ways)
    : id_(id), capacity_(capacity_bytes), ways_(ways) {
  if (ways == 0 || capacity_bytes % (ways * kLineBytes) != 0) {
    throw ConfigError("cache capacity must be a multiple of ways*64");
  }
  sets_ = static_cast<std::uint32_t>(capacity_bytes / (ways * kLineBytes));
  if (!std::has_single_bit(sets_)) {
    throw ConfigError("cache set count must be a power of two");
  }
  lines_.resize(static_cast<std::size_t>(sets_) * ways_);
}

CacheModel::Way* CacheModel::find(Address line) {
  const std::size_t base = static_cast<std::size_t>(set_index(line)) * ways_;
  for (std::size_t w = 0; w < ways_; ++w) {
    Way& way = lines_[base + w];
    if (way.valid && way.line == line) return &way;
  }
  return nullptr;
}

const CacheModel::Way* CacheModel::find(Address line) const {
  return const_cast<CacheModel*>(this)->find(line);
}

CacheModel::Way* CacheModel::victim_for(Address line) {
  const std::size_t base = static_cast<std::size_t>(set_index(line)) * ways_;
  Way* best = nullptr;
  for (std::size_t w = 0; w < ways_; ++w) {
    Way& way = lines_[base + w];
    if (!way.valid) return &way;
    if (way.locked) continue;
    if (best == nullptr || way.last_touch < best->last_touch) best = &way;
  }
  return best;
}

CacheModel::Way& CacheModel::install(Way& slot, Address line, StableState state,
                                     const LineData& data) {
  slot.valid = true;
  slot.line = line;
  slot.state = state;
  slot.locked = false;
  slot.data = data;
  touch(slot);
  return slot;
}

void CacheModel::invalidate(Address line) {
  if (Way* w = find(line)) {
    w->valid = false;
    w->state = StableState::I;
    w->locked = false;
  }
}

std::vector<Address> CacheModel::resident_lines() const {
  std::vector<Address> out;
  for (const Way& w : lines_) {
    if (w.valid) out.push_back(w.line);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Internal state
// ---------------------------------------------------------------------------

struct CoherentSystem::PendingAccess {
  enum class Kind : std::uint8_t { Load, Store, Acquire, Prefetch };
  Kind kind = Kind::Load;
  Address addr;
  std::vector<std::uint8_t> bytes;
  AccessCallback done;
  SimTime issued;
  bool missed = false;
  Tier tier = Tier::HMC;
};

struct CoherentSystem::Peer {
  struct WriteBack {
    LineData data{};
    bool dirty = false;
    bool snooped = false;
  };

  Peer(CacheId id, std::uint64_t bytes, std::uint32_t ways, bool dev, SimTime port)
      : cache(id, bytes, ways), device(dev), port(port) {}

  CacheModel cache;
  bool device;
  OccupancyServer port;
  // line -> accesses waiting on an outstanding request (first one issued it)
  std::unordered_map<std::uint64_t, std::vector<PendingAccess>> mshr;
  std::unordered_map<std::uint64_t, WriteBack> wb;
  std::unordered_map<std::uint64_t, std::vector<ProtocolMessage>> stalled;
  std::unordered_map<std::uint64_t, std::vector<PendingAccess>> lock_waiters;
  std::unordered_map<std::uint64_t, DoneCallback> evict_done;
};

struct CoherentSystem::Request {
  std::uint64_t txn = 0;
  Opcode op = Opcode::RdShared;
  CacheId from = 0;
  Address line;
  LineData data{};
};

struct CoherentSystem::DirLine : DirectoryEntry {
  LineData data{};
  std::deque<Request> waiting;
  int pending_snoops = 0;
  std::function<void()> snoop_done;
  std::function<void(const LineData&)> on_writeback;
};

namespace {

constexpr std::uint64_t bit(CacheId id) { return std::uint64_t{1} << id; }

}  // namespace

// ---------------------------------------------------------------------------

CoherentSystem::CoherentSystem(Simulator& sim, const LatencyConfig& cfg, Topology topo)
    : sim_(sim),
      cfg_(cfg),
      topo_(topo),
      link_(sim, cfg),
      llc_pipe_(SimTime::from_ns(cfg.host_occupancy)),
      mem_channel_(SimTime::from_ns(cfg.mem_occupancy)) {
  cfg_.validate();
  if (topo_.cores == 0 || topo_.cores > 63) {
    throw ConfigError("core count must be in [1, 63]");
  }
  for (CacheId c = 0; c < topo_.cores; ++c) {
    peers_.push_back(
        std::make_unique<Peer>(c, topo_.l1_bytes, topo_.l1_ways, false, SimTime()));
  }
  peers_.push_back(std::make_unique<Peer>(device_id(), topo_.hmc_bytes,
                                          topo_.hmc_ways, true,
                                          SimTime::from_ns(cfg_.hmc_occupancy)));
}

CoherentSystem::~CoherentSystem() = default;

CoherentSystem::DirLine& CoherentSystem::dir(Address line) {
  auto& slot = dir_[line.value];
  if (!slot) slot = std::make_unique<DirLine>();
  return *slot;
}

const CoherentSystem::DirLine* CoherentSystem::find_dir(Address line) const {
  auto it = dir_.find(line.value);
  return it == dir_.end() ? nullptr : it->second.get();
}

void CoherentSystem::check_range(Address a) const {
  if (!topo_.map.in_host(a) && !topo_.map.in_device(a)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(a.value));
    throw SimFault(std::string("address ") + buf + " outside all configured ranges");
  }
}

// ---------------------------------------------------------------------------
// Messaging
// ---------------------------------------------------------------------------

void CoherentSystem::log(const ProtocolMessage& m) {
  ++messages_;
  if (m.channel == Channel::D2HReq) open_requests_.emplace(m.txn, 0);
  if (m.channel == Channel::H2DResp && is_final_go(m.opcode)) ++open_requests_[m.txn];
  if (message_log_on_) message_log_.push_back({sim_.now(), m});
  if (trace_) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%llu\t%s\t%s\t0x%llx\t%u\t%d\n",
                  static_cast<unsigned long long>(sim_.now().ps()),
                  std::string(to_string(m.channel)).c_str(),
                  std::string(to_string(m.opcode)).c_str(),
                  static_cast<unsigned long long>(m.line.value), m.requester,
                  m.data_valid ? 1 : 0);
    *trace_ << buf;
  }
}

void CoherentSystem::to_llc(CacheId from, ProtocolMessage m,
                            std::function<void()> on_arrival) {
  auto deliver = [this, m, cb = std::move(on_arrival)]() {
    log(m);
    cb();
  };
  if (is_device(from)) {
    link_.send_d2h(m, std::move(deliver));
  } else {
    sim_.schedule(std::move(deliver));
  }
}

void CoherentSystem::to_peer(CacheId to, ProtocolMessage m,
                             std::function<void()> on_arrival) {
  auto deliver = [this, m, cb = std::move(on_arrival)]() {
    log(m);
    cb();
  };
  if (is_device(to)) {
    link_.send_h2d(m, std::move(deliver));
  } else {
    sim_.schedule(std::move(deliver));
  }
}

// ---------------------------------------------------------------------------
// Peer side
// ---------------------------------------------------------------------------

void CoherentSystem::device_load(Address addr, AccessCallback done) {
  check_range(addr);
  access(device_id(), PendingAccess{PendingAccess::Kind::Load, addr, {}, std::move(done)});
}

void CoherentSystem::device_store(Address addr, std::span<const std::uint8_t> bytes,
                                  AccessCallback done) {
  check_range(addr);
  if (addr.offset() + bytes.size() > kLineBytes) {
    throw UsageError("store crosses a cacheline boundary");
  }
  access(device_id(), PendingAccess{PendingAccess::Kind::Store, addr,
                                    {bytes.begin(), bytes.end()}, std::move(done)});
}

void CoherentSystem::device_prefetch(Address addr) {
  if (!topo_.map.in_host(addr)) return;
  access(device_id(), PendingAccess{PendingAccess::Kind::Prefetch, addr, {}, nullptr});
}

void CoherentSystem::device_acquire_locked(Address addr, AccessCallback done) {
  check_range(addr);
  access(device_id(),
         PendingAccess{PendingAccess::Kind::Acquire, addr, {}, std::move(done)});
}

void CoherentSystem::host_access(std::uint32_t core, AccessKind kind, Address addr,
                                 std::span<const std::uint8_t> bytes,
                                 AccessCallback done) {
  if (core >= topo_.cores) throw UsageError("no such core");
  check_range(addr);
  if (kind == AccessKind::Store && addr.offset() + bytes.size() > kLineBytes) {
    throw UsageError("store crosses a cacheline boundary");
  }
  PendingAccess pa{kind == AccessKind::Load ? PendingAccess::Kind::Load
                                            : PendingAccess::Kind::Store,
                   addr, {bytes.begin(), bytes.end()}, std::move(done)};
  access(core, std::move(pa));
}

void CoherentSystem::access(CacheId who, PendingAccess pa) {
  touched_.insert(pa.addr.line().value);
  pa.issued = sim_.now();
  Peer& p = peer(who);
  SimTime delay;
  if (p.device) {
    const SimTime start = p.port.reserve(sim_.now());
    delay = (start - sim_.now()) + SimTime::from_ns(cfg_.t_hmc_hit);
  } else {
    delay = SimTime::from_ns(cfg_.t_l1_hit);
  }
  sim_.schedule(who, [this, who, pa = std::move(pa)]() mutable {
    lookup(who, std::move(pa));
  }, delay);
}

bool CoherentSystem::complete_hit(CacheId who, PendingAccess& pa, Tier tier) {
  Peer& p = peer(who);
  const Address line = pa.addr.line();
  CacheModel::Way* way = p.cache.find(line);
  p.cache.touch(*way);
  AccessResult res{pa.issued, sim_.now(), tier, {}};
  switch (pa.kind) {
    case PendingAccess::Kind::Load:
      res.data = way->data;
      record_load(who, line, way->data);
      break;
    case PendingAccess::Kind::Store:
      std::copy(pa.bytes.begin(), pa.bytes.end(),
                way->data.begin() + static_cast<std::ptrdiff_t>(pa.addr.offset()));
      way->state = StableState::M;
      record_write(who, pa.addr, pa.bytes);
      res.data = way->data;
      break;
    case PendingAccess::Kind::Acquire:
      way->locked = true;
      res.data = way->data;
      break;
    case PendingAccess::Kind::Prefetch:
      return true;
  }
  if (pa.done) pa.done(res);
  return true;
}

void CoherentSystem::lookup(CacheId who, PendingAccess pa) {
  Peer& p = peer(who);
  const Address line = pa.addr.line();
  const bool prefetch = pa.kind == PendingAccess::Kind::Prefetch;

  if (auto it = p.mshr.find(line.value); it != p.mshr.end()) {
    if (!prefetch) it->second.push_back(std::move(pa));
    return;
  }
  CacheModel::Way* way = p.cache.find(line);
  if (prefetch) {
    if (way != nullptr) return;
    p.mshr[line.value].push_back(std::move(pa));
    issue_request(who, Opcode::RdShared, line);
    return;
  }
  const bool need_own = pa.kind == PendingAccess::Kind::Store ||
                        pa.kind == PendingAccess::Kind::Acquire;
  const bool writable =
      way != nullptr && (way->state == StableState::E || way->state == StableState::M);
  if (way != nullptr && (!need_own || writable)) {
    if (pa.kind == PendingAccess::Kind::Acquire && way->locked) {
      p.lock_waiters[line.value].push_back(std::move(pa));
      return;
    }
    if (p.device && !pa.missed) ++hmc_hits_;
    const Tier tier = pa.missed ? pa.tier : (p.device ? Tier::HMC : Tier::L1);
    complete_hit(who, pa, tier);
    return;
  }
  if (p.device) {
    ++hmc_misses_;
    if (miss_observer_) miss_observer_(line);
  }
  pa.missed = true;
  p.mshr[line.value].push_back(std::move(pa));
  issue_request(who, need_own ? Opcode::RdOwn : Opcode::RdShared, line);
}

void CoherentSystem::issue_request(CacheId who, Opcode op, Address line) {
  const std::uint64_t txn = next_txn_++;
  ProtocolMessage m{Channel::D2HReq, op, line, who, false, txn};
  Request r{txn, op, who, line, {}};
  to_llc(who, m, [this, r]() { llc_receive(r); });
}

void CoherentSystem::on_grant(CacheId who, Address line, StableState grant,
                              const LineData& data, Tier tier) {
  Peer& p = peer(who);
  install(who, line, grant, data);
  auto node = p.mshr.extract(line.value);
  if (node.empty()) return;
  for (PendingAccess& pa : node.mapped()) {
    if (pa.kind == PendingAccess::Kind::Prefetch) continue;
    pa.tier = tier;
    pa.missed = true;
    lookup(who, std::move(pa));
  }
}

void CoherentSystem::install(CacheId who, Address line, StableState st,
                             const LineData& data) {
  Peer& p = peer(who);
  if (CacheModel::Way* way = p.cache.find(line)) {
    way->state = st;
    way->data = data;
    p.cache.touch(*way);
    return;
  }
  CacheModel::Way* victim = p.cache.victim_for(line);
  if (victim == nullptr) {
    throw SimFault("every way of the target set is locked");
  }
  if (victim->valid) evict_way(who, *victim, nullptr);
  p.cache.install(*victim, line, st, data);
}

void CoherentSystem::evict_way(CacheId who, CacheModel::Way& way, DoneCallback done) {
  Peer& p = peer(who);
  const Address line = way.line;
  const bool dirty = way.state == StableState::M;
  if (!dirty && p.mshr.contains(line.value)) {
    // S copy with an upgrade in flight: the pending grant rewrites the
    // directory entry, so the copy is dropped without a message.
    way.valid = false;
    way.state = StableState::I;
    way.locked = false;
    if (done) sim_.schedule([d = std::move(done), this]() { d(sim_.now()); });
    return;
  }
  if (dirty) p.wb[line.value] = Peer::WriteBack{way.data, true, false};
  way.valid = false;
  way.state = StableState::I;
  way.locked = false;
  const std::uint64_t txn = next_txn_++;
  const Opcode op = dirty ? Opcode::DirtyEvict : Opcode::CleanEvict;
  if (done) p.evict_done[txn] = std::move(done);
  ProtocolMessage m{Channel::D2HReq, op, line, who, false, txn};
  Request r{txn, op, who, line, {}};
  to_llc(who, m, [this, r]() { llc_receive(r); });
}

void CoherentSystem::hmc_evict(Address addr, DoneCallback done) {
  const Address line = addr.line();
  Peer& p = peer(device_id());
  CacheModel::Way* way = p.cache.find(line);
  if (way == nullptr) throw UsageError("hmc_evict: line not present in HMC");
  if (way->locked) throw SimFault("protocol violation: evicting a locked line");
  evict_way(device_id(), *way, std::move(done));
}

void CoherentSystem::ncp_push(Address addr, const LineData& data, DoneCallback done) {
  check_range(addr);
  const Address line = addr.line();
  touched_.insert(line.value);
  Peer& p = peer(device_id());
  if (CacheModel::Way* way = p.cache.find(line)) {
    if (way->locked) throw SimFault("protocol violation: pushing a locked line");
    if (way->state == StableState::M) {
      p.wb[line.value] = Peer::WriteBack{way->data, true, false};
    }
    p.cache.invalidate(line);
  }
  const std::uint64_t txn = next_txn_++;
  p.evict_done[txn] = std::move(done);
  ProtocolMessage m{Channel::D2HReq, Opcode::NCPush, line, device_id(), true, txn};
  Request r{txn, Opcode::NCPush, device_id(), line, data};
  to_llc(device_id(), m, [this, r]() { llc_receive(r); });
}

void CoherentSystem::device_local_read(Address addr, SimTime latency,
                                       AccessCallback done) {
  if (!topo_.map.in_device(addr)) {
    throw SimFault("device_local_read outside device memory range");
  }
  const SimTime issued = sim_.now();
  sim_.schedule([this, addr, issued, latency, cb = std::move(done)]() {
    const LineData data = functional_read(addr.line());
    if (cb) cb(AccessResult{issued, issued + latency, Tier::MEM, data});
  }, latency);
}

void CoherentSystem::device_write_locked(Address addr,
                                         std::span<const std::uint8_t> bytes) {
  Peer& p = peer(device_id());
  CacheModel::Way* way = p.cache.find(addr.line());
  if (way == nullptr || !way->locked) {
    throw UsageError("device_write_locked on a line that is not locked");
  }
  if (addr.offset() + bytes.size() > kLineBytes) {
    throw UsageError("write crosses a cacheline boundary");
  }
  std::copy(bytes.begin(), bytes.end(),
            way->data.begin() + static_cast<std::ptrdiff_t>(addr.offset()));
  way->state = StableState::M;
  p.cache.touch(*way);
  record_write(device_id(), addr, bytes);
}

void CoherentSystem::unlock_line(Address addr) {
  const Address line = addr.line();
  Peer& p = peer(device_id());
  CacheModel::Way* way = p.cache.find(line);
  if (way == nullptr || !way->locked) throw UsageError("unlock of an unlocked line");
  way->locked = false;
  if (auto node = p.stalled.extract(line.value); !node.empty()) {
    for (const ProtocolMessage& m : node.mapped()) respond_snoop(device_id(), m);
  }
  if (auto node = p.lock_waiters.extract(line.value); !node.empty()) {
    for (PendingAccess& pa : node.mapped()) lookup(device_id(), std::move(pa));
  }
}

bool CoherentSystem::is_locked(Address addr) const {
  const CacheModel::Way* way = peer(device_id()).cache.find(addr.line());
  return way != nullptr && way->locked;
}

void CoherentSystem::on_snoop(CacheId who, const ProtocolMessage& m) {
  if (is_device(who)) {
    sim_.schedule(who, [this, who, m]() { respond_snoop(who, m); },
                  SimTime::from_ns(cfg_.t_hmc_hit));
  } else {
    respond_snoop(who, m);
  }
}

void CoherentSystem::respond_snoop(CacheId who, const ProtocolMessage& m) {
  Peer& p = peer(who);
  const Address line = m.line;
  CacheModel::Way* way = p.cache.find(line);
  if (way != nullptr && way->locked) {
    p.stalled[line.value].push_back(m);
    return;
  }
  bool data_valid = false;
  const bool retained = way != nullptr && m.opcode == Opcode::SnpData;
  LineData data{};
  if (way != nullptr) {
    if (way->state == StableState::M) {
      data_valid = true;
      data = way->data;
    }
    if (m.opcode == Opcode::SnpInv) {
      p.cache.invalidate(line);
    } else {
      way->state = StableState::S;
    }
  } else if (auto it = p.wb.find(line.value); it != p.wb.end() && !it->second.snooped) {
    data_valid = it->second.dirty;
    data = it->second.data;
    it->second.snooped = true;
  }
  ProtocolMessage resp{Channel::D2HResp,
                       data_valid ? Opcode::WritebackData : Opcode::Data,
                       line, who, data_valid, m.txn};
  to_llc(who, resp, [this, who, resp, data, retained]() {
    DirLine& d = dir(resp.line);
    if (resp.data_valid) {
      d.data = data;
      d.in_llc = true;
      d.llc_dirty = true;
    }
    if (d.owner == who) d.owner.reset();
    if (retained) {
      d.sharers |= bit(who);
    } else {
      d.sharers &= ~bit(who);
    }
    if (--d.pending_snoops == 0) {
      auto cont = std::move(d.snoop_done);
      d.snoop_done = nullptr;
      cont();
    }
  });
}

// ---------------------------------------------------------------------------
// LLC / directory side
// ---------------------------------------------------------------------------

void CoherentSystem::llc_receive(Request r) {
  DirLine& d = dir(r.line);
  if (d.busy) {
    d.waiting.push_back(std::move(r));
    return;
  }
  llc_start(std::move(r));
}

void CoherentSystem::llc_start(Request r) {
  DirLine& d = dir(r.line);
  d.busy = true;
  SimTime start = sim_.now();
  if (is_device(r.from)) start = llc_pipe_.reserve(start);
  sim_.schedule_at(start + SimTime::from_ns(cfg_.t_llc_service),
                   [this, r = std::move(r)]() { llc_process(r); });
}

void CoherentSystem::llc_snoop_all(Address line, std::uint64_t targets, Opcode op,
                                   std::uint64_t txn, std::function<void()> then) {
  DirLine& d = dir(line);
  if (targets == 0) {
    then();
    return;
  }
  d.pending_snoops = std::popcount(targets);
  d.snoop_done = std::move(then);
  for (CacheId c = 0; c <= device_id(); ++c) {
    if ((targets & bit(c)) == 0) continue;
    ProtocolMessage m{Channel::H2DReq, op, line, c, false, txn};
    to_peer(c, m, [this, c, m]() { on_snoop(c, m); });
  }
}

void CoherentSystem::llc_process(Request r) {
  DirLine& d = dir(r.line);
  switch (r.op) {
    case Opcode::RdShared:
      if (d.state == DirState::EM) {
        if (d.owner == r.from) throw SimFault("RdShared from the current owner");
        llc_snoop_all(r.line, bit(*d.owner), Opcode::SnpData, r.txn,
                      [this, r]() { llc_grant(r, StableState::S); });
      } else {
        llc_grant(r, d.state == DirState::S ? StableState::S : StableState::E);
      }
      return;
    case Opcode::RdOwn:
      llc_snoop_all(r.line, d.sharers & ~bit(r.from), Opcode::SnpInv, r.txn,
                    [this, r]() { llc_grant(r, StableState::E); });
      return;
    case Opcode::DirtyEvict:
      if (d.state == DirState::EM && d.owner == r.from) {
        d.on_writeback = [this, r](const LineData& data) {
          DirLine& dl = dir(r.line);
          dl.data = data;
          dl.in_llc = true;
          dl.llc_dirty = true;
          dl.owner.reset();
          dl.sharers = 0;
          dl.state = DirState::I;
          ProtocolMessage gi{Channel::H2DResp, Opcode::GoInvalidate, r.line, r.from,
                             false, r.txn};
          to_peer(r.from, gi, [this, r]() {
            Peer& p = peer(r.from);
            p.wb.erase(r.line.value);
            if (auto n = p.evict_done.extract(r.txn); !n.empty() && n.mapped()) {
              n.mapped()(sim_.now());
            }
          });
          llc_finish(r.line);
        };
        ProtocolMessage pull{Channel::H2DResp, Opcode::GoWritePull, r.line, r.from,
                             false, r.txn};
        to_peer(r.from, pull, [this, r]() {
          Peer& p = peer(r.from);
          const LineData data = p.wb.at(r.line.value).data;
          ProtocolMessage wbm{Channel::D2HResp, Opcode::WritebackData, r.line, r.from,
                              true, r.txn};
          to_llc(r.from, wbm, [this, r, data]() {
            DirLine& dl = dir(r.line);
            auto cb = std::move(dl.on_writeback);
            dl.on_writeback = nullptr;
            cb(data);
          });
        });
        return;
      }
      [[fallthrough]];
    case Opcode::CleanEvict: {
      if (d.owner == r.from) d.owner.reset();
      d.sharers &= ~bit(r.from);
      if (d.sharers == 0) d.state = DirState::I;
      ProtocolMessage gi{Channel::H2DResp, Opcode::GoInvalidate, r.line, r.from, false,
                         r.txn};
      to_peer(r.from, gi, [this, r]() {
        Peer& p = peer(r.from);
        p.wb.erase(r.line.value);
        if (auto n = p.evict_done.extract(r.txn); !n.empty() && n.mapped()) {
          n.mapped()(sim_.now());
        }
      });
      llc_finish(r.line);
      return;
    }
    case Opcode::NCPush:
      llc_snoop_all(r.line, d.sharers, Opcode::SnpInv, r.txn, [this, r]() {
        DirLine& dl = dir(r.line);
        dl.data = r.data;
        dl.in_llc = true;
        dl.llc_dirty = true;
        dl.owner.reset();
        dl.sharers = 0;
        dl.state = DirState::I;
        record_write(r.from, r.line, r.data);
        ProtocolMessage go{Channel::H2DResp, Opcode::Go, r.line, r.from, false, r.txn};
        to_peer(r.from, go, [this, r]() {
          Peer& p = peer(r.from);
          p.wb.erase(r.line.value);
          if (auto n = p.evict_done.extract(r.txn); !n.empty() && n.mapped()) {
            n.mapped()(sim_.now());
          }
        });
        llc_finish(r.line);
      });
      return;
    default:
      throw SimFault("unexpected opcode at LLC: " + std::string(to_string(r.op)));
  }
}

SimTime CoherentSystem::memory_ready(Address line) {
  const SimTime start = mem_channel_.reserve(sim_.now());
  double lat = cfg_.t_dram;
  if (topo_.map.in_device(line)) {
    lat += cfg_.t_cxlmem_adder;
  } else {
    lat += numa_penalty(cfg_, topo_.map.node_of(line));
  }
  return start + SimTime::from_ns(lat);
}

void CoherentSystem::llc_grant(Request r, StableState grant) {
  DirLine& d = dir(r.line);
  SimTime ready = sim_.now();
  Tier tier = Tier::LLC;
  if (!d.in_llc) {
    ready = memory_ready(r.line);
    tier = Tier::MEM;
  }
  sim_.schedule_at(ready, [this, r, grant, tier]() {
    DirLine& dl = dir(r.line);
    if (!dl.in_llc) {
      auto it = memory_.find(r.line.value);
      dl.data = it == memory_.end() ? LineData{} : it->second;
      dl.in_llc = true;
      dl.llc_dirty = false;
    }
    if (grant == StableState::E) {
      dl.state = DirState::EM;
      dl.owner = r.from;
      dl.sharers = bit(r.from);
    } else {
      dl.state = DirState::S;
      dl.owner.reset();
      dl.sharers |= bit(r.from);
    }
    const LineData data = dl.data;
    ProtocolMessage dm{Channel::H2DResp, Opcode::Data, r.line, r.from, true, r.txn};
    ProtocolMessage go{Channel::H2DResp, Opcode::Go, r.line, r.from, false, r.txn,
                       grant};
    to_peer(r.from, dm, [] {});
    to_peer(r.from, go, [this, r, grant, data, tier]() {
      on_grant(r.from, r.line, grant, data, tier);
    });
    llc_finish(r.line);
  });
}

void CoherentSystem::llc_finish(Address line) {
  DirLine& d = dir(line);
  d.busy = false;
  if (!d.waiting.empty()) {
    Request next = std::move(d.waiting.front());
    d.waiting.pop_front();
    llc_start(std::move(next));
  }
}

// ---------------------------------------------------------------------------
// Placement and functional views
// ---------------------------------------------------------------------------

void CoherentSystem::place_in(Address addr, Tier tier) {
  check_range(addr);
  const Address line = addr.line();
  touched_.insert(line.value);
  DirLine& d = dir(line);
  if (d.busy) throw UsageError("place_in on a line with a transaction in flight");
  const LineData v = functional_read(line);
  for (auto& p : peers_) {
    if (CacheModel::Way* w = p->cache.find(line)) {
      if (w->locked) throw UsageError("place_in on a locked line");
      p->cache.invalidate(line);
    }
  }
  d.state = DirState::I;
  d.owner.reset();
  d.sharers = 0;
  memory_[line.value] = v;
  d.llc_dirty = false;
  d.in_llc = tier != Tier::MEM;
  d.data = v;
  if (tier == Tier::HMC) {
    Peer& dev = peer(device_id());
    CacheModel::Way* victim = dev.cache.victim_for(line);
    if (victim == nullptr) throw UsageError("place_in: HMC set fully locked");
    if (victim->valid) {
      DirLine& vd = dir(victim->line);
      if (victim->state == StableState::M) {
        vd.data = victim->data;
        vd.llc_dirty = true;
      }
      vd.sharers &= ~bit(device_id());
      vd.owner.reset();
      vd.state = vd.sharers == 0 ? DirState::I : DirState::S;
    }
    dev.cache.install(*victim, line, StableState::E, v);
    d.state = DirState::EM;
    d.owner = device_id();
    d.sharers = bit(device_id());
  } else if (tier == Tier::L1) {
    throw UsageError("place_in(L1) is not supported");
  }
}

LineData CoherentSystem::functional_read(Address addr) const {
  const Address line = addr.line();
  for (const auto& p : peers_) {
    if (const CacheModel::Way* w = p->cache.find(line);
        w != nullptr && w->state == StableState::M) {
      return w->data;
    }
    if (auto it = p->wb.find(line.value);
        it != p->wb.end() && it->second.dirty && !it->second.snooped) {
      return it->second.data;
    }
  }
  if (const DirLine* d = find_dir(line); d != nullptr && d->in_llc) return d->data;
  auto it = memory_.find(line.value);
  return it == memory_.end() ? LineData{} : it->second;
}

void CoherentSystem::functional_dma_write(Address addr,
                                          std::span<const std::uint8_t> bytes) {
  check_range(addr);
  const Address line = addr.line();
  if (addr.offset() + bytes.size() > kLineBytes) {
    throw UsageError("DMA line write crosses a cacheline boundary");
  }
  touched_.insert(line.value);
  DirLine& d = dir(line);
  if (d.busy) throw SimFault("DMA write to a line with a coherence transaction");
  LineData v = functional_read(line);
  std::copy(bytes.begin(), bytes.end(),
            v.begin() + static_cast<std::ptrdiff_t>(addr.offset()));
  for (auto& p : peers_) {
    if (p->wb.contains(line.value)) throw SimFault("DMA write races a write-back");
    if (CacheModel::Way* w = p->cache.find(line)) {
      if (w->locked) throw SimFault("DMA write to a locked line");
      p->cache.invalidate(line);
    }
  }
  d.state = DirState::I;
  d.owner.reset();
  d.sharers = 0;
  if (d.in_llc) {
    d.data = v;
    d.llc_dirty = true;
  } else {
    memory_[line.value] = v;
  }
  record_write(device_id(), addr, bytes);
}

// ---------------------------------------------------------------------------
// Inspection and checking
// ---------------------------------------------------------------------------

StableState CoherentSystem::state_of(CacheId cache, Address addr) const {
  const CacheModel::Way* w = peer(cache).cache.find(addr.line());
  return w == nullptr ? StableState::I : w->state;
}

DirectoryEntry CoherentSystem::directory(Address addr) const {
  const DirLine* d = find_dir(addr.line());
  return d == nullptr ? DirectoryEntry{} : static_cast<const DirectoryEntry&>(*d);
}

const CacheModel& CoherentSystem::cache(CacheId id) const {
  if (id > device_id()) throw UsageError("no such cache controller");
  return peer(id).cache;
}

bool CoherentSystem::quiescent() const {
  for (const auto& [line, d] : dir_) {
    if (d->busy || !d->waiting.empty()) return false;
  }
  for (const auto& p : peers_) {
    if (!p->mshr.empty() || !p->wb.empty() || !p->stalled.empty() ||
        !p->lock_waiters.empty()) {
      return false;
    }
  }
  return true;
}

std::size_t CoherentSystem::swmr_violations() const {
  std::size_t bad = 0;
  for (std::uint64_t lv : touched_) {
    int writers = 0;
    int readers = 0;
    for (const auto& p : peers_) {
      const StableState s = state_of(p->cache.id(), Address(lv));
      if (s == StableState::M || s == StableState::E) ++writers;
      if (s == StableState::S) ++readers;
    }
    if (writers > 1 || (writers == 1 && readers > 0)) ++bad;
  }
  return bad;
}

std::size_t CoherentSystem::directory_mismatches() const {
  std::size_t bad = 0;
  for (std::uint64_t lv : touched_) {
    const Address line(lv);
    std::uint64_t actual = 0;
    bool any_writable = false;
    for (const auto& p : peers_) {
      const StableState s = state_of(p->cache.id(), line);
      if (s != StableState::I) actual |= bit(p->cache.id());
      if (s == StableState::E || s == StableState::M) any_writable = true;
    }
    const DirectoryEntry d = directory(line);
    bool ok = d.sharers == actual;
    switch (d.state) {
      case DirState::I:
        ok = ok && d.sharers == 0 && !d.owner;
        break;
      case DirState::S:
        ok = ok && d.sharers != 0 && !d.owner && !any_writable;
        break;
      case DirState::EM:
        ok = ok && d.owner && d.sharers == bit(*d.owner);
        break;
    }
    if (!ok) ++bad;
  }
  return bad;
}

std::size_t CoherentSystem::conservation_violations() const {
  return static_cast<std::size_t>(std::count_if(
      open_requests_.begin(), open_requests_.end(),
      [](const auto& kv) { return kv.second != 1; }));
}

void CoherentSystem::record_write(CacheId who, Address addr,
                                  std::span<const std::uint8_t> b) {
  if (!access_log_on_) return;
  access_log_.push_back(AccessRecord{AccessRecord::Kind::Write, addr.line(),
                                     static_cast<std::uint32_t>(addr.offset()),
                                     {b.begin(), b.end()}, who});
}

void CoherentSystem::record_load(CacheId who, Address line, const LineData& data) {
  if (!access_log_on_) return;
  access_log_.push_back(
      AccessRecord{AccessRecord::Kind::Load, line, 0, {data.begin(), data.end()}, who});
}

// ---------------------------------------------------------------------------

std::string_view to_string(Channel c) {
  switch (c) {
    case Channel::D2HReq: return "D2H-Req";
    case Channel::D2HResp: return "D2H-Resp";
    case Channel::H2DReq: return "H2D-Req";
    case Channel::H2DResp: return "H2D-Resp";
  }
  return "?";
}

std::string_view to_string(Opcode op) {
  switch (op) {
    case Opcode::RdOwn: return "RdOwn";
    case Opcode::RdShared: return "RdShared";
    case Opcode::DirtyEvict: return "DirtyEvict";
    case Opcode::CleanEvict: return "CleanEvict";
    case Opcode::NCPush: return "NCPush";
    case Opcode::SnpInv: return "SnpInv";
    case Opcode::SnpData: return "SnpData";
    case Opcode::Go: return "Go";
    case Opcode::GoWritePull: return "GoWritePull";
    case Opcode::GoInvalidate: return "GoInvalidate";
    case Opcode::Data: return "Data";
    case Opcode::WritebackData: return "WritebackData";
  }
  return "?";
}

std::string_view to_string(StableState s) {
  switch (s) {
    case StableState::I: return "I";
    case StableState::S: return "S";
    case StableState::E: return "E";
    case StableState::M: return "M";
  }
  return "?";
}

std::string_view to_string(Tier t) {
  switch (t) {
    case Tier::L1: return "L1";
    case Tier::HMC: return "HMC";
    case Tier::LLC: return "LLC";
    case Tier::MEM: return "MEM";
  }
  return "?";
}

}  // namespace cxlsim
