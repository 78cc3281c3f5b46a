#include "cxlsim/nic.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <ostream>

namespace cxlsim {

namespace {

std::uint64_t load_le64(const LineData& d, std::uint64_t off) {
  std::uint64_t v = 0;
  for (std::uint64_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(d[off + i]) << (8 * i);
  return v;
}

std::array<std::uint8_t, 8> le64(std::uint64_t v) {
  std::array<std::uint8_t, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  return b;
}

std::vector<std::uint64_t> lines_of(Address a, std::uint64_t bytes) {
  std::vector<std::uint64_t> out;
  if (bytes == 0) return out;
  for (std::uint64_t l = a.line().value; l < a.value + bytes; l += kLineBytes) out.push_back(l);
  return out;
}

std::string pe_name(std::uint32_t pe) { return "PE-" + std::to_string(pe); }

}  // namespace

void NicConfig::validate() const {
  if (pe_count < 1) throw ConfigError("field 'pe_count' must be >= 1");
  if (temp_buffer_bytes < kLineBytes) {
    throw ConfigError("field 'temp_buffer_bytes' must be >= 64");
  }
  if (!(dec_bytes_per_cycle > 0) || !(enc_bytes_per_cycle > 0)) {
    throw ConfigError("decoder/encoder bytes_per_cycle must be > 0");
  }
  for (double v : {copy_ns, mmio_ns, rpcnic_field_ns, dec_msg_ns, dec_field_cycles, dec_nested_cycles, enc_msg_ns,
                   enc_field_cycles, devmem_read_ns, devmem_occupancy_ns,
                   construct_field_ns, construct_line_ns}) {
    if (!(v >= 0)) throw ConfigError("nic timing fields must be >= 0");
  }
  if (cxlmem_write_mlp < 1) throw ConfigError("field 'cxlmem_write_mlp' must be >= 1");
  if (prefetch.table_size < 1) throw ConfigError("field 'prefetch_table_size' must be >= 1");
  if (prefetch.threshold > 3) throw ConfigError("field 'prefetch_threshold' must be <= 3");
  if (prefetch.region_bytes < kLineBytes) {
    throw ConfigError("field 'prefetch_region_bytes' must be >= 64");
  }
}

// ---------------------------------------------------------------------------

void NicTrace::record(SimTime tick, std::string engine, std::string action, Address addr,
                      std::uint64_t size) {
  if (os_) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "\t0x%" PRIx64 "\t%" PRIu64 "\n", addr.value, size);
    *os_ << tick.ps() << '\t' << engine << '\t' << action << buf;
  }
  if (on_) records_.push_back({tick, std::move(engine), std::move(action), addr, size});
}

std::size_t NicTrace::count(std::string_view engine_prefix, std::string_view action) const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(), [&](const NicTraceRecord& r) {
        return r.engine.compare(0, engine_prefix.size(), engine_prefix) == 0 &&
               r.action == action;
      }));
}

// ---------------------------------------------------------------------------

PePool::PePool(std::uint32_t pes) : pes_(pes) {
  if (pes == 0) throw ConfigError("PE count must be >= 1");
  for (std::uint32_t i = 0; i < pes; ++i) free_.insert(i);
}

void PePool::submit(std::uint64_t key, Job job) {
  auto& q = queues_[key];
  const bool was_empty = q.empty();
  q.push_back({next_seq_++, std::move(job)});
  ++queued_;
  if (was_empty && !holders_.contains(key)) ready_.emplace(q.front().seq, key);
  dispatch();
}

void PePool::dispatch() {
  if (dispatching_) return;
  dispatching_ = true;
  while (!free_.empty() && !ready_.empty()) {
    const std::uint64_t key = ready_.begin()->second;
    ready_.erase(ready_.begin());
    auto qit = queues_.find(key);
    Pending p = std::move(qit->second.front());
    qit->second.pop_front();
    if (qit->second.empty()) queues_.erase(qit);
    --queued_;
    const std::uint32_t pe = *free_.begin();
    free_.erase(free_.begin());
    const std::uint32_t h = ++holders_[key];
    max_holders_ = std::max(max_holders_, h);
    auto released = std::make_shared<bool>(false);
    p.job(pe, [this, pe, key, released]() {
      if (*released) throw SimFault("PE released twice");
      *released = true;
      release(pe, key);
    });
  }
  dispatching_ = false;
}

void PePool::release(std::uint32_t pe, std::uint64_t key) {
  if (--holders_[key] == 0) holders_.erase(key);
  free_.insert(pe);
  if (auto it = queues_.find(key); it != queues_.end() && !holders_.contains(key)) {
    ready_.emplace(it->second.front().seq, key);
  }
  dispatch();
}

// ---------------------------------------------------------------------------

CxlRaoNic::CxlRaoNic(Simulator& sim, CoherentSystem& coh, const NicConfig& cfg,
                     NicTrace* trace)
    : sim_(sim),
      coh_(coh),
      cfg_(cfg),
      clk_(coh.latency().device_mhz),
      trace_(trace),
      pool_(cfg.pe_count) {
  cfg_.validate();
}

void CxlRaoNic::submit(const RaoRequest& req, RaoCallback done) {
  const SimTime issued = sim_.now();
  pool_.submit(req.target.line().value,
               [this, req, issued, done = std::move(done)](std::uint32_t pe,
                                                           PePool::Release release) {
                 execute(pe, req,
                         [issued, done](const RaoResponse& r) {
                           RaoResponse out = r;
                           out.issued = issued;
                           if (done) done(out);
                         },
                         std::move(release));
               });
}

void CxlRaoNic::execute(std::uint32_t pe, const RaoRequest& req, RaoCallback done,
                        PePool::Release release) {
  auto tr = [this, pe](const char* action, Address a, std::uint64_t size) {
    if (trace_) trace_->record(sim_.now(), pe_name(pe), action, a, size);
  };
  if (req.target.value % 8 != 0) {
    tr("error", req.target, 8);
    sim_.schedule([this, done, release]() {
      RaoResponse r;
      r.error = true;
      r.completion = sim_.now();
      done(r);
      release();
    }, clk_.cycles(1));
    return;
  }
  tr("read", req.target, 8);
  coh_.device_acquire_locked(req.target, [this, req, done, release,
                                          tr](const AccessResult& res) {
    const std::uint64_t old = load_le64(res.data, req.target.offset());
    const std::uint64_t nv = rao_apply(req, old);
    const Tier tier = res.tier;
    tr("lock", req.target, 64);
    sim_.schedule([this, req, done, release, tr, old, nv, tier]() {
      const auto bytes = le64(nv);
      coh_.device_write_locked(req.target, bytes);
      tr("write", req.target, 8);
      sim_.schedule([this, req, done, release, tr, old, tier]() {
        coh_.unlock_line(req.target);
        tr("unlock", req.target, 64);
        RaoResponse r;
        r.old_value = old;
        r.completion = sim_.now();
        r.tier = tier;
        done(r);
        release();
      }, clk_.cycles(cfg_.rao_write_cycles));
    }, clk_.cycles(cfg_.rao_modify_cycles));
  });
}

PcieRaoNic::PcieRaoNic(Simulator& sim, DmaEngine& dma, CoherentSystem& mem,
                       const NicConfig& cfg, NicTrace* trace)
    : sim_(sim),
      dma_(dma),
      mem_(mem),
      cfg_(cfg),
      clk_(dma.config().freq_mhz),
      trace_(trace),
      pool_(cfg.pe_count) {
  cfg_.validate();
}

void PcieRaoNic::submit(const RaoRequest& req, RaoCallback done) {
  const SimTime issued = sim_.now();
  pool_.submit(req.target.value,
               [this, req, issued, done = std::move(done)](std::uint32_t pe,
                                                           PePool::Release release) {
                 execute(pe, req,
                         [issued, done](const RaoResponse& r) {
                           RaoResponse out = r;
                           out.issued = issued;
                           if (done) done(out);
                         },
                         std::move(release));
               });
}

void PcieRaoNic::execute(std::uint32_t pe, const RaoRequest& req, RaoCallback done,
                         PePool::Release release) {
  auto tr = [this](std::string engine, const char* action, Address a, std::uint64_t size) {
    if (trace_) trace_->record(sim_.now(), std::move(engine), action, a, size);
  };
  if (req.target.value % 8 != 0) {
    tr(pe_name(pe), "error", req.target, 8);
    sim_.schedule([this, done, release]() {
      RaoResponse r;
      r.error = true;
      r.completion = sim_.now();
      done(r);
      release();
    }, clk_.cycles(1));
    return;
  }
  tr("dma", "read", req.target, 8);
  dma_.transfer(DmaKind::Read, req.target, 8, [this, pe, req, done, release,
                                              tr](const DmaEngine::Completion&) {
    tr("dma", "read-done", req.target, 8);
    const std::uint64_t old = load_le64(mem_.functional_read(req.target), req.target.offset());
    const std::uint64_t nv = rao_apply(req, old);
    sim_.schedule([this, pe, req, done, release, tr, old, nv]() {
      tr("dma", "write", req.target, 8);
      dma_.transfer(DmaKind::Write, req.target, 8,
                    [this, pe, req, done, release, tr, old, nv](const DmaEngine::Completion&) {
                      const auto bytes = le64(nv);
                      mem_.functional_dma_write(req.target, bytes);
                      tr("dma", "write-done", req.target, 8);
                      tr(pe_name(pe), "ack", req.target, 8);
                      RaoResponse r;
                      r.old_value = old;
                      r.completion = sim_.now();
                      r.tier = Tier::MEM;
                      done(r);
                      release();
                    });
    }, clk_.cycles(cfg_.rao_modify_cycles));
  });
}

// ---------------------------------------------------------------------------

StridePrefetcher::StridePrefetcher(const PrefetcherConfig& cfg, const MemoryMap& map)
    : cfg_(cfg), map_(map) {}

std::vector<Address> StridePrefetcher::on_miss(Address line) {
  std::vector<Address> out;
  if (!cfg_.enabled) return out;
  const std::uint64_t region = line.value / cfg_.region_bytes;
  const auto ln = static_cast<std::int64_t>(line.value / kLineBytes);
  ++clock_;
  auto it = std::find_if(table_.begin(), table_.end(),
                         [&](const Entry& e) { return e.region == region; });
  if (it == table_.end()) {
    Entry e{region, ln, 0, 0, clock_};
    if (table_.size() < cfg_.table_size) {
      table_.push_back(e);
    } else {
      *std::min_element(table_.begin(), table_.end(), [](const Entry& a, const Entry& b) {
        return a.lru < b.lru;
      }) = e;
    }
    return out;
  }
  Entry& e = *it;
  e.lru = clock_;
  const std::int64_t d = ln - e.last_line;
  if (d == 0) return out;
  if (d == e.stride) {
    e.confidence = std::min<std::uint32_t>(3, e.confidence + 1);
  } else {
    if (e.confidence > 0) --e.confidence;
    if (e.confidence == 0) {
      e.stride = d;
      e.confidence = 1;
    }
  }
  e.last_line = ln;
  if (e.confidence >= cfg_.threshold && e.stride != 0) {
    for (std::uint32_t k = 1; k <= cfg_.degree; ++k) {
      const std::int64_t t = ln + e.stride * static_cast<std::int64_t>(k);
      if (t < 0) break;
      const Address a(static_cast<std::uint64_t>(t) * kLineBytes);
      if (!map_.in_host(a)) break;
      out.push_back(a);
    }
  }
  issued_ += out.size();
  return out;
}

// ---------------------------------------------------------------------------
// Allocators and layout
// ---------------------------------------------------------------------------

namespace {

std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

}  // namespace

ObjectAllocator::Placement ArenaAllocator::object(std::uint64_t bytes, bool) {
  cursor_ = align_up(cursor_, kLineBytes);
  const Address a(cursor_);
  cursor_ += bytes;
  return {a, 0};
}

Address ArenaAllocator::blob(std::uint32_t, std::uint64_t bytes) {
  cursor_ = align_up(cursor_, 8);
  const Address a(cursor_);
  cursor_ += bytes;
  return a;
}

void ArenaAllocator::align_line() { cursor_ = align_up(cursor_, kLineBytes); }

SlabAllocator::SlabAllocator(Address base, std::uint64_t slab_bytes, std::uint32_t slabs,
                             std::uint64_t seed)
    : base_(base),
      slab_bytes_(slab_bytes),
      slabs_(slabs),
      rng_(seed, "rpc.slab"),
      cursor_(slabs, 0),
      overflow_(base.value + slab_bytes * slabs) {
  if (slabs == 0 || slab_bytes < kLineBytes) throw ConfigError("bad slab geometry");
}

Address SlabAllocator::bump(std::uint32_t slab, std::uint64_t bytes, std::uint64_t align) {
  std::uint64_t& c = cursor_[slab];
  const std::uint64_t start = align_up(c, align);
  if (start + bytes <= slab_bytes_) {
    c = start + bytes;
    return Address(base_.value + static_cast<std::uint64_t>(slab) * slab_bytes_ + start);
  }
  overflow_ = align_up(overflow_, align);
  const Address a(overflow_);
  overflow_ += bytes;
  return a;
}

ObjectAllocator::Placement SlabAllocator::object(std::uint64_t bytes, bool) {
  const auto slab = static_cast<std::uint32_t>(rng_.uniform(slabs_));
  return {bump(slab, bytes, kLineBytes), slab};
}

Address SlabAllocator::blob(std::uint32_t slab, std::uint64_t bytes) {
  return bump(slab, bytes, 8);
}

std::uint64_t object_bytes(const wire::MessageType& t) {
  const std::uint64_t n = t.fields.size();
  return ((n + 63) / 64 + n) * 8;
}

namespace {

struct Image {
  HostObject& obj;

  LineData& line(std::uint64_t l) { return obj.lines[l]; }
  void put_bytes(Address a, const std::uint8_t* p, std::uint64_t n) {
    while (n > 0) {
      LineData& d = line(a.line().value);
      const std::uint64_t off = a.offset();
      const std::uint64_t k = std::min<std::uint64_t>(n, kLineBytes - off);
      std::memcpy(d.data() + off, p, k);
      a = a + k;
      p += k;
      n -= k;
    }
  }
  void put64(Address a, std::uint64_t v) {
    const auto b = le64(v);
    put_bytes(a, b.data(), 8);
  }
  std::uint64_t get64(Address a) {
    return load_le64(line(a.line().value), a.offset());
  }
};

}  // namespace

Layout layout_message(const wire::Message& m, const wire::RpcSchema& schema,
                      ObjectAllocator& alloc) {
  Layout L;
  Image img{L.image};
  std::function<Address(const wire::Message&, bool, std::uint32_t)> lay =
      [&](const wire::Message& msg, bool root, std::uint32_t depth) -> Address {
    if (depth > schema.max_depth) throw wire::EncodeError("nesting deeper than max_depth");
    if (msg.type >= schema.types.size()) throw wire::EncodeError("message type out of range");
    const wire::MessageType& t = schema.types[msg.type];
    const std::uint64_t n = t.fields.size();
    const std::uint64_t pw = (n + 63) / 64;
    const ObjectAllocator::Placement p = alloc.object(object_bytes(t), root);
    ++L.objects;
    for (const wire::Field& f : msg.fields) {
      const int idx = t.index_of(f.number);
      if (idx < 0) {
        throw wire::EncodeError("field " + std::to_string(f.number) + " not in type " + t.name);
      }
      const auto i = static_cast<std::uint64_t>(idx);
      const wire::FieldSpec& spec = t.fields[i];
      const Address pres = p.addr + (i / 64) * 8;
      img.put64(pres, img.get64(pres) | (std::uint64_t{1} << (i % 64)));
      const Address slot = p.addr + (pw + i) * 8;
      LayoutStep step;
      step.lines = {pres.line().value};
      if (slot.line() != pres.line()) step.lines.push_back(slot.line().value);
      switch (spec.kind) {
        case wire::FieldKind::Scalar:
          img.put64(slot, f.u);
          step.kind = wire::DecodeEvent::Kind::Scalar;
          step.payload_bytes = 8;
          L.segments.emplace_back(slot, 8);
          ++L.fields;
          L.payload_bytes += 8;
          L.steps.push_back(std::move(step));
          break;
        case wire::FieldKind::Bytes: {
          const std::uint64_t len = f.bytes.size();
          const Address b = alloc.blob(p.slab, 8 + len);
          img.put64(b, len);
          img.put_bytes(b + 8, reinterpret_cast<const std::uint8_t*>(f.bytes.data()), len);
          img.put64(slot, b.value);
          for (std::uint64_t l : lines_of(b, 8 + len)) {
            if (std::find(step.lines.begin(), step.lines.end(), l) == step.lines.end()) {
              step.lines.push_back(l);
            }
          }
          step.kind = wire::DecodeEvent::Kind::Bytes;
          step.payload_bytes = len;
          L.segments.emplace_back(b, 8 + len);
          ++L.fields;
          L.payload_bytes += len;
          L.steps.push_back(std::move(step));
          break;
        }
        case wire::FieldKind::Nested: {
          if (f.sub.size() != 1 || f.sub.front().type != spec.nested_type) {
            throw wire::EncodeError("unresolvable nested reference at field " +
                                    std::to_string(f.number));
          }
          step.kind = wire::DecodeEvent::Kind::BeginNested;
          L.steps.push_back(std::move(step));
          const Address child = lay(f.sub.front(), false, depth + 1);
          img.put64(slot, child.value);
          L.steps.push_back({wire::DecodeEvent::Kind::EndNested, 0, {}});
          break;
        }
      }
    }
    return p.addr;
  };
  L.image.root = lay(m, true, 1);
  return L;
}

namespace {

struct MemReader {
  const CoherentSystem& mem;
  std::uint64_t cached_line = ~0ULL;
  LineData cached{};

  std::uint8_t byte(Address a) {
    if (a.line().value != cached_line) {
      cached_line = a.line().value;
      cached = mem.functional_read(a.line());
    }
    return cached[a.offset()];
  }
  std::uint64_t u64(Address a) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte(a + static_cast<std::uint64_t>(i))) << (8 * i);
    return v;
  }
  bool valid(Address a) const {
    const MemoryMap& m = mem.topology().map;
    return a.value != 0 && (m.in_host(a) || m.in_device(a));
  }
};

}  // namespace

wire::Message read_object(const CoherentSystem& mem, Address root,
                          const wire::RpcSchema& schema) {
  MemReader rd{mem};
  std::function<wire::Message(Address, std::uint32_t, std::uint32_t)> go =
      [&](Address a, std::uint32_t type, std::uint32_t depth) -> wire::Message {
    if (depth > schema.max_depth) throw wire::EncodeError("object nesting exceeds max_depth");
    if (!rd.valid(a) || a.offset() != 0) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "0x%" PRIx64, a.value);
      throw wire::EncodeError(std::string("unresolvable nested reference ") + buf);
    }
    const wire::MessageType& t = schema.types.at(type);
    const std::uint64_t n = t.fields.size();
    const std::uint64_t pw = (n + 63) / 64;
    wire::Message m{type, {}};
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::uint64_t word = rd.u64(a + (i / 64) * 8);
      if ((word >> (i % 64) & 1) == 0) continue;
      const std::uint64_t slot = rd.u64(a + (pw + i) * 8);
      const wire::FieldSpec& spec = t.fields[i];
      wire::Field f;
      f.number = spec.number;
      switch (spec.kind) {
        case wire::FieldKind::Scalar:
          f.u = slot;
          break;
        case wire::FieldKind::Bytes: {
          if (!rd.valid(Address(slot))) throw wire::EncodeError("unresolvable string reference");
          const std::uint64_t len = rd.u64(Address(slot));
          f.bytes.resize(len);
          for (std::uint64_t k = 0; k < len; ++k) {
            f.bytes[k] = static_cast<char>(rd.byte(Address(slot + 8 + k)));
          }
          break;
        }
        case wire::FieldKind::Nested:
          f.sub.push_back(go(Address(slot), spec.nested_type, depth + 1));
          break;
      }
      m.fields.push_back(std::move(f));
    }
    return m;
  };
  return go(root, schema.root, 1);
}

// ---------------------------------------------------------------------------
// RPC engine
// ---------------------------------------------------------------------------

std::string_view to_string(SerMode m) {
  switch (m) {
    case SerMode::CxlMem: return "cxl-mem";
    case SerMode::CxlCache: return "cxl-cache";
    case SerMode::CxlCachePrefetch: return "cxl-cache+prefetch";
  }
  return "?";
}

RpcEngine::RpcEngine(Simulator& sim, CoherentSystem& coh, DmaEngine& dma,
                     const NicConfig& cfg, NicTrace* trace)
    : sim_(sim),
      coh_(coh),
      dma_(dma),
      cfg_(cfg),
      trace_(trace),
      device_mhz_(coh.latency().device_mhz),
      devmem_(SimTime::from_ns(cfg.devmem_occupancy_ns)) {
  cfg_.validate();
  PrefetcherConfig pc = cfg_.prefetch;
  pc.enabled = true;
  prefetcher_ = std::make_unique<StridePrefetcher>(pc, coh.topology().map);
  coh_.set_device_miss_observer([this](Address line) {
    if (!prefetch_active_) return;
    for (Address a : prefetcher_->on_miss(line)) {
      this->trace("ser", "prefetch", a, kLineBytes);
      coh_.device_prefetch(a);
    }
  });
}

void RpcEngine::set_ring(Address ring) {
  ring_ = ring.line();
  doorbell_ = ring_ + kLineBytes;
  coh_.place_in(ring_, Tier::LLC);
  coh_.place_in(doorbell_, Tier::LLC);
}

void RpcEngine::trace(std::string_view engine, std::string_view action, Address a,
                      std::uint64_t size) {
  if (trace_) trace_->record(sim_.now(), std::string(engine), std::string(action), a, size);
}

double RpcEngine::decode_cost(const LayoutStep& s) const {
  switch (s.kind) {
    case wire::DecodeEvent::Kind::Scalar:
      return cycles_ns(cfg_.dec_field_cycles);
    case wire::DecodeEvent::Kind::BeginNested:
      return cycles_ns(cfg_.dec_field_cycles + cfg_.dec_nested_cycles);
    case wire::DecodeEvent::Kind::Bytes:
      return cycles_ns(cfg_.dec_field_cycles +
                       static_cast<double>(s.payload_bytes) / cfg_.dec_bytes_per_cycle);
    case wire::DecodeEvent::Kind::EndNested:
      return 0.0;
  }
  return 0.0;
}

namespace {

/// Decoder timeline: when each destination line receives its last write.
struct Timeline {
  std::vector<std::pair<double, std::uint64_t>> line_final;  // sorted by time, then line
  double end = 0;
};

template <typename Cost>
Timeline decode_timeline(const Layout& L, double msg_ns, Cost cost) {
  std::map<std::uint64_t, double> fin;
  double t = msg_ns;
  for (const LayoutStep& s : L.steps) {
    t += cost(s);
    for (std::uint64_t l : s.lines) fin[l] = t;
  }
  Timeline tl;
  tl.end = t;
  for (const auto& [l, ft] : fin) tl.line_final.emplace_back(ft, l);
  std::sort(tl.line_final.begin(), tl.line_final.end());
  return tl;
}

}  // namespace

void RpcEngine::cxl_deserialize(const wire::WireBuffer& w, const wire::RpcSchema& schema,
                                ArenaAllocator& arena, DeserCallback done) {
  if (ring_.value == 0) throw UsageError("RpcEngine ring not set");
  const SimTime t0 = sim_.now();
  const wire::Message m = wire::decode_message(w, schema);
  arena.align_line();
  const std::uint64_t start_used = arena.used();
  Layout L = layout_message(m, schema, arena);
  const Timeline tl = decode_timeline(L, cfg_.dec_msg_ns,
                                      [this](const LayoutStep& s) { return decode_cost(s); });

  struct State {
    DeserResult res;
    std::size_t pending = 0;
    bool decoded = false;
    DeserCallback done;
  };
  auto st = std::make_shared<State>();
  st->res.object = std::move(L.image);
  st->res.started = t0;
  st->res.pushes = tl.line_final.size();
  st->res.arena_bytes = arena.used() - start_used;
  st->pending = tl.line_final.size();
  st->done = std::move(done);
  trace("deser", "decode", st->res.object.root, w.size());

  auto finish = [this, st]() {
    trace("deser", "ring", ring_, 8);
    const auto head = le64(++ring_head_);
    coh_.device_store(ring_, head, [this, st](const AccessResult&) {
      st->res.completed = sim_.now();
      st->res.ring_updates = 1;
      coh_.host_access(0, AccessKind::Load, ring_, {}, nullptr);
      st->done(st->res);
    });
  };
  for (const auto& [ft, line] : tl.line_final) {
    sim_.schedule_at(t0 + SimTime::from_ns(ft), [this, st, line, finish]() {
      trace("deser", "push", Address(line), kLineBytes);
      coh_.ncp_push(Address(line), st->res.object.lines.at(line), [st, finish](SimTime) {
        if (--st->pending == 0 && st->decoded) finish();
      });
    });
  }
  sim_.schedule_at(t0 + SimTime::from_ns(tl.end), [st, finish]() {
    st->decoded = true;
    if (st->pending == 0) finish();
  });
}

void RpcEngine::rpcnic_deserialize(const wire::WireBuffer& w, const wire::RpcSchema& schema,
                                   ArenaAllocator& arena, DeserCallback done) {
  if (ring_.value == 0) throw UsageError("RpcEngine ring not set");
  const SimTime t0 = sim_.now();
  const wire::Message m = wire::decode_message(w, schema);
  arena.align_line();
  const Address begin = arena.base() + arena.used();
  Layout L = layout_message(m, schema, arena);
  const Address end = arena.base() + arena.used();
  const Timeline tl = decode_timeline(L, cfg_.dec_msg_ns,
                                      [this](const LayoutStep& s) { return decode_cost(s); });

  // One flush per temp-buffer-sized chunk, issued once its last line is final.
  struct Chunk {
    Address base;
    std::uint64_t size;
    double ready;
  };
  std::vector<Chunk> chunks;
  const std::uint64_t total = std::max<std::uint64_t>(end.value - begin.value, 8);
  for (std::uint64_t off = 0; off < total; off += cfg_.temp_buffer_bytes) {
    chunks.push_back({begin + off, std::min<std::uint64_t>(cfg_.temp_buffer_bytes, total - off),
                      0.0});
  }
  for (const auto& [ft, line] : tl.line_final) {
    const std::uint64_t k = (line - begin.value) / cfg_.temp_buffer_bytes;
    Chunk& c = chunks[std::min<std::uint64_t>(k, chunks.size() - 1)];
    c.ready = std::max(c.ready, ft);
  }
  chunks.back().ready = tl.end;

  struct State {
    DeserResult res;
    std::size_t pending = 0;
    std::size_t fields = 0;
    DeserCallback done;
  };
  auto st = std::make_shared<State>();
  st->res.object = std::move(L.image);
  st->res.started = t0;
  st->res.dma_flushes = chunks.size();
  st->fields = L.fields;
  st->res.arena_bytes = end.value - begin.value;
  st->pending = chunks.size();
  st->done = std::move(done);
  trace("deser", "decode", st->res.object.root, w.size());

  for (const Chunk& c : chunks) {
    sim_.schedule_at(t0 + SimTime::from_ns(c.ready), [this, st, c]() {
      trace("deser", "flush", c.base, c.size);
      dma_.transfer(DmaKind::Write, c.base, c.size, [this, st, c](const DmaEngine::Completion&) {
        for (auto it = st->res.object.lines.lower_bound(c.base.value);
             it != st->res.object.lines.end() && it->first < c.base.value + c.size; ++it) {
          coh_.functional_dma_write(Address(it->first), it->second);
        }
        if (--st->pending > 0) return;
        trace("deser", "ring", ring_, 8);
        dma_.transfer(DmaKind::Write, ring_, 8, [this, st](const DmaEngine::Completion&) {
          coh_.functional_dma_write(ring_, le64(++ring_head_));
          st->res.ring_updates = 1;
          sim_.schedule([this, st]() {
            st->res.completed = sim_.now();
            st->done(st->res);
          }, SimTime::from_ns(cfg_.rpcnic_field_ns * static_cast<double>(st->fields)));
        });
      });
    });
  }
}

Layout RpcEngine::construct(const wire::Message& m, const wire::RpcSchema& schema,
                            ObjectAllocator& alloc) {
  Layout L = layout_message(m, schema, alloc);
  const MemoryMap& map = coh_.topology().map;
  std::set<std::uint64_t> extent;
  for (const auto& [l, d] : L.image.lines) {
    coh_.functional_dma_write(Address(l), d);
    extent.insert(l);
  }
  // whole objects are resident, not only the lines holding present fields
  Image img{L.image};
  std::function<void(Address, std::uint32_t)> objects = [&](Address a, std::uint32_t type) {
    const wire::MessageType& t = schema.types[type];
    const std::uint64_t n = t.fields.size();
    const std::uint64_t pw = (n + 63) / 64;
    for (std::uint64_t l : lines_of(a, object_bytes(t))) extent.insert(l);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (t.fields[i].kind != wire::FieldKind::Nested) continue;
      if ((img.get64(a + (i / 64) * 8) >> (i % 64) & 1) == 0) continue;
      objects(Address(img.get64(a + (pw + i) * 8)), t.fields[i].nested_type);
    }
  };
  objects(L.image.root, schema.root);
  for (std::uint64_t l : extent) {
    coh_.place_in(Address(l), map.in_device(Address(l)) ? Tier::MEM : Tier::LLC);
  }
  return L;
}

double RpcEngine::construction_ns(const Layout& l, bool device_memory) const {
  const auto lines = static_cast<double>(l.image.lines.size());
  double t = static_cast<double>(l.fields) * cfg_.construct_field_ns +
             lines * cfg_.construct_line_ns;
  if (device_memory) {
    t += lines * coh_.latency().t_cxlmem_adder / cfg_.cxlmem_write_mlp;
  }
  return t;
}

void RpcEngine::notify(std::function<void()> then) {
  trace("ser", "doorbell", doorbell_, 8);
  const auto v = le64(ring_head_);
  coh_.host_access(0, AccessKind::Store, doorbell_, v,
                   [this, then = std::move(then)](const AccessResult&) {
                     coh_.device_load(doorbell_, [then](const AccessResult&) { then(); });
                   });
}

// Serializer fetch engine: visits present fields in order, one line buffer,
// follows nested pointers depth-first. String payload lines are requested
// together once the header line (length) is known. Encoding runs behind the
// fetches on its own timeline.
struct RpcEngine::SerWalk : std::enable_shared_from_this<RpcEngine::SerWalk> {
  RpcEngine* eng = nullptr;
  const wire::RpcSchema* schema = nullptr;
  SerMode mode = SerMode::CxlCache;
  SimTime enc_free;
  std::uint64_t loads = 0;
  std::uint64_t cur_line = ~0ULL;

  void encode(double ns) {
    enc_free = max(eng->sim_.now(), enc_free) + SimTime::from_ns(ns);
  }

  void load_lines(const std::vector<std::uint64_t>& lines, std::function<void()> then) {
    if (lines.empty()) {
      then();
      return;
    }
    auto pending = std::make_shared<std::size_t>(lines.size());
    auto cont = std::make_shared<std::function<void()>>(std::move(then));
    for (std::uint64_t l : lines) {
      ++loads;
      eng->trace("ser", "load", Address(l), kLineBytes);
      auto cb = [pending, cont](const AccessResult&) {
        if (--*pending == 0) (*cont)();
      };
      if (mode == SerMode::CxlMem) {
        Simulator& sim = eng->sim_;
        const SimTime start = eng->devmem_.reserve(sim.now());
        const SimTime lat = (start - sim.now()) + SimTime::from_ns(eng->cfg_.devmem_read_ns);
        eng->coh_.device_local_read(Address(l), lat, cb);
      } else {
        eng->coh_.device_load(Address(l), cb);
      }
    }
  }

  void ensure(Address a, std::function<void()> then) {
    const std::uint64_t l = a.line().value;
    if (l == cur_line) {
      then();
      return;
    }
    cur_line = l;
    load_lines({l}, std::move(then));
  }

  void object(Address a, std::uint32_t type, std::function<void()> then) {
    auto self = shared_from_this();
    ensure(a, [self, a, type, then = std::move(then)]() mutable {
      const wire::MessageType& t = self->schema->types[type];
      const std::uint64_t n = t.fields.size();
      MemReader rd{self->eng->coh_};
      auto present = std::make_shared<std::vector<std::uint64_t>>();
      for (std::uint64_t i = 0; i < n; ++i) {
        if ((rd.u64(a + (i / 64) * 8) >> (i % 64) & 1) != 0) present->push_back(i);
      }
      self->field(a, type, present, 0, std::move(then));
    });
  }

  void field(Address a, std::uint32_t type, std::shared_ptr<std::vector<std::uint64_t>> present,
             std::size_t j, std::function<void()> then) {
    if (j == present->size()) {
      then();
      return;
    }
    auto self = shared_from_this();
    const wire::MessageType& t = schema->types[type];
    const std::uint64_t i = (*present)[j];
    const std::uint64_t pw = (t.fields.size() + 63) / 64;
    const Address slot = a + (pw + i) * 8;
    auto next = [self, a, type, present, j, then]() mutable {
      self->field(a, type, present, j + 1, std::move(then));
    };
    ensure(slot, [self, slot, i, type, next]() mutable {
      const NicConfig& cfg = self->eng->cfg_;
      const wire::FieldSpec& spec = self->schema->types[type].fields[i];
      MemReader rd{self->eng->coh_};
      const std::uint64_t v = rd.u64(slot);
      switch (spec.kind) {
        case wire::FieldKind::Scalar:
          self->encode(self->eng->cycles_ns(cfg.enc_field_cycles));
          next();
          break;
        case wire::FieldKind::Bytes:
          self->blob(Address(v), next);
          break;
        case wire::FieldKind::Nested:
          self->encode(self->eng->cycles_ns(cfg.enc_field_cycles));
          self->object(Address(v), spec.nested_type, next);
          break;
      }
    });
  }

  void blob(Address b, std::function<void()> then) {
    auto self = shared_from_this();
    ensure(b, [self, b, then = std::move(then)]() mutable {
      MemReader rd{self->eng->coh_};
      const std::uint64_t len = rd.u64(b);
      std::vector<std::uint64_t> rest;
      for (std::uint64_t l : lines_of(b, 8 + len)) {
        if (l != b.line().value) rest.push_back(l);
      }
      self->load_lines(rest, [self, len, then = std::move(then)]() {
        const NicConfig& cfg = self->eng->cfg_;
        self->encode(self->eng->cycles_ns(cfg.enc_field_cycles +
                                          static_cast<double>(len) / cfg.enc_bytes_per_cycle));
        then();
      });
    });
  }
};

void RpcEngine::cxl_serialize(const Layout& obj, const wire::RpcSchema& schema, SerMode mode,
                              SerCallback done) {
  if (ring_.value == 0) throw UsageError("RpcEngine ring not set");
  const SimTime t0 = sim_.now();
  auto res = std::make_shared<SerResult>();
  res->wire = wire::encode_message(read_object(coh_, obj.image.root, schema), schema);
  res->started = t0;
  res->doorbells = 1;
  notify([this, res, &schema, mode, root = obj.image.root, done = std::move(done)]() {
    prefetch_active_ = mode == SerMode::CxlCachePrefetch;
    auto walk = std::make_shared<SerWalk>();
    walk->eng = this;
    walk->schema = &schema;
    walk->mode = mode;
    walk->encode(cfg_.enc_msg_ns);
    walk->object(root, schema.root, [this, walk, res, done]() {
      prefetch_active_ = false;
      const SimTime end = max(sim_.now(), walk->enc_free);
      res->loads = walk->loads;
      sim_.schedule_at(end, [this, res, done]() {
        res->completed = sim_.now();
        trace("ser", "done", Address(), res->wire.size());
        done(*res);
      });
    });
  });
}

void RpcEngine::rpcnic_serialize(const Layout& obj, const wire::RpcSchema& schema,
                                 SerCallback done) {
  const SimTime t0 = sim_.now();
  auto res = std::make_shared<SerResult>();
  res->wire = wire::encode_message(read_object(coh_, obj.image.root, schema), schema);
  res->started = t0;
  std::uint64_t staged = 0;
  SimTime t = t0;
  for (const auto& [a, size] : obj.segments) {
    if (trace_) trace_->record(t, "cpu", "copy", a, size);
    t += SimTime::from_ns(cfg_.copy_ns);
    staged += size;
  }
  res->copies = obj.segments.size();
  res->doorbells = 1;
  res->dma_reads = 1;
  std::uint64_t blob_bytes = 0;
  for (const LayoutStep& s : obj.steps) {
    if (s.kind == wire::DecodeEvent::Kind::Bytes) blob_bytes += s.payload_bytes;
  }
  const double encode_ns =
      cfg_.enc_msg_ns +
      cycles_ns(cfg_.enc_field_cycles * static_cast<double>(obj.fields + obj.objects - 1) +
                static_cast<double>(blob_bytes) / cfg_.enc_bytes_per_cycle);
  sim_.schedule_at(t, [this, res, staged, encode_ns, root = obj.image.root,
                       done = std::move(done)]() {
    trace("cpu", "doorbell", Address(), 8);
    sim_.schedule([this, res, staged, encode_ns, root, done]() {
      trace("dma", "read", root, staged);
      dma_.transfer(DmaKind::Read, root, std::max<std::uint64_t>(staged, 8),
                    [this, res, encode_ns, done](const DmaEngine::Completion&) {
                      sim_.schedule([this, res, done]() {
                        res->completed = sim_.now();
                        trace("ser", "done", Address(), res->wire.size());
                        done(*res);
                      }, SimTime::from_ns(encode_ns));
                    });
    }, SimTime::from_ns(cfg_.mmio_ns));
  });
}

}  // namespace cxlsim
