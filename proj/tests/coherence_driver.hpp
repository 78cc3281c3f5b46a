// Randomized mixed-traffic driver for the coherence property checks.

#pragma once

#include <cstdint>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "cxlsim/coherence.hpp"

namespace cxlsim::fixtures {

struct PropertyOutcome {
  std::uint64_t ops = 0;
  std::uint64_t events = 0;
  std::uint64_t swmr_violations = 0;       // summed over event boundaries
  std::uint64_t data_violations = 0;
  std::uint64_t loads_checked = 0;
  std::size_t directory_mismatches = 0;
  std::size_t conservation_violations = 0;
  std::size_t locked_snoop_violations = 0;
  std::uint64_t requests = 0;
  bool quiescent = false;
  std::uint64_t evictions = 0;
  std::uint64_t rao_ops = 0;
  std::uint64_t pushes = 0;
};

/// Issues `steps` random operations over 64 lines, keeping up to `width` in
/// flight. The lines collide in a handful of L1/HMC sets so replacement and
/// write-back races are exercised.
inline PropertyOutcome run_coherence_property(std::uint64_t seed, std::uint64_t steps,
                                              std::uint32_t width = 8,
                                              std::uint32_t check_every = 1) {
  Simulator sim;
  LatencyConfig cfg;
  Topology topo;
  topo.cores = 2;
  CoherentSystem coh(sim, cfg, topo);
  coh.enable_access_log(true);
  RandomStream rng(seed, "coherence-property");

  std::vector<Address> lines;
  const Address base = topo.map.node_base(7);
  for (std::uint64_t i = 0; i < 64; ++i) lines.push_back(base + i * 64 * 128);

  PropertyOutcome out;
  std::uint64_t issued = 0;
  std::uint64_t counter = 1;
  std::uint32_t in_flight = 0;

  std::uint64_t boundary = 0;
  sim.set_delivery_observer([&](const Event&) {
    if (++boundary % check_every == 0) out.swmr_violations += coh.swmr_violations();
  });

  std::function<void()> issue;
  auto finish = [&]() {
    --in_flight;
    sim.schedule([&] { issue(); }, SimTime::from_ns(static_cast<double>(rng.uniform(40))));
  };
  auto value = [&]() {
    std::vector<std::uint8_t> b(8);
    const std::uint64_t v = counter++;
    std::memcpy(b.data(), &v, 8);
    return b;
  };

  issue = [&]() {
    while (in_flight < width && issued < steps) {
      ++issued;
      ++in_flight;
      const Address line = lines[rng.uniform(lines.size())];
      const Address word = line + 8 * rng.uniform(8);
      const std::uint32_t core = static_cast<std::uint32_t>(rng.uniform(topo.cores));
      const CacheId dev = coh.device_id();
      switch (rng.uniform(10)) {
        case 0:
        case 1:
          coh.host_access(core, AccessKind::Load, line, {},
                          [&](const AccessResult&) { finish(); });
          break;
        case 2:
          coh.host_access(core, AccessKind::Store, word, value(),
                          [&](const AccessResult&) { finish(); });
          break;
        case 3:
        case 4:
          coh.device_load(line, [&](const AccessResult&) { finish(); });
          break;
        case 5:
          coh.device_store(word, value(), [&](const AccessResult&) { finish(); });
          break;
        case 6: {
          if (coh.is_locked(line)) {
            coh.device_load(line, [&](const AccessResult&) { finish(); });
            break;
          }
          LineData d{};
          const std::uint64_t v = counter++;
          std::memcpy(d.data(), &v, 8);
          ++out.pushes;
          coh.ncp_push(line, d, [&](SimTime) { finish(); });
          break;
        }
        case 7: {
          ++out.rao_ops;
          coh.device_acquire_locked(word, [&, word](const AccessResult& r) {
            std::uint64_t old = 0;
            std::memcpy(&old, r.data.data() + word.offset(), 8);
            const std::uint64_t nv = old + 1;
            std::vector<std::uint8_t> b(8);
            std::memcpy(b.data(), &nv, 8);
            sim.schedule([&, word, b] {
              coh.device_write_locked(word, b);
              coh.unlock_line(word);
              finish();
            }, SimTime::from_ns(20));
          });
          break;
        }
        case 8:
          if (coh.state_of(dev, line) != StableState::I && !coh.is_locked(line)) {
            ++out.evictions;
            coh.hmc_evict(line, [&](SimTime) { finish(); });
          } else {
            coh.device_prefetch(line);
            sim.schedule([&] { finish(); });
          }
          break;
        default:
          coh.host_access(core, AccessKind::Load, word, {},
                          [&](const AccessResult&) { finish(); });
          break;
      }
    }
  };
  issue();
  sim.run_to_completion();

  out.ops = issued;
  out.events = sim.delivered();
  out.quiescent = coh.quiescent() && in_flight == 0;
  out.directory_mismatches = coh.directory_mismatches();
  out.conservation_violations = coh.conservation_violations();
  out.locked_snoop_violations = coh.locked_snoop_violations();
  out.requests = coh.credits().acquired_total();

  std::unordered_map<std::uint64_t, LineData> oracle;
  for (const auto& rec : coh.access_log()) {
    LineData& cur = oracle[rec.line.value];
    if (rec.kind == AccessRecord::Kind::Write) {
      std::memcpy(cur.data() + rec.offset, rec.bytes.data(), rec.bytes.size());
    } else {
      ++out.loads_checked;
      if (std::memcmp(cur.data(), rec.bytes.data(), kLineBytes) != 0) ++out.data_violations;
    }
  }
  for (const Address& l : lines) {
    auto it = oracle.find(l.value);
    const LineData expect = it == oracle.end() ? LineData{} : it->second;
    if (coh.functional_read(l) != expect) ++out.data_violations;
  }
  return out;
}

}  // namespace cxlsim::fixtures
