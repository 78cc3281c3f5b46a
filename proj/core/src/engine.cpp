#include "cxlsim/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cxlsim {

SimTime SimTime::from_ns(double ns) {
  if (!(ns >= 0.0)) throw UsageError("negative or NaN duration");
  return SimTime(static_cast<std::uint64_t>(std::llround(ns * 1000.0)));
}

ClockDomain::ClockDomain(std::uint64_t mhz) : mhz_(mhz) {
  if (mhz == 0) throw ConfigError("clock frequency must be positive");
}

// ---------------------------------------------------------------------------

Simulator::Simulator(std::uint64_t max_events) : max_events_(max_events) {}

EventId Simulator::schedule(ComponentId target, std::function<void()> payload,
                            SimTime delay) {
  return schedule_at(now_ + delay, std::move(payload), target);
}

EventId Simulator::schedule_at(SimTime when, std::function<void()> payload,
                               ComponentId target) {
  if (finalized_) throw UsageError("schedule() after simulation was finalized");
  if (when < now_) throw UsageError("cannot schedule an event in the past");
  const EventId id = next_sequence_++;
  queue_.push(Event{when, id, target, std::move(payload)});
  return id;
}

SimTime Simulator::run_to_completion() {
  while (!queue_.empty()) {
    if (delivered_ >= max_events_) {
      throw SimFault("event-count ceiling of " + std::to_string(max_events_) +
                     " reached");
    }
    Event ev = queue_.top();
    queue_.pop();
    now_ = ev.fire_at;
    last_fired_ = ev.fire_at;
    ++delivered_;
    if (observer_) observer_(ev);
    if (ev.payload) ev.payload();
  }
  return last_fired_;
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

std::uint64_t RandomStream::stream_seed(std::uint64_t master_seed,
                                        std::string_view stream_name) {
  // FNV-1a over the name, then mixed with the master seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream_name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t x = master_seed ^ rotl(h, 17);
  return splitmix64(x);
}

RandomStream::RandomStream(std::uint64_t master_seed,
                           std::string_view stream_name)
    : RandomStream(stream_seed(master_seed, stream_name)) {}

RandomStream::RandomStream(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t RandomStream::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

std::uint64_t RandomStream::uniform(std::uint64_t bound) {
  if (bound == 0) throw UsageError("uniform(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % bound;
}

double RandomStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------

double StatSeries::percentile(double p) const {
  if (samples_.empty()) {
    throw UsageError("percentile of empty series '" + name_ + "'");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw UsageError("percentile outside [0,1]");
  std::vector<double> sorted = samples_;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  // The epsilon absorbs binary representation error in p*n (0.07*100).
  auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

double StatSeries::mean() const {
  if (samples_.empty()) throw UsageError("mean of empty series '" + name_ + "'");
  return std::accumulate(samples_.begin(), samples_.end(), 0.0) /
         static_cast<double>(samples_.size());
}

double StatSeries::stddev() const {
  const double m = mean();
  double acc = 0.0;
  for (double v : samples_) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<double>(samples_.size()));
}

double percentile(const StatSeries& series, double p) {
  return series.percentile(p);
}

}  // namespace cxlsim
