// Discrete-event kernel, clock domains, seeded random streams and statistics.

#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <queue>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cxlsim {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Misuse of an API (scheduling after finalize, bad arguments).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A simulated fault: address out of range, event ceiling hit, protocol breach.
class SimFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

/// Simulation time in integer picoseconds.
class SimTime {
 public:
  constexpr SimTime() = default;
  constexpr explicit SimTime(std::uint64_t ps) : ps_(ps) {}

  static constexpr SimTime from_ps(std::uint64_t ps) { return SimTime(ps); }
  /// Rounds to the nearest picosecond. Negative inputs are a usage error.
  static SimTime from_ns(double ns);

  constexpr std::uint64_t ps() const { return ps_; }
  constexpr double ns() const { return static_cast<double>(ps_) / 1000.0; }

  constexpr SimTime operator+(SimTime o) const { return SimTime(ps_ + o.ps_); }
  constexpr SimTime& operator+=(SimTime o) {
    ps_ += o.ps_;
    return *this;
  }
  /// Saturates at zero; time differences are never negative.
  constexpr SimTime operator-(SimTime o) const {
    return SimTime(ps_ > o.ps_ ? ps_ - o.ps_ : 0);
  }
  constexpr SimTime operator*(std::uint64_t k) const { return SimTime(ps_ * k); }
  constexpr auto operator<=>(const SimTime&) const = default;

 private:
  std::uint64_t ps_ = 0;
};

constexpr SimTime max(SimTime a, SimTime b) { return a < b ? b : a; }

/// A clock domain with cycle length 1e6/f ps. The cycle length is kept as the
/// exact rational 1e6/f; conversions of a cycle count round once, at the end.
class ClockDomain {
 public:
  explicit ClockDomain(std::uint64_t mhz);

  std::uint64_t mhz() const { return mhz_; }
  SimTime cycles(std::uint64_t n) const {
    return SimTime((n * 1'000'000ULL + mhz_ / 2) / mhz_);
  }
  /// Whole cycles elapsed in `t`.
  std::uint64_t to_cycles(SimTime t) const {
    return t.ps() * mhz_ / 1'000'000ULL;
  }

 private:
  std::uint64_t mhz_;
};

// ---------------------------------------------------------------------------
// Event kernel
// ---------------------------------------------------------------------------

using EventId = std::uint64_t;
using ComponentId = std::uint32_t;

struct Event {
  SimTime fire_at;
  std::uint64_t sequence = 0;
  ComponentId target = 0;
  std::function<void()> payload;
};

/// Single-threaded discrete-event scheduler. Events fire in (fire_at,
/// sequence) order; sequence is a global insertion counter.
class Simulator {
 public:
  static constexpr std::uint64_t kDefaultMaxEvents = 10'000'000'000ULL;

  explicit Simulator(std::uint64_t max_events = kDefaultMaxEvents);
  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  SimTime now() const { return now_; }

  EventId schedule(ComponentId target, std::function<void()> payload,
                   SimTime delay = SimTime());
  EventId schedule(std::function<void()> payload, SimTime delay = SimTime()) {
    return schedule(0, std::move(payload), delay);
  }
  EventId schedule_at(SimTime when, std::function<void()> payload,
                      ComponentId target = 0);

  /// Delivers every queued event. Returns the fire time of the last delivered
  /// event (0 if none were delivered during this call and none before).
  SimTime run_to_completion();

  /// After finalize() no further events may be scheduled.
  void finalize() { finalized_ = true; }
  bool finalized() const { return finalized_; }

  std::uint64_t delivered() const { return delivered_; }
  std::size_t pending() const { return queue_.size(); }

  /// Observer called before each delivery (tests use it to log order).
  void set_delivery_observer(std::function<void(const Event&)> obs) {
    observer_ = std::move(obs);
  }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.fire_at != b.fire_at) return a.fire_at > b.fire_at;
      return a.sequence > b.sequence;
    }
  };

  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  SimTime now_;
  SimTime last_fired_;
  std::uint64_t next_sequence_ = 0;
  std::uint64_t delivered_ = 0;
  std::uint64_t max_events_;
  bool finalized_ = false;
  std::function<void(const Event&)> observer_;
};

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// xoshiro256** seeded through splitmix64 from hash(master_seed, stream name).
class RandomStream {
 public:
  RandomStream(std::uint64_t master_seed, std::string_view stream_name);
  explicit RandomStream(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t uniform(std::uint64_t bound);
  /// Uniform integer in [lo, hi].
  std::uint64_t uniform_range(std::uint64_t lo, std::uint64_t hi) {
    return lo + uniform(hi - lo + 1);
  }
  /// Uniform double in [0, 1).
  double next_double();

  static std::uint64_t stream_seed(std::uint64_t master_seed,
                                   std::string_view stream_name);

 private:
  std::uint64_t s_[4];
};

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

class StatSeries {
 public:
  StatSeries() = default;
  StatSeries(std::string name, std::string unit)
      : name_(std::move(name)), unit_(std::move(unit)) {}

  void add(double v) { samples_.push_back(v); }

  const std::string& name() const { return name_; }
  const std::string& unit() const { return unit_; }
  const std::vector<double>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }

  /// Nearest-rank percentile: rank = ceil(p*n), with p=0 mapping to rank 1.
  /// Throws UsageError on an empty series or p outside [0,1].
  double percentile(double p) const;
  double median() const { return percentile(0.5); }
  double mean() const;
  /// Population standard deviation.
  double stddev() const;

 private:
  std::string name_;
  std::string unit_;
  std::vector<double> samples_;
};

double percentile(const StatSeries& series, double p);

}  // namespace cxlsim
