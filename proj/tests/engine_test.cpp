#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "cxlsim/engine.hpp"

using namespace cxlsim;

TEST(SimTime, FromNsRoundsToPicoseconds) {
  EXPECT_EQ(SimTime::from_ns(1.0).ps(), 1000u);
  EXPECT_EQ(SimTime::from_ns(575.6).ps(), 575600u);
  EXPECT_EQ(SimTime::from_ns(0.0004).ps(), 0u);
  EXPECT_EQ(SimTime::from_ns(0.0005).ps(), 1u);
  EXPECT_THROW(SimTime::from_ns(-1.0), UsageError);
}

TEST(SimTime, SubtractionSaturates) {
  EXPECT_EQ((SimTime(5) - SimTime(9)).ps(), 0u);
  EXPECT_EQ((SimTime(9) - SimTime(5)).ps(), 4u);
}

TEST(ClockDomain, CycleConversion) {
  ClockDomain f400(400);
  EXPECT_EQ(f400.cycles(1).ps(), 2500u);
  EXPECT_EQ(f400.cycles(46).ps(), 115000u);
  ClockDomain f1500(1500);
  EXPECT_EQ(f1500.cycles(3).ps(), 2000u);
  // 1500 MHz period is 666.67 ps; 3000 cycles must be exactly 2 us
  EXPECT_EQ(f1500.cycles(3000).ps(), 2'000'000u);
  EXPECT_EQ(f1500.to_cycles(SimTime(2'000'000)), 3000u);
  EXPECT_THROW(ClockDomain(0), ConfigError);
}

TEST(Simulator, DelayedEventFiresAtDelay) {
  Simulator sim;
  SimTime seen;
  sim.schedule([&] { seen = sim.now(); }, SimTime(5));
  sim.run_to_completion();
  EXPECT_EQ(seen.ps(), 5u);
}

TEST(Simulator, SameTickEventsAreFifo) {
  Simulator sim;
  std::vector<char> order;
  sim.schedule([&] { order.push_back('A'); }, SimTime(10));
  sim.schedule([&] { order.push_back('B'); }, SimTime(10));
  sim.run_to_completion();
  EXPECT_EQ(order, (std::vector<char>{'A', 'B'}));
}

TEST(Simulator, ZeroDelayFromHandlerRunsAfterQueuedSameTick) {
  Simulator sim;
  std::vector<char> order;
  sim.schedule([&] {
    order.push_back('A');
    sim.schedule([&] { order.push_back('C'); });
  }, SimTime(7));
  sim.schedule([&] { order.push_back('B'); }, SimTime(7));
  sim.run_to_completion();
  EXPECT_EQ(order, (std::vector<char>{'A', 'B', 'C'}));
  EXPECT_EQ(sim.now().ps(), 7u);
}

TEST(Simulator, RunToCompletionReturnsLastFireTime) {
  Simulator empty;
  EXPECT_EQ(empty.run_to_completion().ps(), 0u);
  Simulator one;
  one.schedule([] {}, SimTime(100));
  EXPECT_EQ(one.run_to_completion().ps(), 100u);
  EXPECT_EQ(one.delivered(), 1u);
  EXPECT_EQ(one.pending(), 0u);
}

TEST(Simulator, EventCeilingIsAFault) {
  Simulator sim(10);
  std::function<void()> loop = [&] { sim.schedule(loop, SimTime(1)); };
  sim.schedule(loop);
  EXPECT_THROW(sim.run_to_completion(), SimFault);
}

TEST(Simulator, ScheduleAfterFinalizeIsUsageError) {
  Simulator sim;
  sim.finalize();
  EXPECT_THROW(sim.schedule([] {}), UsageError);
}

TEST(Simulator, ScheduleInThePastIsUsageError) {
  Simulator sim;
  sim.schedule([&] { EXPECT_THROW(sim.schedule_at(SimTime(1), [] {}), UsageError); },
               SimTime(10));
  sim.run_to_completion();
}

TEST(Simulator, TimeNeverDecreasesUnderRandomSchedules) {
  Simulator sim;
  RandomStream rng(3, "sched");
  SimTime last;
  bool monotone = true;
  sim.set_delivery_observer([&](const Event& e) {
    if (e.fire_at < last) monotone = false;
    last = e.fire_at;
  });
  int budget = 5000;
  std::function<void()> spawn = [&] {
    if (--budget <= 0) return;
    const int n = static_cast<int>(rng.uniform(3));
    for (int i = 0; i < n; ++i) sim.schedule(spawn, SimTime(rng.uniform(50)));
  };
  for (int i = 0; i < 20; ++i) sim.schedule(spawn, SimTime(rng.uniform(100)));
  sim.run_to_completion();
  EXPECT_TRUE(monotone);
}

TEST(RandomStream, SameSeedAndNameGiveSameSequence) {
  RandomStream a(42, "rao"), b(42, "rao"), c(42, "rpc"), d(43, "rao");
  bool diff_c = false, diff_d = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    diff_c |= x != c.next_u64();
    diff_d |= x != d.next_u64();
  }
  EXPECT_TRUE(diff_c);
  EXPECT_TRUE(diff_d);
}

TEST(RandomStream, UniformStaysInBounds) {
  RandomStream r(1, "u");
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.uniform(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
    const double d = r.next_double();
    ASSERT_GE(d, 0.0);
    ASSERT_LT(d, 1.0);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_THROW(r.uniform(0), UsageError);
}

TEST(StatSeries, NearestRankPercentiles) {
  StatSeries a;
  for (double v : {1.0, 2.0, 3.0}) a.add(v);
  EXPECT_EQ(a.median(), 2.0);
  StatSeries b;
  b.add(5);
  EXPECT_EQ(b.median(), 5.0);
  StatSeries c;
  for (double v : {40.0, 10.0, 30.0, 20.0}) c.add(v);
  EXPECT_EQ(c.percentile(0.5), 20.0);
  EXPECT_EQ(c.percentile(0.0), 10.0);
  EXPECT_EQ(c.percentile(1.0), 40.0);
  EXPECT_EQ(c.percentile(0.75), 30.0);
  EXPECT_EQ(percentile(c, 0.25), 10.0);
}

TEST(StatSeries, MeanAndPopulationStddev) {
  StatSeries s;
  for (double v : {2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0}) s.add(v);
  EXPECT_DOUBLE_EQ(s.mean(), 5.0);
  EXPECT_DOUBLE_EQ(s.stddev(), 2.0);
}

TEST(StatSeries, EmptySeriesIsUsageError) {
  StatSeries s("lat", "ns");
  EXPECT_THROW(s.percentile(0.5), UsageError);
  EXPECT_THROW(s.mean(), UsageError);
  s.add(1);
  EXPECT_THROW(s.percentile(1.5), UsageError);
}
