#include <gtest/gtest.h>

#include <cmath>

#include "cachex/timing.hpp"

using namespace cachex;

TEST(Timing, ClassBoundariesTakeTheDeeperLevel) {
  const Thresholds th{32.0, 125.0};
  EXPECT_EQ(classify_level(31.999, th), Measured::L2OrFaster);
  EXPECT_EQ(classify_level(32.0, th), Measured::LLC);
  EXPECT_EQ(classify_level(124.9, th), Measured::LLC);
  EXPECT_EQ(classify_level(125.0, th), Measured::Memory);
  EXPECT_THROW(classify_level(10.0, Thresholds{125.0, 32.0}), Error);
  EXPECT_THROW(classify_level(10.0, Thresholds{50.0, 50.0}), Error);
}

TEST(Timing, CyclesToNanoseconds) {
  LatencyModel m;
  EXPECT_EQ(m.cycles_to_ns(200.0), 100);
  m.ghz = 2.5;
  EXPECT_EQ(m.cycles_to_ns(1000.0), 400);
}

TEST(Timing, ModelValidation) {
  LatencyModel m;
  EXPECT_NO_THROW(m.validate());
  m.llc = 300;
  EXPECT_THROW(m.validate(), Error);
  m = {};
  m.spike_prob_cold = 1.5;
  EXPECT_THROW(m.validate(), Error);
}

TEST(Timing, WarmTimerSuppressesSpikesUntilHorizon) {
  LatencyModel m;
  m.spike_prob_cold = 1.0;
  TimerState t;
  Rng rng(1);
  EXPECT_EQ(sample_latency(HitLevel::L2, m, t, rng, 0), m.spike);
  warm_timer(t, m, 0);
  for (int i = 0; i < 100; ++i) EXPECT_LT(sample_latency(HitLevel::L2, m, t, rng, ms_to_ns(10)), 100.0);
  EXPECT_EQ(sample_latency(HitLevel::L2, m, t, rng, m.warm_horizon), m.spike);
  EXPECT_FALSE(t.warm);
}

TEST(Timing, ColdSpikeRate) {
  LatencyModel m;
  TimerState t;
  Rng rng(4);
  int spikes = 0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) spikes += sample_latency(HitLevel::LLC, m, t, rng, 0) == m.spike;
  // Binomial(40000, 0.02): sd 28, so +-5 sd is 140.
  EXPECT_NEAR(spikes, 800, 140);
}

TEST(Timing, JitterMoments) {
  LatencyModel m;
  TimerState t;
  warm_timer(t, m, 0);
  Rng rng(9);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = sample_latency(HitLevel::Memory, m, t, rng, 0);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_NEAR(mean, 200.0, 0.15);
  EXPECT_NEAR(sd, 3.0, 0.1);
}

TEST(Timing, CalibrationLandsBetweenLevelMeans) {
  CacheGeometry g;
  g.l2_ways = 4;
  g.l2_sets = 64;
  g.llc_ways = 4;
  g.llc_sets = 128;
  g.n_slices = 2;
  g.cores_per_domain = 2;
  CacheState c(g, 1);
  const ActorId a = c.register_actor(0);
  LatencyModel m;
  TimerState t;
  Rng rng(2);
  CalibrationStats st;
  const Thresholds th = calibrate_thresholds(c, a, t, m, rng, 0, 2000, 0x5000, &st);
  EXPECT_NEAR(th.llc, (m.l2 + m.llc) / 2, 0.5);
  EXPECT_NEAR(th.mem, (m.llc + m.mem) / 2, 0.5);
  EXPECT_NEAR(st.sd[2], m.jitter, 0.3);
  EXPECT_THROW(calibrate_thresholds(c, a, t, m, rng, 0, 99, 0x5000), Error);
}

TEST(Timing, MeasureAccessMutatesState) {
  CacheGeometry g;
  g.l2_ways = 4;
  g.l2_sets = 64;
  g.llc_ways = 4;
  g.llc_sets = 128;
  g.n_slices = 2;
  g.cores_per_domain = 2;
  CacheState c(g, 1);
  const ActorId a = c.register_actor(0);
  LatencyModel m;
  TimerState t;
  warm_timer(t, m, 0);
  Rng rng(3);
  const Thresholds th{32, 125};
  EXPECT_EQ(classify_level(measure_access(c, 0x40, a, t, m, rng, 0), th), Measured::Memory);
  EXPECT_EQ(classify_level(measure_access(c, 0x40, a, t, m, rng, 0), th), Measured::L2OrFaster);
}
