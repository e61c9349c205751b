#include <gtest/gtest.h>

#include "cachex/scenario.hpp"

using namespace cachex;

namespace {

CacheGeometry desk() {
  CacheGeometry g;
  g.l2_ways = 4;
  g.l2_sets = 256;
  g.llc_ways = 8;
  g.llc_sets = 512;
  g.n_slices = 4;
  g.cores_per_domain = 8;
  return g;
}

struct Rig {
  std::unique_ptr<World> w;
  std::unique_ptr<ContentionMonitor> mon;
  std::unique_ptr<TenantSim> sim;

  explicit Rig(std::uint64_t seed, MonitorConfig cfg = {}) {
    const auto g = desk();
    VmSpec vm;
    vm.pool_scale = 4;
    vm.vcpus_per_domain = 4;
    w = std::make_unique<World>(g, FragmentationProfile::fragmented(1.0), World::guest_pages_for(g, vm.pool_scale),
                                LatencyModel{}, vm, seed);
    w->build_filters();
    const auto groups = w->classify_pool();
    const auto rep = w->build_sets(groups, 2, 2, 1);
    cfg.workers = 2;
    mon = std::make_unique<ContentionMonitor>(cfg, w->monitored_sets(rep), 1, g.colors(Level::L2), seed);
    sim = std::make_unique<TenantSim>(w->cache(), seed);
  }

  void add_polluter(double rate, TimeNs stop = std::numeric_limits<TimeNs>::max()) {
    TenantWorkload t;
    t.name = "polluter";
    t.kind = WorkloadKind::polluter;
    t.actor = w->tenant_core(0, "polluter");
    t.rate = rate;
    t.region_base = tenant_region_base(0);
    t.region_size = 4096 * 1024;
    t.stop = stop;
    sim->add(t);
  }

  CycleResult cycle(double t_ms, bool adapt = true) {
    auto ps = w->prober_set();
    return mon->cycle(ps, sim.get(), std::max(ms_to_ns(t_ms), w->now()), adapt);
  }
};

}  // namespace

TEST(Ewma, StartsFromZeroAndConverges) {
  double e = 0;
  e = ewma_update(e, 10.0, 0.3);
  EXPECT_DOUBLE_EQ(e, 3.0);
  for (int i = 0; i < 100; ++i) e = ewma_update(e, 10.0, 0.3);
  EXPECT_NEAR(e, 10.0, 1e-9);
  EXPECT_THROW(ewma_update(0, 1, 0.0), Error);
  EXPECT_THROW(ewma_update(0, 1, 1.5), Error);
}

TEST(Window, ShrinkResetHold) {
  MonitorConfig c;
  EXPECT_DOUBLE_EQ(adjust_window(c, 7.0, {1.0, true}), 6.0);
  EXPECT_DOUBLE_EQ(adjust_window(c, 1.0, {1.0, true}), 1.0);
  EXPECT_DOUBLE_EQ(adjust_window(c, 3.0, {0.0, false}), 7.0);
  EXPECT_DOUBLE_EQ(adjust_window(c, 3.0, {0.5, true}), 3.0);
  c.full_threshold = 0.5;
  EXPECT_DOUBLE_EQ(adjust_window(c, 3.0, {0.5, true}), 2.0);
}

TEST(Window, ConfigValidation) {
  MonitorConfig c;
  c.window_ms = 8.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.full_threshold = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.workers = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Associativity, ModalSizeTiesGoSmall) {
  std::vector<EvictionSet> s(5);
  s[0].members.resize(11);
  s[1].members.resize(11);
  s[2].members.resize(12);
  s[3].members.resize(12);
  s[4].members.resize(3);
  EXPECT_EQ(probe_associativity(s), 11u);
  EXPECT_THROW(probe_associativity(std::span<const EvictionSet>{}), Error);
}

TEST(Monitor, QuiescentCyclesSeeNoEvictions) {
  Rig r(1);
  ASSERT_FALSE(r.mon->sets().empty());
  for (int k = 0; k < 3; ++k) {
    const auto c = r.cycle(k * 10.0);
    EXPECT_FALSE(c.any_eviction);
    EXPECT_DOUBLE_EQ(c.full_share, 0.0);
    for (const auto& s : r.mon->sets()) EXPECT_EQ(s.evicted, 0u);
  }
  EXPECT_DOUBLE_EQ(r.mon->window_ms(), 7.0);
}

TEST(Monitor, HeavyPolluterShrinksThenResets) {
  MonitorConfig cfg;
  cfg.interval_ms = 8;
  Rig r(2, cfg);
  r.add_polluter(40000.0, ms_to_ns(24));
  std::vector<double> windows;
  for (int k = 0; k < 5; ++k) windows.push_back(r.cycle(k * 8.0).window_ms);
  EXPECT_EQ(windows, (std::vector<double>{7, 6, 5, 4, 7}));
}

TEST(Monitor, EwmaTracksContention) {
  Rig r(3);
  r.add_polluter(2000.0);
  r.cycle(0, false);
  const double after_one = r.mon->aggregate_by_domain()[0];
  std::vector<double> prev;
  for (const auto& s : r.mon->sets()) prev.push_back(s.ewma);
  r.cycle(10, false);
  const double after_two = r.mon->aggregate_by_domain()[0];
  EXPECT_GT(after_one, 0.0);
  EXPECT_GT(after_two, after_one);
  for (std::size_t i = 0; i < prev.size(); ++i) {
    const auto& s = r.mon->sets()[i];
    EXPECT_DOUBLE_EQ(s.ewma, 0.3 * s.raw + 0.7 * prev[i]);
    const unsigned denom = static_cast<unsigned>(s.set.size()) - s.unknown;
    EXPECT_DOUBLE_EQ(s.raw, 100.0 * s.evicted / denom / 7.0);
  }
}

TEST(Monitor, OwnVmWorkPausesDuringCycles) {
  Rig r(4);
  TenantWorkload t;
  t.name = "own";
  t.kind = WorkloadKind::polluter;
  t.actor = r.w->vm_thread(0);
  t.own_vm = true;
  t.rate = 40000;
  t.region_base = tenant_region_base(1);
  t.region_size = 4096 * 1024;
  r.sim->add(t);
  const auto c = r.cycle(0);
  EXPECT_FALSE(c.any_eviction);
  EXPECT_FALSE(r.sim->paused());
}
