#include <gtest/gtest.h>

#include <cmath>

#include "cachex/policy_cas.hpp"

using namespace cachex;

namespace {

CpuTopology two_by_four() { return CpuTopology{{0, 0, 0, 0, 1, 1, 1, 1}}; }

}  // namespace

TEST(Tiers, LargestGapSplits) {
  const std::vector<double> r = {1.0, 1.1, 9.0, 0.9};
  EXPECT_EQ(tier_domains(r), (std::vector<unsigned>{0, 0, 1, 0}));
  const std::vector<double> close = {5.0, 5.2, 5.1};
  EXPECT_EQ(tier_domains(close), (std::vector<unsigned>{0, 0, 0}));
  const std::vector<double> three = {0.0, 10.0, 20.0, 10.5};
  EXPECT_EQ(tier_domains(three, 3), (std::vector<unsigned>{0, 1, 2, 1}));
  const std::vector<double> zeros = {0.0, 0.0};
  EXPECT_EQ(tier_domains(zeros), (std::vector<unsigned>{0, 0}));
}

TEST(Hysteresis, NeedsThreeAgreeingTrends) {
  EXPECT_FALSE(update_tier_hysteresis(std::vector<int>{1, 1}));
  EXPECT_TRUE(update_tier_hysteresis(std::vector<int>{1, 1, 1}));
  EXPECT_TRUE(update_tier_hysteresis(std::vector<int>{-1, 1, 1, 1}));
  EXPECT_FALSE(update_tier_hysteresis(std::vector<int>{1, -1, 1}));
  EXPECT_FALSE(update_tier_hysteresis(std::vector<int>{0, 0, 0}));
}

TEST(SelectCpu, PrefersBestTierThenPrevious) {
  const auto topo = two_by_four();
  const std::vector<unsigned> tier = {1, 0};
  std::vector<char> raw = {1, 1, 1, 1, 0, 1, 0, 1};
  const std::span<const bool> idle(reinterpret_cast<const bool*>(raw.data()), raw.size());
  EXPECT_EQ(select_cpu(0, tier, topo, idle), 5u);  // previous sits in the worse tier
  EXPECT_EQ(select_cpu(7, tier, topo, idle), 7u);
  raw = {1, 0, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(select_cpu(6, tier, topo, idle), 0u);  // fallback tier, lowest id
  EXPECT_EQ(select_cpu(3, tier, topo, idle), 0u);
  raw.assign(8, 0);
  EXPECT_EQ(select_cpu(3, tier, topo, idle), 3u);
}

TEST(SelectCpu, BaselineWrapsFromPrevious) {
  std::vector<char> raw = {1, 0, 0, 1, 0};
  const std::span<const bool> idle(reinterpret_cast<const bool*>(raw.data()), raw.size());
  EXPECT_EQ(select_cpu_baseline(3, idle), 3u);
  EXPECT_EQ(select_cpu_baseline(1, idle), 3u);
  EXPECT_EQ(select_cpu_baseline(4, idle), 0u);
}

TEST(Balance, RespectsTiersUnlessSaturated) {
  const std::vector<DomainLoad> d = {{0, 0.8}, {1, 0.2}};
  EXPECT_TRUE(balance(d).empty());
  const std::vector<DomainLoad> sat = {{0, 0.95}, {1, 0.2}};
  ASSERT_EQ(balance(sat).size(), 1u);
  EXPECT_EQ(balance(sat)[0].from, 0u);
  const std::vector<DomainLoad> down = {{1, 0.8}, {0, 0.2}};
  ASSERT_EQ(balance(down).size(), 1u);
  const std::vector<DomainLoad> even = {{0, 0.5}, {0, 0.4}};
  EXPECT_TRUE(balance(even).empty());
}

TEST(TierTracker, OscillationNeverMovesATier) {
  for (int period : {1, 2}) {
    TierTracker t(2);
    for (int k = 0; k < 200; ++k) {
      const bool hi = period == 1 ? (k % 2 == 0) : ((k / 2) % 2 == 0);
      const std::vector<double> r = {hi ? 50.0 : 2.0, 5.0};
      t.update(r);
    }
    EXPECT_EQ(t.changes(), 0u) << "period " << period;
  }
}

TEST(TierTracker, SustainedRiseMovesAfterThreeTrends) {
  TierTracker t(2);
  EXPECT_FALSE(t.update(std::vector<double>{10.0, 10.0}));  // rise from the zero start
  EXPECT_FALSE(t.update(std::vector<double>{10.0, 10.0}));
  EXPECT_FALSE(t.update(std::vector<double>{20.0, 10.0}));
  EXPECT_FALSE(t.update(std::vector<double>{30.0, 10.0}));
  EXPECT_TRUE(t.update(std::vector<double>{40.0, 10.0}));
  EXPECT_EQ(t.tiers(), (std::vector<unsigned>{1, 0}));
  EXPECT_EQ(t.changes(), 1u);
  EXPECT_THROW(t.update(std::vector<double>{1.0}), Error);
}

TEST(Residency, CasMatchesAllBusyProbability) {
  // A lone sensitive task lands in the polluted domain only when every vCPU of
  // the clean one is busy: 0.3^4 of the ticks.
  const auto topo = two_by_four();
  std::vector<SimTask> cas{{0, 0, Sensitivity::sensitive, {}}};
  std::vector<SimTask> base{{0, 0, Sensitivity::sensitive, {}}};
  const std::vector<unsigned> tier = {1, 0};
  Rng a = make_rng(7, 1), b = make_rng(7, 1);
  for (int k = 0; k < 100; ++k) {
    run_interval(cas, topo, tier, 1000.0, TickConfig{}, a);
    run_interval(base, topo, {}, 1000.0, TickConfig{}, b);
  }
  const double p = std::pow(0.3, 4) * (1 - std::pow(0.3, 4));
  const double n = 100 * 250;
  EXPECT_NEAR(residency_share(cas[0], 0), p, 5 * std::sqrt(p * (1 - p) / n));
  EXPECT_NEAR(residency_share(base[0], 0), 0.5, 0.1);
  EXPECT_EQ(cas[0].residency.size(), 100u);
}

TEST(Residency, InsensitiveTasksIgnoreTiers) {
  const auto topo = two_by_four();
  std::vector<SimTask> a{{0, 0, Sensitivity::insensitive, {}}};
  std::vector<SimTask> b{{0, 0, Sensitivity::insensitive, {}}};
  const std::vector<unsigned> tier = {1, 0};
  Rng ra = make_rng(3), rb = make_rng(3);
  for (int k = 0; k < 10; ++k) {
    run_interval(a, topo, tier, 100.0, TickConfig{}, ra);
    run_interval(b, topo, {}, 100.0, TickConfig{}, rb);
  }
  EXPECT_EQ(a[0].residency, b[0].residency);
}
