#include <gtest/gtest.h>

#include <set>

#include "cachex/policy_cap.hpp"

using namespace cachex;

namespace {

ColoredFreeLists lists_with(unsigned colors, unsigned per_color) {
  ColoredFreeLists l(colors);
  for (unsigned c = 0; c < colors; ++c)
    for (unsigned i = 0; i < per_color; ++i) l.push(c, 1000 + c * 100 + i);
  return l;
}

ColorRanking hot_first(std::vector<unsigned> order, unsigned hot_count) {
  ColorRanking r;
  r.order = order;
  r.tier.assign(order.size(), 1);
  for (unsigned i = 0; i < hot_count; ++i) r.tier[order[i]] = 0;
  return r;
}

}  // namespace

TEST(Ranking, HottestFirstTierZero) {
  const std::vector<double> rates = {1.0, 9.0, 1.2, 8.5};
  const auto r = rank_colors(rates);
  EXPECT_EQ(r.order, (std::vector<unsigned>{1, 3, 2, 0}));
  EXPECT_EQ(r.tier, (std::vector<unsigned>{1, 0, 1, 0}));
  const std::vector<double> ties = {2.0, 2.0, 2.0};
  EXPECT_EQ(rank_colors(ties).order, (std::vector<unsigned>{0, 1, 2}));
  EXPECT_EQ(identity_ranking(3).tier, (std::vector<unsigned>{0, 0, 0}));
}

TEST(Recolor, FiresOnThirdConsecutiveDemotion) {
  RecolorTracker t;
  EXPECT_FALSE(t.maybe_recolor(hot_first({0, 1, 2}, 1)));
  EXPECT_EQ(t.anchor(), 0u);
  const auto demoted = hot_first({1, 0, 2}, 1);
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_TRUE(t.maybe_recolor(demoted));
  EXPECT_EQ(t.anchor(), 1u);
  EXPECT_EQ(t.streak(), 0u);
}

TEST(Recolor, InterruptedStreakStartsOver) {
  RecolorTracker t;
  t.set_anchor(0);
  const auto demoted = hot_first({1, 0, 2}, 1);
  const auto back = hot_first({0, 1, 2}, 1);
  const auto shared = hot_first({1, 0, 2}, 2);  // anchor cooler but same tier
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_FALSE(t.maybe_recolor(back));
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_FALSE(t.maybe_recolor(shared));
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_FALSE(t.maybe_recolor(demoted));
  EXPECT_TRUE(t.maybe_recolor(demoted));
}

TEST(PageCache, FifoHitsAndMisses) {
  auto lists = lists_with(4, 8);
  GuestAllocator alloc(10, 1);
  PageCache pc(3, CapMode::ranked, lists, alloc);
  int reads = 0;
  auto rd = [&](std::uint64_t, ActorId) { ++reads; };
  for (std::uint64_t off : {0, 4096, 8192}) EXPECT_FALSE(pc.access_file(1, off, rd));
  EXPECT_TRUE(pc.access_file(1, 100, rd));
  EXPECT_FALSE(pc.access_file(1, 3 * 4096, rd));  // evicts page 0
  EXPECT_FALSE(pc.access_file(1, 0, rd));
  EXPECT_TRUE(pc.access_file(1, 3 * 4096 + 5, rd));
  EXPECT_EQ(pc.counters(1).hits, 2u);
  EXPECT_EQ(pc.counters(1).misses, 5u);
  EXPECT_EQ(reads, 7);
  EXPECT_EQ(pc.size(), 3u);
  EXPECT_THROW(PageCache(0, CapMode::ranked, lists, alloc), Error);
}

TEST(PageCache, ScanStaysInOneColor) {
  auto lists = lists_with(4, 8);
  GuestAllocator alloc(10, 1);
  PageCache pc(8, CapMode::ranked, lists, alloc);
  pc.set_ranking(hot_first({2, 0, 1, 3}, 1), true);
  std::set<unsigned> colors;
  for (std::uint64_t i = 0; i < 200; ++i) {
    pc.access_file(0, i * kPageSize, {});
    for (const auto& [k, p] : pc.pages()) colors.insert(*p.color);
  }
  EXPECT_EQ(colors, (std::set<unsigned>{2}));
  EXPECT_EQ(lists.size(2), 0u);
  EXPECT_EQ(pc.uncolored_allocs(), 0u);
}

TEST(PageCache, SpillsToNextRankedColor) {
  auto lists = lists_with(4, 2);
  GuestAllocator alloc(10, 1);
  PageCache pc(3, CapMode::ranked, lists, alloc);
  pc.set_ranking(hot_first({3, 1, 0, 2}, 1), true);
  for (std::uint64_t i = 0; i < 3; ++i) pc.access_file(0, i * kPageSize, {});
  std::multiset<unsigned> got;
  for (const auto& [k, p] : pc.pages()) got.insert(*p.color);
  EXPECT_EQ(got, (std::multiset<unsigned>{3, 3, 1}));
  EXPECT_EQ(pc.current_color(), 1u);
}

TEST(PageCache, RestartReturnsToHottest) {
  auto lists = lists_with(3, 4);
  GuestAllocator alloc(10, 1);
  PageCache pc(2, CapMode::ranked, lists, alloc);
  pc.set_ranking(hot_first({0, 1, 2}, 1), true);
  pc.access_file(0, 0, {});
  pc.set_ranking(hot_first({2, 1, 0}, 1), false);
  EXPECT_EQ(pc.current_color(), 0u);
  pc.reclaim();
  pc.set_ranking(hot_first({2, 1, 0}, 1), true);
  EXPECT_EQ(pc.current_color(), 2u);
  EXPECT_EQ(pc.size(), 0u);
  EXPECT_EQ(pc.reclaims(), 1u);
  EXPECT_EQ(lists.size(0), 4u);
}

TEST(PageCache, UnrankedIgnoresRankings) {
  auto lists = lists_with(3, 4);
  GuestAllocator alloc(10, 1);
  PageCache pc(2, CapMode::unranked, lists, alloc);
  pc.set_ranking(hot_first({2, 1, 0}, 1), true);
  pc.access_file(0, 0, {});
  EXPECT_EQ(pc.pages().begin()->second.color, 0u);
}

TEST(PageCache, FallsBackToUncoloredPages) {
  ColoredFreeLists lists(2);
  GuestAllocator alloc(5, 1);
  PageCache pc(2, CapMode::ranked, lists, alloc);
  pc.access_file(0, 0, {});
  EXPECT_EQ(pc.uncolored_allocs(), 1u);
  EXPECT_FALSE(pc.pages().begin()->second.color.has_value());
  PageCache plain(2, CapMode::uncolored, lists, alloc);
  EXPECT_FALSE(plain.current_color().has_value());
  pc.reclaim();
  EXPECT_EQ(alloc.available(), 5u);
}
