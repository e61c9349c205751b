#include <gtest/gtest.h>

#include <set>

#include "cachex/scenario.hpp"

using namespace cachex;

namespace {

CacheGeometry desk(Replacement r = Replacement::lru) {
  CacheGeometry g;
  g.l2_ways = 4;
  g.l2_sets = 256;
  g.llc_ways = 8;
  g.llc_sets = 512;
  g.n_slices = 4;
  g.cores_per_domain = 4;
  g.replacement = r;
  return g;
}

std::unique_ptr<World> world(const CacheGeometry& g, std::uint64_t seed, unsigned confirm = 1) {
  VmSpec vm;
  vm.probe.confirm = confirm;
  return std::make_unique<World>(g, FragmentationProfile::fragmented(1.0), World::guest_pages_for(g, vm.pool_scale),
                                 LatencyModel{}, vm, seed);
}

// 1 - C(n,f)/C(2n,f) evaluated with binomials.
double coverage_ref(unsigned n, unsigned f) {
  auto choose = [](unsigned a, unsigned b) {
    double r = 1;
    for (unsigned i = 1; i <= b; ++i) r = r * (a - b + i) / i;
    return r;
  };
  return 1.0 - choose(n, f) / choose(2 * n, f);
}

}  // namespace

TEST(PoolSize, ReferenceMachineAtThree) {
  const auto g = CacheGeometry::table1();
  EXPECT_EQ(pool_size(g, Level::L2, 3), 768u);
  EXPECT_EQ(pool_size(g, Level::LLC, 3), 21120u);
  EXPECT_EQ(pool_size(g, Level::L2, 1), 256u);
  EXPECT_THROW(pool_size(g, Level::L2, 0), Error);
  EXPECT_EQ(sets_per_offset(g, Level::L2), 16u);
  EXPECT_EQ(sets_per_offset(g, Level::LLC), 640u);
}

TEST(Coverage, ClosedFormAgainstBinomials) {
  const double frozen[] = {0.756410, 0.884615, 0.946985, 0.976438, 0.989902};
  for (unsigned f = 2; f <= 6; ++f) {
    EXPECT_NEAR(coverage_theoretical(20, f), coverage_ref(20, f), 1e-12);
    EXPECT_NEAR(coverage_theoretical(20, f), frozen[f - 2], 5e-7);
  }
  EXPECT_DOUBLE_EQ(coverage_theoretical(20, 21), 1.0);
  EXPECT_THROW(coverage_theoretical(20, 0), Error);
}

TEST(Offsets, ShiftKeepsPageAndSwapsOffset) {
  const std::vector<std::uint64_t> m = {0x5000, 0x7040, 0x9fc0};
  const auto s = shift_members(m, 0x80);
  EXPECT_EQ(s, (std::vector<std::uint64_t>{0x5080, 0x7080, 0x9080}));
  EXPECT_THROW(shift_members(m, 0x81), Error);
  EXPECT_THROW(shift_members(m, 0x1000), Error);
  const std::vector<std::uint64_t> pages = {3, 9};
  EXPECT_EQ(make_pool(Level::L2, 0x40, pages).members, (std::vector<std::uint64_t>{0x3040, 0x9040}));
}

TEST(Evset, L2SetsAreMinimalAndCongruent) {
  auto w = world(desk(), 1);
  const auto pages = w->allocator().alloc_n(pool_size(w->geometry(), Level::L2, 3));
  const auto rep = build_all_at_offset(w->prober(), make_pool(Level::L2, 0, pages));
  ASSERT_EQ(rep.sets.size(), w->geometry().colors(Level::L2));
  std::set<SetKey> keys;
  for (const auto& e : rep.sets) {
    EXPECT_EQ(e.size(), w->geometry().l2_ways);
    EXPECT_TRUE(e.minimal);
    EXPECT_TRUE(oracle_congruent(w->map(), w->geometry(), e));
    keys.insert(oracle_key(w->map(), w->geometry(), Level::L2, e.members.front()));
  }
  EXPECT_EQ(keys.size(), rep.sets.size());
}

TEST(Evset, PruneFindsExactlyTheAssociativity) {
  for (auto r : {Replacement::lru, Replacement::plru}) {
    // NRU can evict early after a reset, so completion needs repeated confirmation.
    auto w = world(desk(r), 2, r == Replacement::plru ? 4 : 1);
    w->build_filters();
    const auto groups = w->classify_pool();
    std::size_t best = 0;
    for (std::size_t c = 1; c < groups.size(); ++c)
      if (groups[c].size() > groups[best].size()) best = c;
    BuildOptions opt;
    opt.max_sets = 3;
    const auto rep = build_all_at_offset(w->prober(), make_pool(Level::LLC, 0, groups[best]), opt);
    ASSERT_FALSE(rep.sets.empty());
    for (const auto& e : rep.sets) {
      EXPECT_EQ(e.size(), w->geometry().llc_ways) << to_string(r);
      EXPECT_TRUE(oracle_congruent(w->map(), w->geometry(), e));
    }
  }
}

TEST(Evset, ShortColorRaisesPartialPalette) {
  auto w = world(desk(), 5);
  const auto pages = w->allocator().alloc_n(pool_size(w->geometry(), Level::L2, 3));
  std::vector<unsigned> per_zone(4, 0);
  for (auto pg : pages) ++per_zone[w->zone_of_gva(pg << kPageBits)];
  ASSERT_LT(*std::min_element(per_zone.begin(), per_zone.end()), w->geometry().l2_ways);
  try {
    build_color_filters(w->prober(), pages);
    FAIL() << "expected a partial palette";
  } catch (const PartialPaletteError& e) {
    EXPECT_EQ(e.found(), 3u);
  }
}

TEST(Evset, SurvivingSetStillEvicts) {
  auto w = world(desk(), 3);
  auto& p = w->prober();
  const auto pages = w->allocator().alloc_n(pool_size(w->geometry(), Level::L2, 3));
  const auto pool = make_pool(Level::L2, 0, pages);
  const std::uint64_t target = pool.members.back();
  CandidatePool rest{Level::L2, 0, {pool.members.begin(), pool.members.end() - 1}};
  const auto e = prune_binary_search(p, rest, target);
  EXPECT_TRUE(p.test_eviction(Level::L2, e.members, target));
  std::vector<std::uint64_t> fewer(e.members.begin() + 1, e.members.end());
  EXPECT_FALSE(p.test_eviction(Level::L2, fewer, target));
  EXPECT_EQ(oracle_key(w->map(), w->geometry(), Level::L2, target),
            oracle_key(w->map(), w->geometry(), Level::L2, e.members.front()));
}

TEST(Evset, PrefilterKeepsEveryCongruentCandidate) {
  auto w = world(desk(), 4);
  auto& p = w->prober();
  const auto& g = w->geometry();
  const auto pages = w->allocator().alloc_n(pool_size(g, Level::L2, 3));
  const auto l2 = build_all_at_offset(p, make_pool(Level::L2, 0, pages));
  const auto llc_pages = w->allocator().alloc_n(600);
  const auto pool = make_pool(Level::LLC, 0, llc_pages);
  const std::uint64_t target = pool.members.front();
  const EvictionSet* mine = nullptr;
  for (const auto& e : l2.sets)
    if (oracle_key(w->map(), g, Level::L2, e.members.front()) == oracle_key(w->map(), g, Level::L2, target)) mine = &e;
  ASSERT_NE(mine, nullptr);
  const auto kept = l2_prefilter(p, pool, target, *mine);
  const auto tkey = oracle_key(w->map(), g, Level::LLC, target);
  std::size_t congruent = 0;
  for (auto a : pool.members) congruent += oracle_key(w->map(), g, Level::LLC, a) == tkey;
  std::size_t kept_congruent = 0;
  for (auto a : kept.members) {
    EXPECT_EQ(oracle_key(w->map(), g, Level::L2, a), oracle_key(w->map(), g, Level::L2, target));
    kept_congruent += oracle_key(w->map(), g, Level::LLC, a) == tkey;
  }
  EXPECT_EQ(kept_congruent, congruent);
  EvictionSet wrong_level = *mine;
  wrong_level.level = Level::LLC;
  EXPECT_THROW(l2_prefilter(p, pool, target, wrong_level), Error);
}

TEST(Parallel, WorkerCountDoesNotChangeTheSets) {
  std::vector<std::vector<std::uint64_t>> members[2];
  std::size_t dups[2]{};
  const unsigned workers[2] = {1, 4};
  for (int k = 0; k < 2; ++k) {
    auto w = world(desk(), 8);
    w->build_filters();
    const auto groups = w->classify_pool();
    const auto rep = w->build_sets(groups, 2, 2, workers[k]);
    for (const auto& e : rep.sets) members[k].push_back(e.members);
    dups[k] = rep.duplicates;
    EXPECT_EQ(rep.per_worker.size(), workers[k]);
  }
  std::sort(members[0].begin(), members[0].end());
  std::sort(members[1].begin(), members[1].end());
  EXPECT_EQ(members[0], members[1]);
  EXPECT_EQ(dups[0], dups[1]);
}

TEST(Parallel, MoreWorkersFinishSooner) {
  TimeNs elapsed[2]{};
  const unsigned workers[2] = {1, 4};
  for (int k = 0; k < 2; ++k) {
    auto w = world(desk(), 6);
    w->build_filters();
    const auto groups = w->classify_pool();
    elapsed[k] = w->build_sets(groups, 2, 2, workers[k]).elapsed;
  }
  EXPECT_LT(elapsed[1], elapsed[0]);
}

TEST(Parallel, CoveredRowsMatchOracle) {
  auto w = world(desk(), 7);
  w->build_filters();
  const auto groups = w->classify_pool();
  const auto rep = w->build_sets(groups, 8, 1, 1);
  EXPECT_EQ(rep.expected_rows, 4u * 2);  // 4 zones x 2 rows at one offset
  EXPECT_EQ(rep.covered_rows, rep.expected_rows);
  EXPECT_DOUBLE_EQ(rep.row_coverage(), 1.0);
  for (const auto& e : rep.sets) EXPECT_TRUE(oracle_congruent(w->map(), w->geometry(), e));
}
