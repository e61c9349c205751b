#pragma once

// Representative LLC sets: the pool split by virtual color and page offset,
// f sets per partition, partitions spread over logical workers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "cachex/common.hpp"
#include "cachex/evset.hpp"
#include "cachex/mem_model.hpp"
#include "cachex/probe.hpp"

namespace cachex {

/// Expected fraction of rows hit when f distinct sets are drawn from the 2n
/// sets (two rows of n slices) of one partition: 1 - C(n,f)/C(2n,f).
inline double coverage_theoretical(unsigned n, unsigned f) {
  if (n == 0 || f < 1 || f > 2 * n) throw Error(Errc::invalid_argument, "f must be in [1, 2n]");
  if (f > n) return 1.0;
  double ratio = 1.0;
  for (unsigned i = 0; i < f; ++i) ratio *= static_cast<double>(n - i) / static_cast<double>(2 * n - i);
  return 1.0 - ratio;
}

struct ParallelConfig {
  unsigned f = 4;
  unsigned workers = 1;
  unsigned max_offsets = 0;  // 0 = all 64 offsets
  std::uint64_t seed = 0;
};

struct ParallelReport {
  std::vector<EvictionSet> sets;
  std::size_t partitions = 0;
  std::size_t empty_partitions = 0;
  std::size_t duplicates = 0;
  std::vector<TimeNs> per_worker;
  TimeNs elapsed = 0;
  // Filled only when an oracle map is supplied.
  std::size_t covered_rows = 0;
  std::size_t expected_rows = 0;
  double row_coverage() const {
    return expected_rows ? static_cast<double>(covered_rows) / static_cast<double>(expected_rows) : 0.0;
  }
};

/// `groups[c]` holds the guest pages classified as virtual color c. Results do
/// not depend on `workers`: every partition draws from its own stream and
/// touches rows no other partition touches.
inline ParallelReport build_parallel(Prober& p, std::span<const std::vector<std::uint64_t>> groups,
                                     const ParallelConfig& cfg, const TranslationMap* oracle = nullptr) {
  if (cfg.workers < 1) throw Error(Errc::invalid_argument, "workers must be >= 1");
  if (cfg.f < 1) throw Error(Errc::invalid_argument, "f must be >= 1");
  const CacheGeometry& g = p.geometry();
  const unsigned n_offsets = cfg.max_offsets ? std::min<unsigned>(cfg.max_offsets, kLinesPerPage) : kLinesPerPage;

  ParallelReport rep;
  rep.per_worker.assign(cfg.workers, 0);
  const TimeNs t0 = p.now();
  std::size_t k = 0;
  for (unsigned o = 0; o < n_offsets; ++o) {
    for (unsigned c = 0; c < groups.size(); ++c, ++k) {
      ++rep.partitions;
      const unsigned worker = static_cast<unsigned>(k % cfg.workers);
      const unsigned offset = o * static_cast<unsigned>(kLineSize);
      p.set_now(t0 + rep.per_worker[worker]);
      p.reseed(derive_seed(cfg.seed, 0x9a27, c, o));
      p.reset_timer();
      const TimeNs start = p.now();

      BuildOptions opt;
      opt.max_sets = cfg.f;
      BuildReport br = build_all_at_offset(p, make_pool(Level::LLC, offset, groups[c]), opt);
      if (br.sets.empty()) ++rep.empty_partitions;

      if (!oracle) {
        // Mutual eviction flags sets that landed on one row and slice.
        for (std::size_t i = 0; i < br.sets.size(); ++i)
          for (std::size_t j = 0; j < i; ++j)
            if (!br.sets[j].duplicate && p.test_eviction(Level::LLC, br.sets[j].members, br.sets[i].members.front())) {
              br.sets[i].duplicate = true;
              break;
            }
      }
      for (auto& e : br.sets) {
        e.color = static_cast<int>(c);
        rep.sets.push_back(std::move(e));
      }
      rep.per_worker[worker] += p.now() - start;
    }
  }

  if (oracle) {
    std::set<SetKey> seen;
    std::set<std::pair<unsigned, unsigned>> rows;  // (color, llc index)
    for (auto& e : rep.sets) {
      const SetKey key = oracle_key(*oracle, g, Level::LLC, e.members.front());
      if (!seen.insert(key).second) e.duplicate = true;
      rows.emplace(static_cast<unsigned>(e.color), key.index);
    }
    rep.covered_rows = rows.size();
    const unsigned extra = g.uncontrollable_bits(Level::LLC) - g.uncontrollable_bits(Level::L2);
    rep.expected_rows = rep.partitions << extra;
  }
  for (const auto& e : rep.sets) rep.duplicates += e.duplicate;
  rep.elapsed = *std::max_element(rep.per_worker.begin(), rep.per_worker.end());
  p.set_now(t0 + rep.elapsed);
  return rep;
}

/// Sets sharing one (color, offset) partition.
inline std::map<std::pair<int, unsigned>, std::vector<const EvictionSet*>> by_partition(
    std::span<const EvictionSet> sets) {
  std::map<std::pair<int, unsigned>, std::vector<const EvictionSet*>> m;
  for (const auto& e : sets) m[{e.color, e.offset}].push_back(&e);
  return m;
}

}  // namespace cachex
