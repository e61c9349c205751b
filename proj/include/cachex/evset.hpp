#pragma once

// Minimal eviction sets: pool sizing, binary-search pruning, the L2 prefilter
// for LLC targets and per-offset construction.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cachex/cache_model.hpp"
#include "cachex/common.hpp"
#include "cachex/mem_model.hpp"
#include "cachex/probe.hpp"

namespace cachex {

struct EvictionSet {
  Level level = Level::L2;
  unsigned offset = 0;  // byte offset within the page, line aligned
  std::vector<std::uint64_t> members;
  bool minimal = false;
  int color = -1;   // virtual color of the partition it was built in
  int group = -1;   // index of the L2 set that filtered its pool
  bool duplicate = false;

  std::size_t size() const { return members.size(); }
};

struct CandidatePool {
  Level level = Level::L2;
  unsigned offset = 0;
  std::vector<std::uint64_t> members;
};

inline void check_offset(unsigned offset) {
  if (offset % kLineSize != 0 || offset >= kPageSize)
    throw Error(Errc::invalid_argument, "page offset must be line aligned and inside the page");
}

/// P_s = W * 2^N_UI * C, times the slice count for the LLC.
inline std::uint64_t pool_size(const CacheGeometry& g, Level level, unsigned C) {
  if (C < 1) throw Error(Errc::invalid_argument, "pool scaling factor must be >= 1");
  std::uint64_t n = std::uint64_t(g.ways(level)) * g.colors(level) * C;
  if (level == Level::LLC) n *= g.n_slices;
  return n;
}

/// Number of distinct sets reachable at one page offset.
inline std::uint64_t sets_per_offset(const CacheGeometry& g, Level level) {
  return level == Level::L2 ? g.colors(Level::L2) : std::uint64_t(g.colors(Level::LLC)) * g.n_slices;
}

inline CandidatePool make_pool(Level level, unsigned offset, std::span<const std::uint64_t> gva_pages) {
  check_offset(offset);
  CandidatePool p{level, offset, {}};
  p.members.reserve(gva_pages.size());
  for (auto page : gva_pages) p.members.push_back((page << kPageBits) | offset);
  return p;
}

/// Replaces bits [11:6] of every address with `offset`.
inline std::vector<std::uint64_t> shift_members(std::span<const std::uint64_t> members, unsigned offset) {
  check_offset(offset);
  std::vector<std::uint64_t> out;
  out.reserve(members.size());
  for (auto m : members) out.push_back((m & ~std::uint64_t(kPageSize - 1)) | offset);
  return out;
}

inline bool test_eviction(Prober& p, Level level, std::span<const std::uint64_t> candidates, std::uint64_t target) {
  return p.test_eviction(level, candidates, target);
}

/// Grows `found` one congruent address at a time: each round locates the
/// shortest prefix of the survivors that, together with `found`, still evicts
/// the target, keeps its last element and drops everything after it.
inline EvictionSet prune_binary_search(Prober& p, const CandidatePool& pool, std::uint64_t target) {
  const Level level = pool.level;
  const unsigned cap = 4 * p.geometry().ways(level) + 4;
  std::vector<std::uint64_t> found;
  std::vector<std::uint64_t> s = pool.members;
  std::vector<std::uint64_t> buf;

  auto evicts_with_prefix = [&](std::size_t k) {
    buf.assign(found.begin(), found.end());
    buf.insert(buf.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k));
    return p.test_eviction(level, buf, target);
  };

  auto complete = [&] {
    for (unsigned i = 0; i < p.config().confirm; ++i)
      if (!p.test_eviction(level, found, target)) return false;
    return true;
  };

  while (!complete()) {
    if (s.empty() || found.size() >= cap) throw Error(Errc::prune_failed, "survivors no longer evict the target");
    // Gallop to bracket the shortest evicting prefix, then bisect.
    std::size_t lo = 1, hi = 1;
    while (hi < s.size() && !evicts_with_prefix(hi)) {
      lo = hi + 1;
      hi = std::min(s.size(), hi * 2);
    }
    while (lo < hi) {
      const std::size_t mid = lo + (hi - lo) / 2;
      if (evicts_with_prefix(mid))
        hi = mid;
      else
        lo = mid + 1;
    }
    found.push_back(s[lo - 1]);
    s.resize(lo - 1);
  }
  EvictionSet e;
  e.level = level;
  e.offset = pool.offset;
  e.members = std::move(found);
  e.minimal = true;
  return e;
}

/// Keeps the candidates the target's L2 set evicts; these share its L2 index
/// bits and therefore include every LLC-congruent address.
inline CandidatePool l2_prefilter(Prober& p, const CandidatePool& pool, std::uint64_t target,
                                  const EvictionSet& target_l2) {
  if (target_l2.level != Level::L2) throw Error(Errc::invalid_argument, "prefilter needs an L2 eviction set");
  if (bits(target, 11, 0) != pool.offset || target_l2.offset != pool.offset)
    throw Error(Errc::invalid_argument, "prefilter offsets disagree");
  CandidatePool out{pool.level, pool.offset, {}};
  for (auto c : pool.members)
    if (p.test_eviction(Level::L2, target_l2.members, c)) out.members.push_back(c);
  return out;
}

struct BuildReport {
  std::vector<EvictionSet> sets;
  std::size_t expected = 0;
  std::size_t targets = 0;
  std::size_t assigned = 0;     // targets already covered by a built set
  std::size_t uncoverable = 0;  // pool could not evict the target
  std::size_t prune_failures = 0;
  bool partial() const { return sets.size() < expected; }
};

struct BuildOptions {
  /// L2 sets at this offset, used to prefilter LLC pools. Empty means the pool
  /// is already restricted to one L2 class.
  std::vector<EvictionSet> l2_sets;
  std::size_t max_sets = 0;  // 0 = sets_per_offset
};

inline BuildReport build_all_at_offset(Prober& p, const CandidatePool& pool, const BuildOptions& opt = {}) {
  const Level level = pool.level;
  BuildReport rep;
  rep.expected = opt.max_sets ? opt.max_sets : sets_per_offset(p.geometry(), level);

  std::vector<std::uint64_t> remaining = pool.members;
  std::shuffle(remaining.begin(), remaining.end(), p.rng());

  // Prefiltered sub-pools, built on first use per L2 set.
  const bool grouped = level == Level::LLC && !opt.l2_sets.empty();
  std::map<int, std::vector<std::uint64_t>> filtered;

  auto l2_group_of = [&](std::uint64_t target) -> int {
    for (std::size_t i = 0; i < opt.l2_sets.size(); ++i)
      if (p.test_eviction(Level::L2, opt.l2_sets[i].members, target)) return static_cast<int>(i);
    return -1;
  };

  while (!remaining.empty() && rep.sets.size() < rep.expected) {
    const std::uint64_t target = remaining.back();
    remaining.pop_back();
    ++rep.targets;

    int group = -1;
    std::vector<std::uint64_t>* cands = &remaining;
    if (grouped) {
      group = l2_group_of(target);
      if (group < 0) {
        ++rep.uncoverable;
        continue;
      }
      auto it = filtered.find(group);
      if (it == filtered.end()) {
        CandidatePool sub{level, pool.offset, remaining};
        it = filtered.emplace(group, l2_prefilter(p, sub, target, opt.l2_sets[group]).members).first;
      }
      auto& v = it->second;
      v.erase(std::remove(v.begin(), v.end(), target), v.end());
      cands = &v;
    }

    bool covered = false;
    for (const auto& e : rep.sets)
      if (e.group == group && p.test_eviction(level, e.members, target)) {
        covered = true;
        break;
      }
    if (covered) {
      ++rep.assigned;
      continue;
    }
    if (!p.test_eviction(level, *cands, target)) {
      ++rep.uncoverable;
      continue;
    }

    std::optional<EvictionSet> built;
    for (unsigned attempt = 0; attempt < p.config().retries && !built; ++attempt) {
      try {
        built = prune_binary_search(p, CandidatePool{level, pool.offset, *cands}, target);
      } catch (const Error& e) {
        if (e.code() != Errc::prune_failed) throw;
        ++rep.prune_failures;
      }
    }
    if (!built) continue;
    built->group = group;
    auto drop = [&](std::vector<std::uint64_t>& v) {
      std::erase_if(v, [&](std::uint64_t a) {
        return std::find(built->members.begin(), built->members.end(), a) != built->members.end();
      });
    };
    drop(remaining);
    for (auto& [g, v] : filtered) drop(v);
    rep.sets.push_back(std::move(*built));
  }
  return rep;
}

/// Ground-truth (slice, set index) of an address at `level`.
struct SetKey {
  unsigned slice = 0;
  unsigned index = 0;
  auto operator<=>(const SetKey&) const = default;
};

inline SetKey oracle_key(const TranslationMap& map, const CacheGeometry& g, Level level, std::uint64_t gva) {
  const std::uint64_t hpa = map.gva_to_hpa(gva);
  return level == Level::L2 ? SetKey{0, set_index(g, Level::L2, hpa)}
                            : SetKey{slice_of(g, hpa), set_index(g, Level::LLC, hpa)};
}

/// True iff every member maps to one set under the oracle.
inline bool oracle_congruent(const TranslationMap& map, const CacheGeometry& g, const EvictionSet& e) {
  if (e.members.empty()) return false;
  const SetKey k = oracle_key(map, g, e.level, e.members.front());
  return std::all_of(e.members.begin(), e.members.end(),
                     [&](std::uint64_t m) { return oracle_key(map, g, e.level, m) == k; });
}

/// CSV rows `level,offset,color,member_gva...`.
inline void write_evsets_csv(std::ostream& os, std::span<const EvictionSet> sets) {
  os << "level,offset,color,members\n";
  for (const auto& e : sets) {
    os << to_string(e.level) << ",0x" << std::hex << e.offset << std::dec << ',' << e.color;
    for (auto m : e.members) os << ",0x" << std::hex << m << std::dec;
    os << '\n';
  }
}

}  // namespace cachex
