#pragma once

// Set-associative L2 (per core) and sliced LLC (per domain) with LRU, bit-PLRU
// and random replacement, inclusive or non-inclusive fills, and per-actor way
// masks emulating CAT.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cachex/common.hpp"

namespace cachex {

enum class Inclusivity : std::uint8_t { inclusive, non_inclusive };
enum class Replacement : std::uint8_t { lru, plru, random };

inline const char* to_string(Replacement r) {
  switch (r) {
    case Replacement::lru: return "lru";
    case Replacement::plru: return "plru";
    case Replacement::random: return "random";
  }
  return "?";
}

struct CacheGeometry {
  unsigned line_size = 64;
  unsigned l2_ways = 16;
  unsigned l2_sets = 1024;
  unsigned llc_ways = 11;
  unsigned llc_sets = 2048;  // per slice
  unsigned n_slices = 20;
  Inclusivity inclusivity = Inclusivity::non_inclusive;
  Replacement replacement = Replacement::lru;
  unsigned n_domains = 1;
  unsigned cores_per_domain = 20;

  /// Intel Gold 6138 (Skylake-SP) parameters.
  static CacheGeometry table1() { return {}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::invalid_argument, "geometry: " + m); };
    if (line_size != kLineSize) fail("line_size must be 64");
    if (l2_ways == 0 || llc_ways == 0 || n_slices == 0 || n_domains == 0 || cores_per_domain == 0)
      fail("all counts must be positive");
    if (!is_pow2(l2_sets) || !is_pow2(llc_sets)) fail("set counts must be powers of two");
    if (l2_ways > 32 || llc_ways > 32) fail("at most 32 ways");
    if (llc_sets < l2_sets) fail("LLC index bits must include the L2 index bits");
  }

  unsigned sets(Level l) const { return l == Level::L2 ? l2_sets : llc_sets; }
  unsigned ways(Level l) const { return l == Level::L2 ? l2_ways : llc_ways; }
  unsigned index_bits(Level l) const { return log2_exact(sets(l)); }
  /// Set-index bits above the page offset, hidden from the guest.
  unsigned uncontrollable_bits(Level l) const {
    const unsigned top = index_bits(l) + kLineBits;
    return top > kPageBits ? top - kPageBits : 0;
  }
  unsigned colors(Level l) const { return 1u << uncontrollable_bits(l); }
  unsigned n_cores() const { return n_domains * cores_per_domain; }

  bool operator==(const CacheGeometry&) const = default;
};

/// L2: bits [6+log2(l2_sets)-1 : 6]; LLC: the per-slice index.
inline unsigned set_index(const CacheGeometry& g, Level level, std::uint64_t hpa) {
  return static_cast<unsigned>((hpa >> kLineBits) & (g.sets(level) - 1));
}

/// XOR-folds bits [35:6] to 12 bits, scrambles with an odd multiplier and
/// reduces with a multiply-shift. Uniform over slices for any fixed set index.
inline unsigned slice_of(const CacheGeometry& g, std::uint64_t hpa) {
  if (g.n_slices == 1) return 0;
  const std::uint64_t x = bits(hpa, 35, 6);
  std::uint64_t h = (x ^ (x >> 12) ^ (x >> 24)) & 0xFFF;
  h = (h * 0xB5Du) & 0xFFF;
  return static_cast<unsigned>((h * g.n_slices) >> 12);
}

using ActorId = std::uint16_t;

enum class HitLevel : std::uint8_t { L2, LLC, Memory };

inline const char* to_string(HitLevel h) {
  switch (h) {
    case HitLevel::L2: return "L2";
    case HitLevel::LLC: return "LLC";
    case HitLevel::Memory: return "memory";
  }
  return "?";
}

struct Eviction {
  Level level = Level::L2;
  unsigned cache = 0;  // core for L2, domain for LLC
  unsigned slice = 0;
  unsigned set = 0;
  unsigned way = 0;
  std::uint64_t line = 0;
  ActorId owner = 0;
};

struct AccessResult {
  HitLevel level = HitLevel::Memory;
  std::optional<Eviction> l2_evicted;
  std::optional<Eviction> llc_evicted;
};

/// One cache array: `sets` x `ways` slots plus replacement metadata.
class SetArray {
 public:
  static constexpr std::uint64_t kEmpty = ~0ull;

  struct Slot {
    std::uint64_t line = kEmpty;
    std::uint64_t stamp = 0;
    ActorId owner = 0;
    std::uint8_t nru = 0;
  };

  SetArray() = default;
  SetArray(unsigned sets, unsigned ways, std::uint64_t seed = 0)
      : sets_(sets), ways_(ways), slots_(std::size_t(sets) * ways), draws_(sets), seed_(seed) {}

  unsigned sets() const { return sets_; }
  unsigned ways() const { return ways_; }

  Slot& slot(unsigned set, unsigned way) { return slots_[std::size_t(set) * ways_ + way]; }
  const Slot& slot(unsigned set, unsigned way) const { return slots_[std::size_t(set) * ways_ + way]; }

  int find(unsigned set, std::uint64_t line) const {
    const Slot* s = &slots_[std::size_t(set) * ways_];
    for (unsigned w = 0; w < ways_; ++w)
      if (s[w].line == line) return static_cast<int>(w);
    return -1;
  }

  /// NRU saturation is judged within `mask`, the accessor's ways.
  void touch(unsigned set, unsigned way, Replacement policy, std::uint32_t mask = ~0u) {
    Slot* s = &slots_[std::size_t(set) * ways_];
    s[way].stamp = ++clock_;
    if (policy == Replacement::plru) {
      s[way].nru = 1;
      bool all = true;
      for (unsigned w = 0; w < ways_; ++w) all = all && (!(mask >> w & 1u) || s[w].nru);
      if (all)
        for (unsigned w = 0; w < ways_; ++w)
          if (w != way && (mask >> w & 1u)) s[w].nru = 0;
    }
  }

  /// Victim among the ways in `mask`: an empty way first, then by policy.
  /// Random draws come from a per-set stream, so the outcome in one set does
  /// not depend on how accesses to other sets are interleaved.
  unsigned victim(unsigned set, std::uint32_t mask, Replacement policy) {
    Slot* s = &slots_[std::size_t(set) * ways_];
    for (unsigned w = 0; w < ways_; ++w)
      if ((mask >> w & 1u) && s[w].line == kEmpty) return w;
    switch (policy) {
      case Replacement::lru: {
        unsigned best = ways_;
        for (unsigned w = 0; w < ways_; ++w)
          if ((mask >> w & 1u) && (best == ways_ || s[w].stamp < s[best].stamp)) best = w;
        return best;
      }
      case Replacement::plru: {
        for (unsigned w = 0; w < ways_; ++w)
          if ((mask >> w & 1u) && !s[w].nru) return w;
        unsigned first = ways_;
        for (unsigned w = 0; w < ways_; ++w)
          if (mask >> w & 1u) {
            s[w].nru = 0;
            if (first == ways_) first = w;
          }
        return first;
      }
      case Replacement::random: {
        const unsigned n = static_cast<unsigned>(std::popcount(mask));
        const std::uint64_t x = splitmix64(seed_ ^ (std::uint64_t(set) << 32) ^ ++draws_[set]);
        unsigned k = static_cast<unsigned>(x % n);
        for (unsigned w = 0; w < ways_; ++w)
          if (mask >> w & 1u) {
            if (k == 0) return w;
            --k;
          }
        break;
      }
    }
    return 0;
  }

  void clear(unsigned set, unsigned way) {
    Slot& s = slot(set, way);
    s.line = kEmpty;
    s.nru = 0;
    s.stamp = 0;
  }

  std::uint64_t occupied() const {
    std::uint64_t n = 0;
    for (const auto& s : slots_) n += s.line != kEmpty;
    return n;
  }

 private:
  unsigned sets_ = 0;
  unsigned ways_ = 0;
  std::vector<Slot> slots_;
  std::vector<std::uint64_t> draws_;
  std::uint64_t seed_ = 0;
  std::uint64_t clock_ = 0;
};

struct LevelCounters {
  std::uint64_t fills = 0;
  std::uint64_t evictions = 0;
  std::uint64_t flushes = 0;
};

struct ActorStats {
  std::uint64_t l2_hits = 0;
  std::uint64_t llc_hits = 0;
  std::uint64_t memory = 0;
  std::uint64_t accesses() const { return l2_hits + llc_hits + memory; }
};

struct PullResult {
  bool ok = false;  // false when the helper cannot reach the owner's LLC
  HitLevel level = HitLevel::Memory;
  std::optional<Eviction> llc_evicted;
};

class CacheState {
 public:
  /// Observer for every LLC fill: (hpa line address, owner).
  using FillObserver = std::function<void(std::uint64_t line, ActorId owner)>;

  CacheState(const CacheGeometry& g, std::uint64_t seed) : g_(g) {
    g_.validate();
    l2_.reserve(g_.n_cores());
    for (unsigned c = 0; c < g_.n_cores(); ++c) l2_.emplace_back(g_.l2_sets, g_.l2_ways, derive_seed(seed, 2, c));
    for (unsigned d = 0; d < g_.n_domains; ++d)
      llc_.emplace_back(g_.llc_sets * g_.n_slices, g_.llc_ways, derive_seed(seed, 3, d));
  }

  const CacheGeometry& geometry() const { return g_; }

  ActorId register_actor(unsigned core, std::string name = {}) {
    if (core >= g_.n_cores()) throw Error(Errc::invalid_argument, "core " + std::to_string(core) + " out of range");
    Actor a;
    a.core = core;
    a.name = std::move(name);
    a.mask[0] = full_mask(g_.l2_ways);
    a.mask[1] = full_mask(g_.llc_ways);
    actors_.push_back(std::move(a));
    return static_cast<ActorId>(actors_.size() - 1);
  }

  bool registered(ActorId a) const { return a < actors_.size(); }
  std::size_t actor_count() const { return actors_.size(); }
  unsigned core_of(ActorId a) const { return actor(a).core; }
  unsigned domain_of(ActorId a) const { return actor(a).core / g_.cores_per_domain; }
  const std::string& name_of(ActorId a) const { return actor(a).name; }

  /// Restricts fills by `a` to the lowest `ways` ways at `level`.
  void set_way_mask(ActorId a, Level level, unsigned ways) {
    Actor& act = actor_mut(a);
    if (ways < 1 || ways > g_.ways(level))
      throw Error(Errc::invalid_argument, "way mask " + std::to_string(ways) + " out of range");
    act.mask[level == Level::L2 ? 0 : 1] = full_mask(ways);
  }

  std::uint32_t way_mask(ActorId a, Level level) const { return actor(a).mask[level == Level::L2 ? 0 : 1]; }

  AccessResult access(std::uint64_t hpa, ActorId a, bool is_write = false) {
    (void)is_write;  // clean/dirty state is not modeled
    const Actor& act = actor(a);
    const std::uint64_t line = line_of(hpa);
    AccessResult r;

    SetArray& l2 = l2_[act.core];
    const unsigned l2set = set_index(g_, Level::L2, hpa);
    if (int w = l2.find(l2set, line); w >= 0) {
      l2.touch(l2set, static_cast<unsigned>(w), g_.replacement, act.mask[0]);
      ++stats_[a].l2_hits;
      r.level = HitLevel::L2;
      return r;
    }

    const unsigned dom = act.core / g_.cores_per_domain;
    const unsigned lset = llc_row_slot(hpa);
    SetArray& llc = llc_[dom];
    if (int w = llc.find(lset, line); w >= 0) {
      llc.touch(lset, static_cast<unsigned>(w), g_.replacement, act.mask[1]);
      ++stats_[a].llc_hits;
      r.level = HitLevel::LLC;
    } else {
      ++stats_[a].memory;
      r.level = HitLevel::Memory;
      if (g_.inclusivity == Inclusivity::inclusive) r.llc_evicted = llc_fill(dom, lset, line, a);
    }

    r.l2_evicted = l2_fill(act.core, l2set, line, a);
    if (r.l2_evicted && g_.inclusivity == Inclusivity::non_inclusive) {
      // Victim path: L2 evictions land in the LLC.
      const Eviction& v = *r.l2_evicted;
      const std::uint64_t vhpa = v.line << kLineBits;
      const unsigned vset = llc_row_slot(vhpa);
      if (llc.find(vset, v.line) < 0) {
        auto e = llc_fill(dom, vset, v.line, registered(v.owner) ? v.owner : a);
        if (e) r.llc_evicted = e;
      }
    }
    return r;
  }

  /// Installs (or refreshes) a line directly in `owner`'s LLC, leaving private
  /// caches untouched. Models a cross-core shared access.
  PullResult llc_pull(std::uint64_t hpa, ActorId owner) {
    const unsigned dom = domain_of(owner);
    const std::uint64_t line = line_of(hpa);
    const unsigned lset = llc_row_slot(hpa);
    SetArray& llc = llc_[dom];
    PullResult r;
    r.ok = true;
    if (int w = llc.find(lset, line); w >= 0) {
      llc.touch(lset, static_cast<unsigned>(w), g_.replacement, actor(owner).mask[1]);
      ++stats_[owner].llc_hits;
      r.level = HitLevel::LLC;
      return r;
    }
    ++stats_[owner].memory;
    r.level = HitLevel::Memory;
    r.llc_evicted = llc_fill(dom, lset, line, owner);
    return r;
  }

  /// Removes the line from every cache.
  void flush_line(std::uint64_t hpa) {
    const std::uint64_t line = line_of(hpa);
    const unsigned l2set = set_index(g_, Level::L2, hpa);
    for (auto& l2 : l2_)
      if (int w = l2.find(l2set, line); w >= 0) {
        l2.clear(l2set, static_cast<unsigned>(w));
        ++counters_[0].flushes;
      }
    const unsigned lset = llc_row_slot(hpa);
    for (auto& llc : llc_)
      if (int w = llc.find(lset, line); w >= 0) {
        llc.clear(lset, static_cast<unsigned>(w));
        ++counters_[1].flushes;
      }
  }

  bool in_l2(unsigned core, std::uint64_t hpa) const {
    return l2_.at(core).find(set_index(g_, Level::L2, hpa), line_of(hpa)) >= 0;
  }
  bool in_llc(unsigned domain, std::uint64_t hpa) const {
    return llc_.at(domain).find(llc_row_slot(hpa), line_of(hpa)) >= 0;
  }

  /// Level an access by `a` would hit, without changing state.
  HitLevel peek(std::uint64_t hpa, ActorId a) const {
    if (in_l2(core_of(a), hpa)) return HitLevel::L2;
    if (in_llc(domain_of(a), hpa)) return HitLevel::LLC;
    return HitLevel::Memory;
  }

  const LevelCounters& counters(Level l) const { return counters_[l == Level::L2 ? 0 : 1]; }
  ActorStats stats(ActorId a) const {
    auto it = stats_.find(a);
    return it == stats_.end() ? ActorStats{} : it->second;
  }
  void reset_stats(ActorId a) { stats_[a] = {}; }

  std::uint64_t resident(Level l) const {
    std::uint64_t n = 0;
    if (l == Level::L2)
      for (const auto& a : l2_) n += a.occupied();
    else
      for (const auto& a : llc_) n += a.occupied();
    return n;
  }

  const SetArray& l2_array(unsigned core) const { return l2_.at(core); }
  const SetArray& llc_array(unsigned domain) const { return llc_.at(domain); }

  /// Number of ways in the LLC set holding `hpa` whose line is owned by `a`.
  unsigned llc_owned_ways(unsigned domain, std::uint64_t hpa, ActorId a) const {
    const SetArray& llc = llc_.at(domain);
    const unsigned set = llc_row_slot(hpa);
    unsigned n = 0;
    for (unsigned w = 0; w < llc.ways(); ++w)
      n += llc.slot(set, w).line != SetArray::kEmpty && llc.slot(set, w).owner == a;
    return n;
  }

  /// True iff no line appears twice within any set of any array.
  bool unique_lines() const {
    auto check = [](const SetArray& arr) {
      for (unsigned s = 0; s < arr.sets(); ++s)
        for (unsigned i = 0; i < arr.ways(); ++i) {
          const auto li = arr.slot(s, i).line;
          if (li == SetArray::kEmpty) continue;
          for (unsigned j = i + 1; j < arr.ways(); ++j)
            if (arr.slot(s, j).line == li) return false;
        }
      return true;
    };
    return std::all_of(l2_.begin(), l2_.end(), check) && std::all_of(llc_.begin(), llc_.end(), check);
  }

  void set_fill_observer(FillObserver obs) { observer_ = std::move(obs); }

  /// CSV `level,slice,set,way,tag,owner`; domain/core is folded into the
  /// level column (`L2.<core>`, `LLC.<domain>`).
  void dump_csv(std::ostream& os) const {
    os << "level,slice,set,way,tag,owner\n";
    for (unsigned c = 0; c < l2_.size(); ++c) {
      const auto& a = l2_[c];
      for (unsigned s = 0; s < a.sets(); ++s)
        for (unsigned w = 0; w < a.ways(); ++w)
          if (const auto& sl = a.slot(s, w); sl.line != SetArray::kEmpty)
            os << "L2." << c << ",0," << s << ',' << w << ",0x" << std::hex << sl.line << std::dec << ','
               << sl.owner << '\n';
    }
    for (unsigned d = 0; d < llc_.size(); ++d) {
      const auto& a = llc_[d];
      for (unsigned s = 0; s < a.sets(); ++s)
        for (unsigned w = 0; w < a.ways(); ++w)
          if (const auto& sl = a.slot(s, w); sl.line != SetArray::kEmpty)
            os << "LLC." << d << ',' << s / g_.llc_sets << ',' << s % g_.llc_sets << ',' << w << ",0x"
               << std::hex << sl.line << std::dec << ',' << sl.owner << '\n';
    }
  }

 private:
  struct Actor {
    unsigned core = 0;
    std::string name;
    std::array<std::uint32_t, 2> mask{};
  };

  static std::uint32_t full_mask(unsigned ways) {
    return ways >= 32 ? 0xFFFFFFFFu : ((1u << ways) - 1);
  }

  const Actor& actor(ActorId a) const {
    if (a >= actors_.size()) throw Error(Errc::unregistered_actor, "actor " + std::to_string(a));
    return actors_[a];
  }
  Actor& actor_mut(ActorId a) {
    if (a >= actors_.size()) throw Error(Errc::unregistered_actor, "actor " + std::to_string(a));
    return actors_[a];
  }

  unsigned llc_row_slot(std::uint64_t hpa) const {
    return slice_of(g_, hpa) * g_.llc_sets + set_index(g_, Level::LLC, hpa);
  }

  std::optional<Eviction> l2_fill(unsigned core, unsigned set, std::uint64_t line, ActorId owner) {
    SetArray& arr = l2_[core];
    const unsigned w = arr.victim(set, actors_[owner].mask[0], g_.replacement);
    std::optional<Eviction> ev;
    auto& s = arr.slot(set, w);
    if (s.line != SetArray::kEmpty) {
      ev = Eviction{Level::L2, core, 0, set, w, s.line, s.owner};
      ++counters_[0].evictions;
    }
    s.line = line;
    s.owner = owner;
    s.nru = 0;
    arr.touch(set, w, g_.replacement, actors_[owner].mask[0]);
    ++counters_[0].fills;
    return ev;
  }

  std::optional<Eviction> llc_fill(unsigned dom, unsigned set, std::uint64_t line, ActorId owner) {
    SetArray& arr = llc_[dom];
    const unsigned w = arr.victim(set, actors_[owner].mask[1], g_.replacement);
    std::optional<Eviction> ev;
    auto& s = arr.slot(set, w);
    if (s.line != SetArray::kEmpty) {
      ev = Eviction{Level::LLC, dom, set / g_.llc_sets, set % g_.llc_sets, w, s.line, s.owner};
      ++counters_[1].evictions;
      if (g_.inclusivity == Inclusivity::inclusive) back_invalidate(dom, s.line);
    }
    s.line = line;
    s.owner = owner;
    s.nru = 0;
    arr.touch(set, w, g_.replacement, actors_[owner].mask[1]);
    ++counters_[1].fills;
    if (observer_) observer_(line, owner);
    return ev;
  }

  void back_invalidate(unsigned dom, std::uint64_t line) {
    const unsigned set = set_index(g_, Level::L2, line << kLineBits);
    for (unsigned c = dom * g_.cores_per_domain; c < (dom + 1) * g_.cores_per_domain; ++c)
      if (int w = l2_[c].find(set, line); w >= 0) {
        l2_[c].clear(set, static_cast<unsigned>(w));
        ++counters_[0].evictions;
      }
  }

  CacheGeometry g_;
  std::vector<SetArray> l2_;
  std::vector<SetArray> llc_;
  std::vector<Actor> actors_;
  std::unordered_map<ActorId, ActorStats> stats_;
  std::array<LevelCounters, 2> counters_{};
  FillObserver observer_;
};

}  // namespace cachex
