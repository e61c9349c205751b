#pragma once

// Virtual page colors: L2 color filters, offset replicas, parallel page
// classification and per-color free lists.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <unordered_set>
#include <vector>

#include "cachex/common.hpp"
#include "cachex/evset.hpp"
#include "cachex/mem_model.hpp"
#include "cachex/probe.hpp"

namespace cachex {

struct ColorFilter {
  unsigned color = 0;
  EvictionSet base;  // L2, offset 0

  std::vector<std::uint64_t> replica(unsigned offset) const { return shift_members(base.members, offset); }
};

inline std::vector<std::uint64_t> shift_filter(const ColorFilter& f, unsigned offset) { return f.replica(offset); }

/// Hands out free guest pages in random order.
class GuestAllocator {
 public:
  GuestAllocator(std::uint64_t guest_pages, std::uint64_t seed) : rng_(make_rng(seed, 0xa110c)) {
    free_.reserve(guest_pages);
    for (std::uint64_t p = 0; p < guest_pages; ++p) free_.push_back(p);
  }

  std::size_t available() const { return free_.size(); }

  std::uint64_t alloc() {
    if (free_.empty()) throw Error(Errc::capacity, "guest out of free pages");
    const std::size_t i = uniform_below(rng_, free_.size());
    const std::uint64_t page = free_[i];
    free_[i] = free_.back();
    free_.pop_back();
    return page;
  }

  std::vector<std::uint64_t> alloc_n(std::size_t n) {
    std::vector<std::uint64_t> v;
    v.reserve(n);
    for (std::size_t i = 0; i < n; ++i) v.push_back(alloc());
    return v;
  }

  void release(std::uint64_t page) { free_.push_back(page); }

 private:
  std::vector<std::uint64_t> free_;
  Rng rng_;
};

/// Builds the L2 sets at offset 0 from `pages` and relabels them 0..n-1.
inline std::vector<ColorFilter> build_color_filters(Prober& p, std::span<const std::uint64_t> pages) {
  const auto want = p.geometry().colors(Level::L2);
  const BuildReport rep = build_all_at_offset(p, make_pool(Level::L2, 0, pages));
  if (rep.sets.size() < want) throw PartialPaletteError(rep.sets.size(), want);
  std::vector<ColorFilter> out;
  for (std::size_t i = 0; i < rep.sets.size(); ++i) {
    ColorFilter f{static_cast<unsigned>(i), rep.sets[i]};
    f.base.color = static_cast<int>(i);
    out.push_back(std::move(f));
  }
  return out;
}

/// Filter i runs at offset i*64 against the page's line at the same offset;
/// exactly one probe line must be evicted.
inline unsigned classify_page_parallel(Prober& p, std::uint64_t page, std::span<const ColorFilter> filters) {
  if (filters.empty() || filters.size() > kLinesPerPage)
    throw Error(Errc::invalid_argument, "filter count must be in [1, 64]");
  const std::uint64_t base = page << kPageBits;
  std::vector<std::uint64_t> probes(filters.size());
  std::vector<std::uint64_t> sweep;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    const unsigned off = static_cast<unsigned>(i * kLineSize);
    probes[i] = base | off;
    const auto r = filters[i].replica(off);
    sweep.insert(sweep.end(), r.begin(), r.end());
  }
  p.ensure_warm();
  for (auto a : probes) p.touch(a);
  for (unsigned r = 0; r < p.config().rounds; ++r) p.touch_batch(sweep);
  int hit = -1;
  unsigned count = 0;
  for (std::size_t i = 0; i < probes.size(); ++i)
    if (p.touch(probes[i]) != Measured::L2OrFaster) {
      hit = static_cast<int>(i);
      ++count;
    }
  if (count != 1)
    throw Error(Errc::classification_ambiguous, std::to_string(count) + " filters evicted page " + std::to_string(page));
  return filters[static_cast<std::size_t>(hit)].color;
}

inline unsigned classify_page_sequential(Prober& p, std::uint64_t page, std::span<const ColorFilter> filters) {
  const std::uint64_t target = page << kPageBits;
  int hit = -1;
  unsigned count = 0;
  for (const auto& f : filters)
    if (p.test_eviction(Level::L2, f.base.members, target)) {
      hit = static_cast<int>(f.color);
      ++count;
    }
  if (count != 1)
    throw Error(Errc::classification_ambiguous, std::to_string(count) + " filters evicted page " + std::to_string(page));
  return static_cast<unsigned>(hit);
}

struct ClassifyStats {
  std::uint64_t parallel_ok = 0;
  std::uint64_t retries = 0;
  std::uint64_t sequential = 0;
  std::uint64_t failed = 0;
};

/// Parallel classification with `retries` repeats, then one sequential pass.
inline std::optional<unsigned> classify_page(Prober& p, std::uint64_t page, std::span<const ColorFilter> filters,
                                             unsigned retries = 2, ClassifyStats* st = nullptr) {
  for (unsigned a = 0; a <= retries; ++a) {
    try {
      const unsigned c = classify_page_parallel(p, page, filters);
      if (st) ++(a == 0 ? st->parallel_ok : st->retries);
      return c;
    } catch (const Error& e) {
      if (e.code() != Errc::classification_ambiguous) throw;
    }
  }
  try {
    const unsigned c = classify_page_sequential(p, page, filters);
    if (st) ++st->sequential;
    return c;
  } catch (const Error& e) {
    if (e.code() != Errc::classification_ambiguous) throw;
  }
  if (st) ++st->failed;
  return std::nullopt;
}

class ColoredFreeLists {
 public:
  explicit ColoredFreeLists(unsigned colors = 16) : lists_(colors) {}

  unsigned colors() const { return static_cast<unsigned>(lists_.size()); }
  std::size_t size(unsigned c) const { return lists_.at(c).size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : lists_) n += l.size();
    return n;
  }
  bool empty(unsigned c) const { return lists_.at(c).empty(); }

  void push(unsigned c, std::uint64_t page) {
    if (!where_.emplace(page, c).second) throw Error(Errc::invariant, "page already on a colored list");
    lists_.at(c).push_back(page);
  }

  std::uint64_t pop(unsigned c) {
    auto& l = lists_.at(c);
    if (l.empty()) throw Error(Errc::capacity, "colored list empty");
    const std::uint64_t page = l.front();
    l.pop_front();
    where_.erase(page);
    return page;
  }

  std::optional<unsigned> color_of(std::uint64_t page) const {
    auto it = where_.find(page);
    if (it == where_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::size_t> histogram() const {
    std::vector<std::size_t> h;
    for (const auto& l : lists_) h.push_back(l.size());
    return h;
  }

  /// CSV `color,page_gva`.
  void dump(std::ostream& os) const {
    os << "color,page_gva\n";
    for (unsigned c = 0; c < lists_.size(); ++c)
      for (auto p : lists_[c]) os << c << ",0x" << std::hex << (p << kPageBits) << std::dec << '\n';
  }

 private:
  std::vector<std::deque<std::uint64_t>> lists_;
  std::map<std::uint64_t, unsigned> where_;
};

struct RefillReport {
  std::vector<std::size_t> per_color;
  std::uint64_t uncolored = 0;
  std::vector<std::uint64_t> uncolored_pages;
  ClassifyStats stats;
};

/// Allocates, classifies and files `budget` pages.
inline RefillReport refill_lists(ColoredFreeLists& lists, std::uint64_t budget, Prober& p,
                                 std::span<const ColorFilter> filters, GuestAllocator& alloc) {
  if (budget < 1) throw Error(Errc::invalid_argument, "refill budget must be >= 1");
  RefillReport rep;
  rep.per_color.assign(lists.colors(), 0);
  for (std::uint64_t i = 0; i < budget; ++i) {
    const std::uint64_t page = alloc.alloc();
    if (auto c = classify_page(p, page, filters, 2, &rep.stats)) {
      lists.push(*c, page);
      ++rep.per_color[*c];
    } else {
      ++rep.uncolored;
      rep.uncolored_pages.push_back(page);
    }
  }
  return rep;
}

struct ColoredPage {
  std::uint64_t gva_page = 0;
  unsigned color = 0;
};

/// Share of pages agreeing with the dominant virtual color of their
/// GPA-derived color group (GPA bits [15:12]).
inline double gpa_color_overlap(std::span<const ColoredPage> pages, const TranslationMap& map) {
  if (pages.empty()) return 1.0;
  std::map<unsigned, std::map<unsigned, std::size_t>> groups;
  for (const auto& pg : pages) {
    const std::uint64_t gpa_page = map.gpa_page_of_gva_page(pg.gva_page);
    ++groups[static_cast<unsigned>(bits(gpa_page, kL2ColorBits - 1, 0))][pg.color];
  }
  std::size_t agree = 0;
  for (const auto& [g, counts] : groups) {
    std::size_t best = 0;
    for (const auto& [c, n] : counts) best = std::max(best, n);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(pages.size());
}

}  // namespace cachex
