#pragma once

// Color-aware page-cache allocation: hottest color first, next color on
// exhaustion, and a reclaim when the allocation color falls out of the top
// tier for three intervals in a row.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "cachex/common.hpp"
#include "cachex/policy_cas.hpp"
#include "cachex/vcol.hpp"

namespace cachex {

struct ColorRanking {
  std::vector<unsigned> order;  // hottest first
  std::vector<unsigned> tier;   // per color, 0 = hottest
};

/// Descending by rate, color id breaks ties. Tiers reuse the domain tiering
/// with the scale flipped so tier 0 holds the hottest colors.
inline ColorRanking rank_colors(std::span<const double> rates, unsigned n_tiers = 2) {
  ColorRanking r;
  r.order.resize(rates.size());
  std::iota(r.order.begin(), r.order.end(), 0u);
  std::stable_sort(r.order.begin(), r.order.end(), [&](unsigned a, unsigned b) { return rates[a] > rates[b]; });
  const auto cold = tier_domains(rates, n_tiers);
  unsigned top = 0;
  for (auto t : cold) top = std::max(top, t);
  r.tier.resize(rates.size());
  for (std::size_t c = 0; c < rates.size(); ++c) r.tier[c] = top - cold[c];
  return r;
}

/// Fixed order 0..n-1, all one tier.
inline ColorRanking identity_ranking(unsigned n) {
  ColorRanking r;
  r.order.resize(n);
  std::iota(r.order.begin(), r.order.end(), 0u);
  r.tier.assign(n, 0);
  return r;
}

/// Tracks whether the color being allocated from has been demoted below the
/// current hottest color for three consecutive intervals.
class RecolorTracker {
 public:
  std::optional<unsigned> anchor() const { return anchor_; }
  unsigned streak() const { return streak_; }
  const std::deque<bool>& history() const { return history_; }

  void set_anchor(unsigned c) {
    anchor_ = c;
    streak_ = 0;
  }

  /// Feeds one interval's ranking; true means reclaim now.
  bool maybe_recolor(const ColorRanking& r) {
    if (r.order.empty()) return false;
    const unsigned hottest = r.order.front();
    if (!anchor_) {
      anchor_ = hottest;
      return false;
    }
    const bool demoted = r.tier.at(*anchor_) > r.tier.at(hottest);
    history_.push_back(demoted);
    if (history_.size() > 3) history_.pop_front();
    streak_ = demoted ? streak_ + 1 : 0;
    if (streak_ >= 3) {
      anchor_ = hottest;
      streak_ = 0;
      history_.clear();
      return true;
    }
    return false;
  }

 private:
  std::optional<unsigned> anchor_;
  unsigned streak_ = 0;
  std::deque<bool> history_;
};

enum class CapMode : std::uint8_t { ranked, unranked, uncolored };

inline const char* to_string(CapMode m) {
  switch (m) {
    case CapMode::ranked: return "cap";
    case CapMode::unranked: return "cap-unranked";
    case CapMode::uncolored: return "uncolored";
  }
  return "?";
}

struct CachedPage {
  std::uint64_t gva_page = 0;
  std::optional<unsigned> color;  // empty for uncolored fallback pages
};

struct FileCounters {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
};

/// File pages held in guest memory, bounded by a page budget with FIFO
/// replacement. Pages go back to the list they came from.
class PageCache {
 public:
  /// Touches one page's lines through the cache model.
  using PageReader = std::function<void(std::uint64_t gva_page, ActorId actor)>;

  PageCache(std::size_t budget, CapMode mode, ColoredFreeLists& lists, GuestAllocator& alloc)
      : budget_(budget), mode_(mode), lists_(&lists), alloc_(&alloc), ranking_(identity_ranking(lists.colors())) {
    if (budget == 0) throw Error(Errc::invalid_argument, "page cache budget must be >= 1");
  }

  CapMode mode() const { return mode_; }
  std::size_t size() const { return pages_.size(); }
  std::size_t budget() const { return budget_; }
  std::uint64_t uncolored_allocs() const { return uncolored_; }
  std::uint64_t reclaims() const { return reclaims_; }
  const ColorRanking& ranking() const { return ranking_; }
  FileCounters counters(ActorId a) const {
    auto it = counters_.find(a);
    return it == counters_.end() ? FileCounters{} : it->second;
  }
  /// Color allocations currently draw from, if any.
  std::optional<unsigned> current_color() const {
    if (mode_ == CapMode::uncolored || ranking_.order.empty()) return std::nullopt;
    return cur_ ? cur_ : std::optional<unsigned>(ranking_.order.front());
  }
  const std::map<std::uint64_t, CachedPage>& pages() const { return pages_; }

  /// Installs a new ranking. Allocation keeps its current color unless
  /// `restart` sends it back to the hottest (initially and after a reclaim).
  void set_ranking(ColorRanking r, bool restart) {
    if (mode_ == CapMode::unranked) return;
    ranking_ = std::move(r);
    if (restart) cur_.reset();
  }

  CachedPage alloc_page_cache() {
    if (mode_ != CapMode::uncolored && !ranking_.order.empty()) {
      const std::size_t n = ranking_.order.size();
      std::size_t pos = 0;
      if (cur_) pos = static_cast<std::size_t>(std::find(ranking_.order.begin(), ranking_.order.end(), *cur_) - ranking_.order.begin()) % n;
      for (std::size_t k = 0; k < n; ++k) {
        const unsigned c = ranking_.order[(pos + k) % n];
        if (!lists_->empty(c)) {
          cur_ = c;
          return CachedPage{lists_->pop(c), c};
        }
      }
    }
    ++uncolored_;
    return CachedPage{alloc_->alloc(), std::nullopt};
  }

  /// Hit or miss on the page holding `offset`; either way the page's lines
  /// are read.
  bool access_file(ActorId actor, std::uint64_t offset, const PageReader& read) {
    const std::uint64_t key = offset / kPageSize;
    auto it = pages_.find(key);
    bool hit = it != pages_.end();
    if (hit) {
      ++counters_[actor].hits;
    } else {
      ++counters_[actor].misses;
      if (pages_.size() >= budget_) evict_oldest();
      it = pages_.emplace(key, alloc_page_cache()).first;
      fifo_.push_back(key);
    }
    if (read) read(it->second.gva_page, actor);
    return hit;
  }

  /// Drops every cached page back to its origin.
  void reclaim() {
    while (!fifo_.empty()) evict_oldest();
    ++reclaims_;
  }

 private:
  void evict_oldest() {
    const std::uint64_t key = fifo_.front();
    fifo_.pop_front();
    auto it = pages_.find(key);
    if (it->second.color)
      lists_->push(*it->second.color, it->second.gva_page);
    else
      alloc_->release(it->second.gva_page);
    pages_.erase(it);
  }

  std::size_t budget_;
  CapMode mode_;
  ColoredFreeLists* lists_;
  GuestAllocator* alloc_;
  ColorRanking ranking_;
  std::optional<unsigned> cur_;
  std::map<std::uint64_t, CachedPage> pages_;
  std::deque<std::uint64_t> fifo_;
  std::map<ActorId, FileCounters> counters_;
  std::uint64_t uncolored_ = 0;
  std::uint64_t reclaims_ = 0;
};

}  // namespace cachex
