#pragma once

// Contention-aware task placement: domain tiers from eviction rates, idle
// vCPU selection, tier-restricted balancing and trend hysteresis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "cachex/common.hpp"

namespace cachex {

/// Sorts rates ascending and cuts at the largest gaps. A gap only separates
/// tiers when it is at least `min_gap` of the largest rate, so near-equal
/// rates share a tier. Tier 0 is the least contended.
inline std::vector<unsigned> tier_domains(std::span<const double> rates, unsigned n_tiers = 2, double min_gap = 0.2) {
  const std::size_t n = rates.size();
  std::vector<unsigned> tier(n, 0);
  if (n < 2 || n_tiers < 2) return tier;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return rates[a] < rates[b]; });
  const double top = std::max(std::abs(rates[idx.back()]), std::abs(rates[idx.front()]));
  if (top <= 0) return tier;

  std::vector<std::pair<double, std::size_t>> gaps;  // (gap, position after which to cut)
  for (std::size_t k = 1; k < n; ++k) {
    const double gap = rates[idx[k]] - rates[idx[k - 1]];
    if (gap > 0 && gap >= min_gap * top) gaps.emplace_back(gap, k);
  }
  std::stable_sort(gaps.begin(), gaps.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (gaps.size() > n_tiers - 1) gaps.resize(n_tiers - 1);
  std::vector<std::size_t> cuts;
  for (const auto& g : gaps) cuts.push_back(g.second);
  std::sort(cuts.begin(), cuts.end());

  unsigned t = 0;
  std::size_t c = 0;
  for (std::size_t k = 0; k < n; ++k) {
    while (c < cuts.size() && cuts[c] == k) {
      ++t;
      ++c;
    }
    tier[idx[k]] = t;
  }
  return tier;
}

/// Last three trends agree on a nonzero sign.
inline bool update_tier_hysteresis(std::span<const int> trends) {
  if (trends.size() < 3) return false;
  const int s = trends[trends.size() - 1];
  return s != 0 && trends[trends.size() - 2] == s && trends[trends.size() - 3] == s;
}

struct CpuTopology {
  std::vector<unsigned> domain_of;  // per vCPU
  unsigned n_domains() const {
    unsigned n = 0;
    for (auto d : domain_of) n = std::max(n, d + 1);
    return n;
  }
};

/// Idle vCPU in the best tier that has one; inside it the previous vCPU, then
/// the previous domain, then the lowest id. No idle vCPU: stay on `prev`.
inline unsigned select_cpu(unsigned prev, std::span<const unsigned> domain_tier, const CpuTopology& topo,
                           std::span<const bool> idle) {
  const std::size_t n = topo.domain_of.size();
  int best_tier = -1;
  for (std::size_t v = 0; v < n; ++v)
    if (idle[v]) {
      const int t = static_cast<int>(domain_tier[topo.domain_of[v]]);
      if (best_tier < 0 || t < best_tier) best_tier = t;
    }
  if (best_tier < 0) return prev;
  auto eligible = [&](std::size_t v) { return idle[v] && static_cast<int>(domain_tier[topo.domain_of[v]]) == best_tier; };
  if (prev < n && eligible(prev)) return prev;
  const unsigned prev_dom = prev < n ? topo.domain_of[prev] : ~0u;
  for (std::size_t v = 0; v < n; ++v)
    if (eligible(v) && topo.domain_of[v] == prev_dom) return static_cast<unsigned>(v);
  for (std::size_t v = 0; v < n; ++v)
    if (eligible(v)) return static_cast<unsigned>(v);
  return prev;
}

/// Contention-blind stand-in: previous vCPU if idle, else the next idle vCPU
/// after it in id order.
inline unsigned select_cpu_baseline(unsigned prev, std::span<const bool> idle) {
  const std::size_t n = idle.size();
  if (prev < n && idle[prev]) return prev;
  for (std::size_t k = 1; k <= n; ++k) {
    const std::size_t v = (prev + k) % n;
    if (idle[v]) return static_cast<unsigned>(v);
  }
  return prev;
}

struct DomainLoad {
  unsigned tier = 0;
  double utilization = 0;  // [0,1]
};

struct Migration {
  unsigned from = 0;
  unsigned to = 0;
};

/// Pulls load from the busiest to the idlest domain when the imbalance
/// exceeds `imbalance`, except from a better tier into a worse one unless the
/// source is saturated.
inline std::vector<Migration> balance(std::span<const DomainLoad> domains, double saturation = 0.9,
                                      double imbalance = 0.25) {
  std::vector<Migration> out;
  const std::size_t n = domains.size();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t d = 0; d < n; ++d) {
      if (s == d || domains[s].utilization - domains[d].utilization <= imbalance) continue;
      if (domains[d].tier > domains[s].tier && domains[s].utilization < saturation) continue;
      out.push_back({static_cast<unsigned>(s), static_cast<unsigned>(d)});
    }
  return out;
}

/// Per-domain tiers fed by per-interval rates. A domain moves only when its
/// last three rate trends point the way of the move.
class TierTracker {
 public:
  explicit TierTracker(unsigned n_domains, unsigned n_tiers = 2, double deadband = 0.05)
      : n_tiers_(n_tiers), deadband_(deadband), tiers_(n_domains, 0), last_(n_domains, 0.0), trends_(n_domains) {}

  const std::vector<unsigned>& tiers() const { return tiers_; }
  std::uint64_t changes() const { return changes_; }
  const std::deque<int>& trends(unsigned d) const { return trends_.at(d); }

  /// Returns true if any tier moved.
  bool update(std::span<const double> rates) {
    if (rates.size() != tiers_.size()) throw Error(Errc::invalid_argument, "rate count != domain count");
    for (std::size_t d = 0; d < rates.size(); ++d) {
      const double delta = rates[d] - last_[d];
      const double band = deadband_ * std::max({std::abs(rates[d]), std::abs(last_[d]), 1e-12});
      const int trend = std::abs(delta) <= band ? 0 : (delta > 0 ? 1 : -1);
      trends_[d].push_back(trend);
      if (trends_[d].size() > 3) trends_[d].pop_front();
      last_[d] = rates[d];
    }
    const auto want = tier_domains(rates, n_tiers_);
    bool moved = false;
    for (std::size_t d = 0; d < rates.size(); ++d) {
      if (want[d] == tiers_[d]) continue;
      const int dir = want[d] > tiers_[d] ? 1 : -1;
      const std::vector<int> tr(trends_[d].begin(), trends_[d].end());
      if (update_tier_hysteresis(tr) && tr.back() == dir) {
        tiers_[d] = want[d];
        ++changes_;
        moved = true;
      }
    }
    return moved;
  }

 private:
  unsigned n_tiers_;
  double deadband_;
  std::vector<unsigned> tiers_;
  std::vector<double> last_;
  std::vector<std::deque<int>> trends_;
  std::uint64_t changes_ = 0;
};

enum class Sensitivity : std::uint8_t { sensitive, insensitive };

struct SimTask {
  unsigned id = 0;
  unsigned prev_vcpu = 0;
  Sensitivity sensitivity = Sensitivity::sensitive;
  /// Ticks spent per domain, one row per interval.
  std::vector<std::vector<std::uint64_t>> residency;
};

struct TickConfig {
  double tick_ms = 4.0;
  double busy_prob = 0.3;  // background occupancy per vCPU per tick
};

/// Runs one scheduling interval: each tick draws background occupancy, then
/// places every task (in id order) on an idle vCPU. `domain_tier` empty
/// selects the contention-blind baseline; insensitive tasks always use it.
inline void run_interval(std::vector<SimTask>& tasks, const CpuTopology& topo, std::span<const unsigned> domain_tier,
                         double interval_ms, const TickConfig& tc, Rng& rng) {
  const std::size_t n = topo.domain_of.size();
  const auto ticks = static_cast<std::uint64_t>(std::llround(interval_ms / tc.tick_ms));
  for (auto& t : tasks) t.residency.emplace_back(topo.n_domains(), 0);
  auto idle = std::make_unique<bool[]>(n);
  const std::span<const bool> view(idle.get(), n);
  for (std::uint64_t k = 0; k < ticks; ++k) {
    for (std::size_t v = 0; v < n; ++v) idle[v] = uniform01(rng) >= tc.busy_prob;
    for (auto& t : tasks) {
      const bool blind = domain_tier.empty() || t.sensitivity == Sensitivity::insensitive;
      const unsigned v = blind ? select_cpu_baseline(t.prev_vcpu, view) : select_cpu(t.prev_vcpu, domain_tier, topo, view);
      if (v < n) idle[v] = false;
      t.prev_vcpu = v;
      ++t.residency.back()[topo.domain_of[v]];
    }
  }
}

/// Share of all ticks a task spent in `domain`.
inline double residency_share(const SimTask& t, unsigned domain) {
  std::uint64_t in = 0, all = 0;
  for (const auto& row : t.residency) {
    for (auto x : row) all += x;
    in += row.at(domain);
  }
  return all ? static_cast<double>(in) / static_cast<double>(all) : 0.0;
}

}  // namespace cachex
