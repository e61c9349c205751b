#pragma once

// Windowed Prime+Probe over representative LLC sets: eviction-rate EWMAs,
// the adaptive wait window and per-domain / per-color aggregates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "cachex/common.hpp"
#include "cachex/evset.hpp"
#include "cachex/probe.hpp"
#include "cachex/tenant_sim.hpp"

namespace cachex {

struct MonitorConfig {
  double interval_ms = 1000.0;
  double window_ms = 7.0;
  double window_min_ms = 1.0;
  double window_max_ms = 7.0;
  double shrink_step_ms = 1.0;
  unsigned f = 4;
  double alpha = 0.3;
  /// Share of sets that must be fully evicted before the window shrinks.
  double full_threshold = 1.0;
  unsigned workers = 10;
  /// Chance per cycle that the probe is delayed by `preempt_ms`.
  double preempt_prob = 0.0;
  double preempt_ms = 0.0;

  void validate() const {
    if (!(window_min_ms > 0 && window_min_ms <= window_ms && window_ms <= window_max_ms))
      throw Error(Errc::invalid_argument, "window must satisfy 0 < min <= window <= max");
    if (!(alpha > 0 && alpha <= 1)) throw Error(Errc::invalid_argument, "ewma alpha must be in (0,1]");
    if (interval_ms <= 0 || shrink_step_ms <= 0) throw Error(Errc::invalid_argument, "interval and shrink step must be positive");
    if (workers < 1 || f < 1) throw Error(Errc::invalid_argument, "workers and f must be >= 1");
    if (full_threshold <= 0 || full_threshold > 1) throw Error(Errc::invalid_argument, "full threshold must be in (0,1]");
  }
};

struct MonitoredSet {
  EvictionSet set;
  unsigned color = 0;
  unsigned domain = 0;
  double ewma = 0.0;
  double raw = 0.0;
  unsigned evicted = 0;
  unsigned unknown = 0;
};

inline double ewma_update(double ewma, double raw, double alpha) {
  if (!(alpha > 0 && alpha <= 1)) throw Error(Errc::invalid_argument, "ewma alpha must be in (0,1]");
  return alpha * raw + (1.0 - alpha) * ewma;
}

/// Modal set size; ties go to the smaller size.
inline unsigned probe_associativity(std::span<const EvictionSet> sets) {
  if (sets.empty()) throw Error(Errc::no_sets, "no eviction sets built");
  std::map<std::size_t, unsigned> hist;
  for (const auto& e : sets) ++hist[e.size()];
  std::size_t best = 0;
  unsigned n = 0;
  for (const auto& [size, count] : hist)
    if (count > n) {
      n = count;
      best = size;
    }
  return static_cast<unsigned>(best);
}

/// One prober per LLC domain, indexed by domain.
using ProberSet = std::vector<Prober*>;

struct PhaseTiming {
  TimeNs start = 0;
  TimeNs end = 0;
  std::vector<TimeNs> per_worker;
};

namespace detail {

/// Runs `op(i)` for every set, each worker taking sets i = w, w+workers, ...
/// in the order of its logical clock; co-tenants advance before every op.
template <class Op>
PhaseTiming run_phase(std::size_t n_sets, unsigned workers, TimeNs start, TenantSim* tenants, Op op) {
  PhaseTiming pt;
  pt.start = start;
  std::vector<TimeNs> clock(workers, start);
  std::vector<std::size_t> next(workers);
  for (unsigned w = 0; w < workers; ++w) next[w] = w;
  for (;;) {
    int best = -1;
    for (unsigned w = 0; w < workers; ++w)
      if (next[w] < n_sets && (best < 0 || clock[w] < clock[static_cast<unsigned>(best)])) best = static_cast<int>(w);
    if (best < 0) break;
    const auto w = static_cast<unsigned>(best);
    if (tenants && tenants->now() < clock[w]) tenants->step(clock[w]);
    clock[w] = op(next[w], clock[w]);
    next[w] += workers;
  }
  pt.per_worker.resize(workers);
  for (unsigned w = 0; w < workers; ++w) pt.per_worker[w] = clock[w] - start;
  pt.end = *std::max_element(clock.begin(), clock.end());
  return pt;
}

}  // namespace detail

/// Loads every member of every set into its LLC. Returns the phase timing.
inline PhaseTiming prime(std::span<MonitoredSet> sets, ProberSet& probers, unsigned workers, TimeNs start,
                         TenantSim* tenants = nullptr) {
  if (sets.empty()) return PhaseTiming{start, start, std::vector<TimeNs>(workers, 0)};
  return detail::run_phase(sets.size(), workers, start, tenants, [&](std::size_t i, TimeNs t) {
    Prober& p = *probers.at(sets[i].domain);
    p.set_now(t);
    p.ensure_warm();
    p.pull_batch(sets[i].set.members);
    return p.now();
  });
}

/// Re-reads members newest-first so a reload can only displace lines the
/// probe has already visited. Fills `evicted`/`unknown` on each set.
inline PhaseTiming probe(std::span<MonitoredSet> sets, ProberSet& probers, unsigned workers, TimeNs start,
                         TenantSim* tenants = nullptr) {
  if (sets.empty()) return PhaseTiming{start, start, std::vector<TimeNs>(workers, 0)};
  return detail::run_phase(sets.size(), workers, start, tenants, [&](std::size_t i, TimeNs t) {
    Prober& p = *probers.at(sets[i].domain);
    p.set_now(t);
    p.ensure_warm();
    auto& s = sets[i];
    s.evicted = s.unknown = 0;
    for (auto it = s.set.members.rbegin(); it != s.set.members.rend(); ++it) {
      const Measured m = p.pull(*it);
      if (m == Measured::Memory)
        ++s.evicted;
      else if (m == Measured::L2OrFaster)
        ++s.unknown;
    }
    return p.now();
  });
}

struct CycleResult {
  TimeNs t0 = 0;
  double window_ms = 0;
  double prime_ms = 0;
  double probe_ms = 0;
  bool window_violated = false;
  bool preempted = false;
  double full_share = 0;  // share of sets with every member evicted
  bool any_eviction = false;
  double mean_evicted_pct = 0;
  std::vector<double> domain_agg;
  std::vector<double> color_agg;
};

struct WindowObservation {
  double full_share = 0;
  bool any_eviction = false;
};

/// Shrinks on full eviction across the sets, resets to the default when
/// nothing was evicted, otherwise keeps the window.
inline double adjust_window(const MonitorConfig& cfg, double window_ms, const WindowObservation& obs) {
  if (obs.full_share >= cfg.full_threshold) return std::max(cfg.window_min_ms, window_ms - cfg.shrink_step_ms);
  if (!obs.any_eviction) return cfg.window_ms;
  return window_ms;
}

class ContentionMonitor {
 public:
  ContentionMonitor(MonitorConfig cfg, std::vector<MonitoredSet> sets, unsigned n_domains, unsigned n_colors,
                    std::uint64_t seed = 0)
      : cfg_(cfg), sets_(std::move(sets)), n_domains_(n_domains), n_colors_(n_colors), window_(cfg.window_ms),
        rng_(make_rng(seed, 0x5ca9)) {
    cfg_.validate();
    for (const auto& s : sets_)
      if (s.domain >= n_domains_ || s.color >= n_colors_) throw Error(Errc::invalid_argument, "set outside domains/colors");
  }

  const MonitorConfig& config() const { return cfg_; }
  double window_ms() const { return window_; }
  void set_window_ms(double w) { window_ = w; }
  std::vector<MonitoredSet>& sets() { return sets_; }
  const std::vector<MonitoredSet>& sets() const { return sets_; }
  const std::vector<CycleResult>& history() const { return history_; }
  unsigned n_domains() const { return n_domains_; }
  unsigned n_colors() const { return n_colors_; }

  /// Mean member-set EWMA per domain (or per color); groups without sets
  /// report 0.
  std::vector<double> aggregate_by_domain() const { return aggregate([](const MonitoredSet& s) { return s.domain; }, n_domains_); }
  std::vector<double> aggregate_by_color() const { return aggregate([](const MonitoredSet& s) { return s.color; }, n_colors_); }

  /// Prime, wait, probe. Own-VM workloads stay paused throughout; co-tenants
  /// keep running. `t0` must not precede the tenants' clock.
  CycleResult cycle(ProberSet& probers, TenantSim* tenants, TimeNs t0, bool adapt = true) {
    CycleResult r;
    r.t0 = t0;
    r.window_ms = window_;
    if (tenants) {
      if (tenants->now() < t0) tenants->step(t0);
      tenants->set_paused(true);
    }
    const PhaseTiming pr = prime(sets_, probers, cfg_.workers, t0, tenants);
    r.prime_ms = ns_to_ms(pr.end - t0);
    const TimeNs window = ms_to_ns(window_);
    r.window_violated = pr.end - t0 > window;
    TimeNs probe_at = t0 + std::max(window, pr.end - t0);
    if (cfg_.preempt_prob > 0 && uniform01(rng_) < cfg_.preempt_prob) {
      r.preempted = true;
      probe_at += ms_to_ns(cfg_.preempt_ms);
    }
    if (tenants) tenants->step(probe_at);
    const PhaseTiming pb = probe(sets_, probers, cfg_.workers, probe_at, tenants);
    r.probe_ms = ns_to_ms(pb.end - probe_at);
    if (tenants) {
      tenants->step(pb.end);
      tenants->set_paused(false);
    }
    for (auto* p : probers)
      if (p) p->set_now(pb.end);

    std::size_t full = 0;
    double pct = 0;
    for (auto& s : sets_) {
      const unsigned denom = static_cast<unsigned>(s.set.size()) - s.unknown;
      const double frac = denom ? static_cast<double>(s.evicted) / denom : 0.0;
      s.raw = frac * 100.0 / window_;
      s.ewma = ewma_update(s.ewma, s.raw, cfg_.alpha);
      full += denom && s.evicted == denom;
      r.any_eviction = r.any_eviction || s.evicted > 0;
      pct += frac * 100.0;
    }
    r.full_share = sets_.empty() ? 0.0 : static_cast<double>(full) / static_cast<double>(sets_.size());
    r.mean_evicted_pct = sets_.empty() ? 0.0 : pct / static_cast<double>(sets_.size());
    r.domain_agg = aggregate_by_domain();
    r.color_agg = aggregate_by_color();
    if (adapt) window_ = adjust_window(cfg_, window_, WindowObservation{r.full_share, r.any_eviction});
    history_.push_back(r);
    return r;
  }

  /// CSV `t_ms,set_id,color,domain,raw_rate,ewma` for the latest cycle.
  void write_sets_csv(std::ostream& os, bool header) const {
    if (header) os << "t_ms,set_id,color,domain,raw_rate,ewma\n";
    const double t = history_.empty() ? 0.0 : ns_to_ms(history_.back().t0);
    for (std::size_t i = 0; i < sets_.size(); ++i)
      os << t << ',' << i << ',' << sets_[i].color << ',' << sets_[i].domain << ',' << sets_[i].raw << ','
         << sets_[i].ewma << '\n';
  }

  /// CSV `t_ms,kind,id,value` for the latest cycle's aggregates.
  void write_aggregates_csv(std::ostream& os, bool header) const {
    if (header) os << "t_ms,kind,id,value\n";
    if (history_.empty()) return;
    const auto& h = history_.back();
    const double t = ns_to_ms(h.t0);
    for (std::size_t d = 0; d < h.domain_agg.size(); ++d) os << t << ",domain," << d << ',' << h.domain_agg[d] << '\n';
    for (std::size_t c = 0; c < h.color_agg.size(); ++c) os << t << ",color," << c << ',' << h.color_agg[c] << '\n';
  }

 private:
  template <class Key>
  std::vector<double> aggregate(Key key, unsigned n) const {
    std::vector<double> sum(n, 0.0);
    std::vector<unsigned> cnt(n, 0);
    for (const auto& s : sets_) {
      sum[key(s)] += s.ewma;
      ++cnt[key(s)];
    }
    for (unsigned i = 0; i < n; ++i) sum[i] = cnt[i] ? sum[i] / cnt[i] : 0.0;
    return sum;
  }

  MonitorConfig cfg_;
  std::vector<MonitoredSet> sets_;
  unsigned n_domains_;
  unsigned n_colors_;
  double window_;
  Rng rng_;
  std::vector<CycleResult> history_;
};

}  // namespace cachex
