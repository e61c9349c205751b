#pragma once

// Co-tenant traffic on the logical clock, the shared-pull primitive, and
// vCPU topology inference from transfer latencies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <tuple>
#include <vector>

#include "cachex/cache_model.hpp"
#include "cachex/common.hpp"
#include "cachex/mem_model.hpp"

namespace cachex {

enum class WorkloadKind : std::uint8_t { polluter, poisoner, idle, file_scan, reuse_loop, noise };

inline const char* to_string(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::polluter: return "polluter";
    case WorkloadKind::poisoner: return "poisoner";
    case WorkloadKind::idle: return "idle";
    case WorkloadKind::file_scan: return "file_scan";
    case WorkloadKind::reuse_loop: return "reuse_loop";
    case WorkloadKind::noise: return "noise";
  }
  return "?";
}

inline std::optional<WorkloadKind> parse_workload_kind(const std::string& s) {
  for (auto k : {WorkloadKind::polluter, WorkloadKind::poisoner, WorkloadKind::idle, WorkloadKind::file_scan,
                 WorkloadKind::reuse_loop, WorkloadKind::noise})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

/// HPA base of the private region for tenant `idx`, above any guest backing.
constexpr std::uint64_t tenant_region_base(unsigned idx) { return (1ull << 34) + std::uint64_t(idx) * (1ull << 30); }

struct TenantWorkload {
  std::string name;
  WorkloadKind kind = WorkloadKind::idle;
  ActorId actor = 0;
  /// LLC colors (HPA bits [16:12]) a poisoner is confined to.
  std::vector<unsigned> colors;
  std::uint64_t region_base = 0;
  std::uint64_t region_size = 0;
  std::uint64_t stride = kLineSize;
  double rate = 0.0;  // accesses per ms
  TimeNs start = 0;
  TimeNs stop = std::numeric_limits<TimeNs>::max();
  /// Part of the monitoring VM; paused during monitor cycles.
  bool own_vm = false;
  /// Explicit address list for reuse loops.
  std::vector<std::uint64_t> addresses;
  /// Called per access for file scans.
  std::function<void(TimeNs)> hook;
};

struct TenantAccess {
  TimeNs t = 0;
  ActorId actor = 0;
  std::uint64_t hpa = 0;
  HitLevel level = HitLevel::Memory;
};

/// Count of accesses issued within `elapsed` ns at `rate` per ms.
inline std::uint64_t accesses_by(double rate, TimeNs elapsed) {
  if (rate <= 0 || elapsed <= 0) return 0;
  const long double x = static_cast<long double>(rate) * static_cast<long double>(elapsed) / 1e6L;
  return static_cast<std::uint64_t>(std::floor(x + 1e-9L));
}

/// Background-noise rate giving `per_set` LLC fills per set every `window_ms`.
inline double noise_rate(const CacheGeometry& g, double per_set, double window_ms) {
  return per_set * static_cast<double>(g.llc_sets) * g.n_slices / window_ms;
}

class TenantSim {
 public:
  TenantSim(CacheState& cache, std::uint64_t seed) : cache_(&cache), seed_(seed) {}

  std::size_t add(TenantWorkload w) {
    if (w.rate < 0) throw Error(Errc::invalid_argument, "tenant rate must be >= 0");
    if (w.stop < w.start) throw Error(Errc::invalid_argument, "tenant stop precedes start");
    if (!cache_->registered(w.actor)) throw Error(Errc::unregistered_actor, "tenant " + w.name);
    State st;
    st.rng = make_rng(seed_, 0x7e4a47, workloads_.size());
    if (w.kind == WorkloadKind::poisoner) {
      if (w.colors.empty()) throw Error(Errc::invalid_argument, "poisoner needs target colors");
      const std::uint64_t pages = std::max<std::uint64_t>(1, w.region_size / kPageSize);
      for (std::uint64_t p = 0; p < pages; ++p) {
        const std::uint64_t hpa = w.region_base + p * kPageSize;
        if (std::find(w.colors.begin(), w.colors.end(), llc_color_of_hpa(hpa)) != w.colors.end())
          st.pages.push_back(hpa);
      }
      if (st.pages.empty()) throw Error(Errc::invalid_argument, "poisoner region holds no target-color page");
    }
    if ((w.kind == WorkloadKind::polluter || w.kind == WorkloadKind::noise) && w.region_size < kLineSize)
      throw Error(Errc::invalid_argument, "tenant " + w.name + " needs a region");
    if (w.kind == WorkloadKind::reuse_loop && w.addresses.empty())
      throw Error(Errc::invalid_argument, "reuse loop needs addresses");
    if (w.stride == 0 || w.stride % kLineSize) throw Error(Errc::invalid_argument, "stride must be a line multiple");
    workloads_.push_back(std::move(w));
    states_.push_back(std::move(st));
    return workloads_.size() - 1;
  }

  TimeNs now() const { return now_; }
  std::size_t size() const { return workloads_.size(); }
  TenantWorkload& workload(std::size_t i) { return workloads_.at(i); }

  /// Own-VM workloads drop their accesses while paused.
  void set_paused(bool p) { paused_ = p; }
  bool paused() const { return paused_; }

  void set_logging(bool on) { logging_ = on; }
  const std::vector<TenantAccess>& log() const { return log_; }
  void clear_log() { log_.clear(); }

  std::uint64_t issued(std::size_t i) const { return states_.at(i).done; }

  /// Applies every access in [now, until] in (time, actor, sequence) order.
  void step(TimeNs until) {
    if (until < now_) throw Error(Errc::invalid_argument, "clock cannot run backwards");
    using Item = std::tuple<TimeNs, ActorId, std::uint64_t, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> q;
    auto push_next = [&](std::size_t i) {
      const auto& w = workloads_[i];
      auto& st = states_[i];
      if (w.kind == WorkloadKind::idle || w.rate <= 0) return;
      const TimeNs end = std::min(until, w.stop);
      if (end < w.start) return;
      if (st.done >= accesses_by(w.rate, end - w.start)) return;
      const TimeNs t = w.start + static_cast<TimeNs>(std::ceil((static_cast<long double>(st.done) + 1) * 1e6L / w.rate - 1e-9L));
      q.emplace(std::max(t, now_), w.actor, st.done, i);
    };
    for (std::size_t i = 0; i < workloads_.size(); ++i) push_next(i);
    while (!q.empty()) {
      auto [t, actor, seq, i] = q.top();
      q.pop();
      now_ = t;
      fire(i, t);
      ++states_[i].done;
      push_next(i);
    }
    now_ = until;
  }

  /// Moves the clock without issuing accesses; skipped work is forfeited.
  void fast_forward(TimeNs until) {
    if (until < now_) throw Error(Errc::invalid_argument, "clock cannot run backwards");
    for (std::size_t i = 0; i < workloads_.size(); ++i) {
      const auto& w = workloads_[i];
      const TimeNs end = std::min(until, w.stop);
      if (end > w.start) states_[i].done = std::max(states_[i].done, accesses_by(w.rate, end - w.start));
    }
    now_ = until;
  }

 private:
  struct State {
    std::uint64_t done = 0;
    std::uint64_t cursor = 0;
    std::vector<std::uint64_t> pages;
    Rng rng;
  };

  void fire(std::size_t i, TimeNs t) {
    auto& w = workloads_[i];
    auto& st = states_[i];
    if (paused_ && w.own_vm) return;
    std::uint64_t hpa = 0;
    HitLevel level = HitLevel::Memory;
    switch (w.kind) {
      case WorkloadKind::idle: return;
      case WorkloadKind::polluter: {
        hpa = w.region_base + (st.cursor * w.stride) % w.region_size;
        ++st.cursor;
        level = cache_->access(hpa, w.actor).level;
        break;
      }
      case WorkloadKind::poisoner: {
        const std::uint64_t lines = st.pages.size() * kLinesPerPage;
        const std::uint64_t k = st.cursor++ % lines;
        hpa = st.pages[k / kLinesPerPage] + (k % kLinesPerPage) * kLineSize;
        level = cache_->access(hpa, w.actor).level;
        break;
      }
      case WorkloadKind::reuse_loop: {
        hpa = w.addresses[st.cursor++ % w.addresses.size()];
        level = cache_->access(hpa, w.actor).level;
        break;
      }
      case WorkloadKind::noise: {
        hpa = w.region_base + uniform_below(st.rng, w.region_size / kLineSize) * kLineSize;
        level = cache_->llc_pull(hpa, w.actor).level;
        break;
      }
      case WorkloadKind::file_scan: {
        if (w.hook) w.hook(t);
        if (logging_) log_.push_back({t, w.actor, 0, HitLevel::Memory});
        return;
      }
    }
    if (logging_) log_.push_back({t, w.actor, hpa, level});
  }

  CacheState* cache_;
  std::uint64_t seed_;
  TimeNs now_ = 0;
  bool paused_ = false;
  bool logging_ = false;
  std::vector<TenantWorkload> workloads_;
  std::vector<State> states_;
  std::vector<TenantAccess> log_;
};

/// A helper core touching a line the owner also uses forces it into the LLC
/// the two share. Returns false, leaving the cache untouched, when they do not
/// share one.
inline bool shared_pull(CacheState& cache, std::uint64_t hpa, ActorId helper, ActorId owner) {
  if (helper == owner) throw Error(Errc::invalid_argument, "helper and owner must differ");
  if (cache.core_of(helper) == cache.core_of(owner))
    throw Error(Errc::invalid_argument, "helper and owner share a core");
  if (cache.domain_of(helper) != cache.domain_of(owner)) return false;
  cache.llc_pull(hpa, owner);
  return true;
}

struct VTopology {
  std::vector<unsigned> domain_of;  // per vCPU
  bool visible = true;

  unsigned n_domains() const {
    unsigned n = 0;
    for (auto d : domain_of) n = std::max(n, d + 1);
    return n;
  }
  std::vector<unsigned> members(unsigned d) const {
    std::vector<unsigned> v;
    for (unsigned i = 0; i < domain_of.size(); ++i)
      if (domain_of[i] == d) v.push_back(i);
    return v;
  }
};

using LatencyMatrix = std::vector<std::vector<double>>;

/// Splits off-diagonal transfer latencies at their widest gap and returns the
/// connected components below that threshold, numbered by first vCPU.
inline VTopology infer_topology(const LatencyMatrix& m) {
  const std::size_t n = m.size();
  if (n == 0) throw Error(Errc::invalid_argument, "empty latency matrix");
  for (const auto& row : m)
    if (row.size() != n) throw Error(Errc::invalid_argument, "latency matrix is not square");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m[i][j] - m[j][i]) > 1e-9 * std::max(1.0, std::abs(m[i][j])))
        throw Error(Errc::invalid_argument, "latency matrix is not symmetric");

  VTopology topo;
  topo.domain_of.assign(n, 0);
  if (n == 1) return topo;

  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) v.push_back(m[i][j]);
  std::sort(v.begin(), v.end());
  const double range = v.back() - v.front();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (range < 0.05 * std::abs(mean)) return topo;

  double gap = 0, cut = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] - v[k - 1] > gap) {
      gap = v[k] - v[k - 1];
      cut = (v[k] + v[k - 1]) / 2;
    }
  if (gap < 0.4 * range) throw Error(Errc::inference_ambiguous, "no clear gap between intra- and cross-domain latencies");

  // Single-link components under the cut.
  std::vector<unsigned> parent(n);
  std::iota(parent.begin(), parent.end(), 0u);
  std::function<unsigned(unsigned)> find = [&](unsigned x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (m[i][j] < cut) parent[find(static_cast<unsigned>(i))] = find(static_cast<unsigned>(j));
  std::vector<int> label(n, -1);
  unsigned next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned r = find(static_cast<unsigned>(i));
    if (label[r] < 0) label[r] = static_cast<int>(next++);
    topo.domain_of[i] = static_cast<unsigned>(label[r]);
  }
  return topo;
}

/// Symmetric transfer-latency matrix for a known partition.
inline LatencyMatrix generate_latency_matrix(const VTopology& truth, double intra, double cross, double sigma,
                                             Rng& rng) {
  const std::size_t n = truth.domain_of.size();
  LatencyMatrix m(n, std::vector<double>(n, 0.0));
  std::normal_distribution<double> noise(0.0, sigma > 0 ? sigma : 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double x = truth.domain_of[i] == truth.domain_of[j] ? intra : cross;
      if (sigma > 0) x += noise(rng);
      m[i][j] = m[j][i] = x;
    }
  return m;
}

/// Constructor/helper vCPU pairs within each domain.
inline std::vector<std::pair<unsigned, unsigned>> pair_threads(const VTopology& topo) {
  std::vector<std::pair<unsigned, unsigned>> pairs;
  for (unsigned d = 0; d < topo.n_domains(); ++d) {
    const auto m = topo.members(d);
    for (std::size_t k = 0; k + 1 < m.size(); k += 2) pairs.emplace_back(m[k], m[k + 1]);
  }
  return pairs;
}

}  // namespace cachex
