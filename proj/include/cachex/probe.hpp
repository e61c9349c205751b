#pragma once

// The guest-side measurement primitive: a constructor vCPU (and optionally a
// helper sharing its LLC) timing accesses to guest virtual addresses on the
// logical clock.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cachex/cache_model.hpp"
#include "cachex/common.hpp"
#include "cachex/mem_model.hpp"
#include "cachex/tenant_sim.hpp"
#include "cachex/timing.hpp"

namespace cachex {

struct ProbeConfig {
  unsigned rounds = 2;   // batch repetitions per eviction test
  unsigned votes = 1;    // independent trials per test, majority decides
  unsigned retries = 3;  // prune attempts per target
  unsigned confirm = 1;  // consecutive positive tests before a set counts as complete
  double mlp = 8.0;      // overlapping misses in a batch
  bool warm_timer = true;
};

struct ProbeCounters {
  std::uint64_t tests = 0;
  std::uint64_t accesses = 0;
};

class Prober {
 public:
  Prober(CacheState& cache, const TranslationMap& map, ActorId builder, std::optional<ActorId> helper,
         LatencyModel lat, ProbeConfig cfg, std::uint64_t seed)
      : cache_(&cache), map_(&map), builder_(builder), helper_(helper), lat_(lat), cfg_(cfg),
        rng_(make_rng(seed, 0x9b0be)) {
    lat_.validate();
    if (cfg_.rounds == 0 || cfg_.votes == 0 || cfg_.confirm == 0)
      throw Error(Errc::invalid_argument, "rounds, votes and confirm must be >= 1");
    if (cfg_.mlp < 1) throw Error(Errc::invalid_argument, "mlp must be >= 1");
    if (helper_ && cache.domain_of(*helper_) != cache.domain_of(builder_)) cross_domain_ = true;
  }

  CacheState& cache() { return *cache_; }
  const CacheState& cache() const { return *cache_; }
  const CacheGeometry& geometry() const { return cache_->geometry(); }
  const TranslationMap& map() const { return *map_; }
  void set_map(const TranslationMap& m) { map_ = &m; }
  ActorId builder() const { return builder_; }
  std::optional<ActorId> helper() const { return helper_; }
  const ProbeConfig& config() const { return cfg_; }
  ProbeConfig& config() { return cfg_; }
  const LatencyModel& latency() const { return lat_; }
  ProbeCounters counters() const { return counters_; }

  TimeNs now() const { return now_; }
  void set_now(TimeNs t) { now_ = t; }

  Rng& rng() { return rng_; }
  void reseed(std::uint64_t seed) { rng_ = make_rng(seed, 0x9b0be); }
  TimerState& timer() { return timer_; }
  void reset_timer() { timer_ = {}; }

  /// Lets co-tenants catch up before each batch.
  void set_sync(std::function<void(TimeNs)> f) { sync_ = std::move(f); }

  const Thresholds& thresholds() const { return th_; }
  void set_thresholds(Thresholds th) { th_ = th; }

  Thresholds calibrate(std::uint64_t scratch_gva, unsigned samples = 1000) {
    th_ = calibrate_thresholds(*cache_, builder_, timer_, lat_, rng_, now_, samples, hpa(scratch_gva));
    return th_;
  }

  std::uint64_t hpa(std::uint64_t gva) const { return map_->gva_to_hpa(gva); }

  void ensure_warm() {
    if (cfg_.warm_timer) warm_timer(timer_, lat_, now_);
  }

  /// Constructor access through its private caches.
  Measured touch(std::uint64_t gva) {
    const AccessResult r = cache_->access(hpa(gva), builder_);
    return observe(r.level);
  }

  void touch_batch(std::span<const std::uint64_t> gvas) {
    double cycles = 0;
    for (auto g : gvas) cycles += lat_.base(cache_->access(hpa(g), builder_).level);
    counters_.accesses += gvas.size();
    now_ += lat_.cycles_to_ns(cycles / cfg_.mlp);
  }

  /// Helper-assisted access that lands the line in the shared LLC and reports
  /// whether it was found there.
  Measured pull(std::uint64_t gva) {
    require_pair();
    const PullResult r = cache_->llc_pull(hpa(gva), builder_);
    return observe(r.level);
  }

  void pull_batch(std::span<const std::uint64_t> gvas) {
    require_pair();
    double cycles = 0;
    for (auto g : gvas) cycles += lat_.base(cache_->llc_pull(hpa(g), builder_).level);
    counters_.accesses += gvas.size();
    now_ += lat_.cycles_to_ns(cycles / cfg_.mlp);
  }

  /// Load target, sweep the candidates as a batch `rounds` times, reload
  /// target. Evicted means the reload was slower than where the load left it.
  bool test_eviction(Level level, std::span<const std::uint64_t> candidates, std::uint64_t target) {
    ++counters_.tests;
    if (sync_) sync_(now_);
    ensure_warm();
    unsigned yes = 0;
    for (unsigned v = 0; v < cfg_.votes; ++v) {
      bool evicted;
      if (level == Level::L2) {
        touch(target);
        for (unsigned r = 0; r < cfg_.rounds; ++r) touch_batch(candidates);
        evicted = touch(target) != Measured::L2OrFaster;
      } else {
        pull(target);
        for (unsigned r = 0; r < cfg_.rounds; ++r) pull_batch(candidates);
        evicted = pull(target) == Measured::Memory;
      }
      yes += evicted;
      if (2 * yes > cfg_.votes || 2 * (v + 1 - yes) >= cfg_.votes + 1) break;
    }
    return 2 * yes > cfg_.votes;
  }

  bool test_eviction(Level level, std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                     std::uint64_t target) {
    std::vector<std::uint64_t> all(a.begin(), a.end());
    all.insert(all.end(), b.begin(), b.end());
    return test_eviction(level, all, target);
  }

 private:
  void require_pair() const {
    if (!helper_) throw Error(Errc::invalid_argument, "LLC probing needs a helper vCPU");
    if (cross_domain_) throw Error(Errc::invalid_argument, "helper vCPU does not share the constructor's LLC");
  }

  Measured observe(HitLevel h) {
    const double lat = sample_latency(h, lat_, timer_, rng_, now_);
    ++counters_.accesses;
    now_ += lat_.cycles_to_ns(lat);
    return classify_level(lat, th_);
  }

  CacheState* cache_;
  const TranslationMap* map_;
  ActorId builder_;
  std::optional<ActorId> helper_;
  bool cross_domain_ = false;
  LatencyModel lat_;
  ProbeConfig cfg_;
  Rng rng_;
  TimerState timer_;
  Thresholds th_;
  TimeNs now_ = 0;
  std::function<void(TimeNs)> sync_;
  ProbeCounters counters_;
};

}  // namespace cachex
