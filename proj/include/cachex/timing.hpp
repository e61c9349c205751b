#pragma once

// Noisy latency readings over cache outcomes, the cold-timer spike model and
// threshold classification back into levels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cachex/cache_model.hpp"
#include "cachex/common.hpp"

namespace cachex {

struct LatencyModel {
  double l2 = 14.0;
  double llc = 50.0;
  double mem = 200.0;
  double jitter = 3.0;
  double spike_prob_cold = 0.02;
  double spike = 2000.0;
  unsigned warm_reads = 64;
  TimeNs warm_horizon = ms_to_ns(50);
  double ghz = 2.0;

  void validate() const {
    if (!(l2 < llc && llc < mem)) throw Error(Errc::invalid_argument, "latency bases must increase with depth");
    if (jitter < 0) throw Error(Errc::invalid_argument, "jitter must be >= 0");
    if (spike_prob_cold < 0 || spike_prob_cold > 1) throw Error(Errc::invalid_argument, "spike probability outside [0,1]");
    if (ghz <= 0) throw Error(Errc::invalid_argument, "clock rate must be positive");
  }

  double base(HitLevel h) const {
    switch (h) {
      case HitLevel::L2: return l2;
      case HitLevel::LLC: return llc;
      case HitLevel::Memory: return mem;
    }
    return mem;
  }

  TimeNs cycles_to_ns(double cycles) const { return static_cast<TimeNs>(std::llround(cycles / ghz)); }
};

struct TimerState {
  bool warm = false;
  std::uint64_t reads_since_warm = 0;
  TimeNs warm_until = 0;
};

/// Drops the warm flag once the horizon has passed.
inline bool timer_warm(TimerState& t, TimeNs now) {
  if (t.warm && now >= t.warm_until) {
    t.warm = false;
    t.reads_since_warm = 0;
  }
  return t.warm;
}

inline void warm_timer(TimerState& t, const LatencyModel& m, TimeNs now) {
  if (timer_warm(t, now)) return;
  t.reads_since_warm = m.warm_reads;
  t.warm = true;
  t.warm_until = now + m.warm_horizon;
}

inline double sample_latency(HitLevel h, const LatencyModel& m, TimerState& t, Rng& rng, TimeNs now) {
  if (!timer_warm(t, now) && m.spike_prob_cold > 0 && uniform01(rng) < m.spike_prob_cold) return m.spike;
  ++t.reads_since_warm;
  double lat = m.base(h);
  if (m.jitter > 0) lat += std::normal_distribution<double>(0.0, m.jitter)(rng);
  return std::max(1.0, lat);
}

/// Performs the access (mutating cache state) and returns the observed cycles.
inline double measure_access(CacheState& state, std::uint64_t hpa, ActorId actor, TimerState& timer,
                             const LatencyModel& m, Rng& rng, TimeNs now) {
  const AccessResult r = state.access(hpa, actor);
  return sample_latency(r.level, m, timer, rng, now);
}

enum class Measured : std::uint8_t { L2OrFaster, LLC, Memory };

inline const char* to_string(Measured m) {
  switch (m) {
    case Measured::L2OrFaster: return "L2-or-faster";
    case Measured::LLC: return "LLC";
    case Measured::Memory: return "memory";
  }
  return "?";
}

/// Lower bounds of the LLC and memory classes, in cycles.
struct Thresholds {
  double llc = 32.0;
  double mem = 125.0;
};

/// Closed-open intervals: a latency equal to a threshold takes the deeper class.
inline Measured classify_level(double latency, const Thresholds& th) {
  if (!(th.llc < th.mem)) throw Error(Errc::invalid_argument, "thresholds must be strictly increasing");
  if (latency >= th.mem) return Measured::Memory;
  if (latency >= th.llc) return Measured::LLC;
  return Measured::L2OrFaster;
}

struct CalibrationStats {
  double mean[3]{};
  double sd[3]{};
};

/// Samples each level on a scratch line and places thresholds at the midpoints
/// of adjacent means.
inline Thresholds calibrate_thresholds(CacheState& state, ActorId actor, TimerState& timer,
                                       const LatencyModel& m, Rng& rng, TimeNs now, unsigned samples,
                                       std::uint64_t scratch_hpa, CalibrationStats* out = nullptr) {
  if (samples < 100) throw Error(Errc::invalid_argument, "calibration needs at least 100 samples");
  warm_timer(timer, m, now);
  std::vector<double> v[3];
  for (auto& x : v) x.reserve(samples);
  for (unsigned i = 0; i < samples; ++i) {
    state.flush_line(scratch_hpa);
    v[2].push_back(measure_access(state, scratch_hpa, actor, timer, m, rng, now));
    v[0].push_back(measure_access(state, scratch_hpa, actor, timer, m, rng, now));
    state.flush_line(scratch_hpa);
    state.llc_pull(scratch_hpa, actor);
    v[1].push_back(measure_access(state, scratch_hpa, actor, timer, m, rng, now));
  }
  state.flush_line(scratch_hpa);

  CalibrationStats st;
  for (int k = 0; k < 3; ++k) {
    double s = 0, s2 = 0;
    for (double x : v[k]) s += x;
    st.mean[k] = s / samples;
    for (double x : v[k]) s2 += (x - st.mean[k]) * (x - st.mean[k]);
    st.sd[k] = std::sqrt(s2 / (samples - 1));
  }
  if (out) *out = st;
  for (int k = 0; k < 2; ++k)
    if (st.mean[k + 1] - st.mean[k] < 3.0 * (st.sd[k] + st.sd[k + 1]))
      throw Error(Errc::calibration, "latency classes overlap between " + std::to_string(k) + " and " +
                                         std::to_string(k + 1));
  return Thresholds{(st.mean[0] + st.mean[1]) / 2.0, (st.mean[1] + st.mean[2]) / 2.0};
}

}  // namespace cachex
