#pragma once

// Named experiments. Each builds its own world(s) from a scenario and returns
// a deterministic bundle.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cachex/policy_cap.hpp"
#include "cachex/policy_cas.hpp"
#include "cachex/scenario.hpp"

namespace cachex {

inline std::unique_ptr<World> make_world(const ScenarioSpec& s, std::uint64_t seed, std::uint64_t extra_pages = 0) {
  const auto pages = World::guest_pages_for(s.geometry, s.vm.pool_scale, extra_pages, s.guest_pages);
  return std::make_unique<World>(s.geometry, s.profile, pages, s.latency, s.vm, seed, s.host_pages);
}

inline std::string join(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// ---------------------------------------------------------------------------

inline Bundle exp_coverage(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const auto& p = s.params;
  const std::uint64_t runs = p.uint("runs", 1000);
  const auto fs = p.uints("f", {s.monitor.f});
  const auto max_off = static_cast<unsigned>(p.uint("max_offsets", s.max_offsets));
  const auto workers = static_cast<unsigned>(p.uint("workers", 1));
  if (runs == 0) throw Error(Errc::validation, "runs must be >= 1");
  for (auto f : fs)
    if (f < 1 || f > 2 * s.geometry.n_slices) throw Error(Errc::validation, "f must be in [1, 2 * n_slices]");

  b.put("experiment", "coverage");
  b.put("runs", runs);
  b.put("n_slices", s.geometry.n_slices);
  b.put("offsets", max_off);
  std::ostringstream csv;
  csv << "f,run,coverage,sets,duplicates\n";
  for (auto f : fs) {
    double sum = 0;
    for (std::uint64_t r = 0; r < runs; ++r) {
      auto w = make_world(s, derive_seed(s.seed, 0xc0e, f, r));
      w->build_filters();
      const auto groups = w->classify_pool();
      const auto rep = w->build_sets(groups, static_cast<unsigned>(f), max_off, workers);
      sum += rep.row_coverage();
      csv << f << ',' << r << ',' << Bundle::fmt(rep.row_coverage()) << ',' << rep.sets.size() << ','
          << rep.duplicates << '\n';
      if (r + 1 == runs) w->check("evset", b, o);
    }
    const std::string k = std::to_string(f);
    b.put("coverage_f" + k, sum / static_cast<double>(runs));
    b.put("theoretical_f" + k, coverage_theoretical(s.geometry.n_slices, static_cast<unsigned>(f)));
  }
  if (fs.size() == 1) b.put("coverage", *b.get("coverage_f" + std::to_string(fs.front())));
  b.files["coverage.csv"] = csv.str();
  return b;
}

// ---------------------------------------------------------------------------

inline Bundle exp_associativity(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const auto& p = s.params;
  const auto masks = p.uints("masks", {s.geometry.llc_ways});
  const std::uint64_t runs = p.uint("runs", 10);
  const auto repls = p.has("replacements") ? p.strs("replacements") : std::vector<std::string>{to_string(s.geometry.replacement)};
  const std::uint64_t per_run = p.uint("sets_per_run", 3);
  for (auto m : masks)
    if (m < 1 || m > s.geometry.llc_ways) throw Error(Errc::validation, "mask " + std::to_string(m) + " out of range");

  b.put("experiment", "associativity");
  b.put("runs", runs);
  std::ostringstream csv;
  csv << "replacement,mask,run,size\n";
  for (std::size_t ri = 0; ri < repls.size(); ++ri) {
    ScenarioSpec v = s;
    v.geometry.replacement = parse_replacement(repls[ri]);
    v.vm.probe.rounds = static_cast<unsigned>(p.uint("rounds_" + repls[ri], s.vm.probe.rounds));
    v.vm.probe.votes = static_cast<unsigned>(p.uint("votes_" + repls[ri], s.vm.probe.votes));
    v.vm.probe.confirm = static_cast<unsigned>(p.uint("confirm_" + repls[ri], s.vm.probe.confirm));
    for (auto m : masks) {
      std::vector<unsigned> sizes;
      for (std::uint64_t r = 0; r < runs; ++r) {
        auto w = make_world(v, derive_seed(s.seed, 0xa55, ri * 64 + m, r));
        w->cache().set_way_mask(w->vcpu(0, 0), Level::LLC, static_cast<unsigned>(m));
        w->build_filters();
        const auto groups = w->classify_pool();
        const auto& g0 = *std::max_element(groups.begin(), groups.end(),
                                           [](const auto& a, const auto& c) { return a.size() < c.size(); });
        BuildOptions opt;
        opt.max_sets = per_run;
        const auto rep = build_all_at_offset(w->prober(0), make_pool(Level::LLC, 0, g0), opt);
        unsigned size = 0;
        try {
          size = probe_associativity(rep.sets);
        } catch (const Error& e) {
          if (e.code() != Errc::no_sets) throw;
        }
        sizes.push_back(size);
        csv << repls[ri] << ',' << m << ',' << r << ',' << size << '\n';
        if (r + 1 == runs) w->check("evset", b, o);
      }
      std::map<unsigned, unsigned> hist;
      double mean = 0;
      for (auto x : sizes) {
        ++hist[x];
        mean += x;
      }
      mean /= static_cast<double>(sizes.size());
      double var = 0;
      for (auto x : sizes) var += (x - mean) * (x - mean);
      const double sd = sizes.size() > 1 ? std::sqrt(var / static_cast<double>(sizes.size() - 1)) : 0.0;
      unsigned mode = 0, best = 0;
      for (const auto& [size, n] : hist)
        if (n > best) {
          best = n;
          mode = size;
        }
      const std::string k = "assoc_" + repls[ri] + "_m" + std::to_string(m);
      b.put(k + "_mode", mode);
      b.put(k + "_mean", mean);
      b.put(k + "_sd", sd);
    }
  }
  b.files["associativity.csv"] = csv.str();
  return b;
}

// ---------------------------------------------------------------------------

inline Bundle exp_color_id(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const std::uint64_t pages = s.params.uint("pages", 10000);
  auto w = make_world(s, s.seed, pages);
  const auto& filters = w->build_filters();

  std::set<SetKey> keys;
  for (const auto& f : filters) keys.insert(oracle_key(w->map(), w->geometry(), Level::L2, f.base.members.front()));

  std::map<std::pair<unsigned, unsigned>, std::uint64_t> table;
  std::vector<std::uint64_t> hist(filters.size(), 0);
  ClassifyStats st;
  std::uint64_t unclassified = 0;
  for (std::uint64_t i = 0; i < pages; ++i) {
    const std::uint64_t page = w->allocator().alloc();
    const auto c = w->classify(page, &st);
    if (!c) {
      ++unclassified;
      continue;
    }
    ++hist[*c];
    ++table[{*c, w->zone_of_gva(page << kPageBits)}];
  }

  std::map<unsigned, std::set<unsigned>> fwd, back;
  std::map<unsigned, std::uint64_t> best;
  for (const auto& [k, n] : table) {
    fwd[k.first].insert(k.second);
    back[k.second].insert(k.first);
    best[k.first] = std::max(best[k.first], n);
  }
  bool perm = unclassified == 0 && fwd.size() == filters.size() && back.size() == filters.size();
  for (const auto& [v, os] : fwd) perm = perm && os.size() == 1;
  for (const auto& [c, vs] : back) perm = perm && vs.size() == 1;
  std::uint64_t agree = 0;
  for (const auto& [v, n] : best) agree += n;

  b.put("experiment", "color_id");
  b.put("filters", static_cast<std::uint64_t>(filters.size()));
  b.put("expected_filters", w->geometry().colors(Level::L2));
  b.put("filter_duplicates", static_cast<std::uint64_t>(filters.size() - keys.size()));
  b.put("pages", pages);
  b.put("unclassified", unclassified);
  b.put("sequential_fallbacks", st.sequential);
  b.put("permutation", perm);
  b.put("accuracy", static_cast<double>(agree) / static_cast<double>(pages));

  std::ostringstream t, h;
  t << "virtual,oracle,count\n";
  for (const auto& [k, n] : table) t << k.first << ',' << k.second << ',' << n << '\n';
  h << "color,pages\n";
  for (std::size_t c = 0; c < hist.size(); ++c) h << c << ',' << hist[c] << '\n';
  b.files["contingency.csv"] = t.str();
  b.files["color_histogram.csv"] = h.str();
  w->check("vcol", b, o);
  return b;
}

// ---------------------------------------------------------------------------

/// Builds one full-size LLC set, then for each k primes it, flushes k of its
/// lines and probes.
inline Bundle exp_manual_flush(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const auto flush = s.params.uints("flush", {2, 4, 6, 8, 11});
  auto w = make_world(s, s.seed);
  w->build_filters();
  const auto groups = w->classify_pool();
  const auto rep = w->build_sets(groups, 1, 1, 1);
  const EvictionSet* pick = nullptr;
  for (const auto& e : rep.sets)
    if (!e.duplicate && e.size() == w->geometry().llc_ways) {
      pick = &e;
      break;
    }
  if (!pick) throw Error(Errc::no_sets, "no full-size LLC set to monitor");
  for (auto k : flush)
    if (k > pick->size()) throw Error(Errc::validation, "cannot flush more lines than the set holds");

  std::vector<MonitoredSet> one{MonitoredSet{*pick, static_cast<unsigned>(pick->color), 0}};
  ProberSet ps = w->prober_set();
  std::vector<std::uint64_t> detected;
  std::ostringstream csv;
  csv << "flushed,detected,unknown\n";
  for (auto k : flush) {
    const PhaseTiming pr = prime(one, ps, 1, w->now());
    for (std::uint64_t i = 0; i < k; ++i) w->cache().flush_line(w->prober(0).hpa(one[0].set.members[i]));
    probe(one, ps, 1, pr.end);
    detected.push_back(one[0].evicted);
    csv << k << ',' << one[0].evicted << ',' << one[0].unknown << '\n';
  }
  b.put("experiment", "manual_flush");
  b.put("set_size", static_cast<std::uint64_t>(pick->size()));
  b.put("flushed", join(flush));
  b.put("detected", join(detected));
  b.put("exact", detected == flush);
  b.files["manual_flush.csv"] = csv.str();
  w->check("vscan", b, o);
  return b;
}

// ---------------------------------------------------------------------------

/// One unadapted cycle per (profile, window) from the same starting state.
inline Bundle exp_window_sweep(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const auto& p = s.params;
  const auto windows = p.nums("windows", {0.1, 0.2, 0.5, 1, 2, 5, 10, 20});
  const auto names = p.has("profiles") ? p.strs("profiles") : std::vector<std::string>{"polluter", "moderate", "light"};
  const auto rates = p.nums("rates");
  if (rates.size() != names.size()) throw Error(Errc::validation, "profiles and rates differ in length");
  const CacheGeometry& g = s.geometry;
  const std::uint64_t llc_kb = std::uint64_t(g.llc_sets) * g.n_slices * g.llc_ways * kLineSize / 1024;
  const std::uint64_t region_kb = p.uint("region_kb", 4 * llc_kb);
  const double lead_ms = p.num("lead_ms", 1.0);
  const double saturated = p.num("saturation_pct", 99.0);

  auto w = make_world(s, s.seed);
  w->build_filters();
  const auto groups = w->classify_pool();
  const auto rep = w->build_sets(groups, s.monitor.f, s.max_offsets, s.monitor.workers);
  std::vector<MonitoredSet> sets;
  for (auto& m : w->monitored_sets(rep))
    if (m.domain == 0) sets.push_back(m);
  if (sets.empty()) throw Error(Errc::no_sets, "no sets to monitor");
  const ActorId tenant = w->tenant_core(0, "sweep");
  const CacheState snapshot = w->cache();
  const TimeNs t_base = w->now();
  ProberSet ps = w->prober_set();

  std::ostringstream csv;
  csv << "profile,rate,window_ms,evicted_pct,full_share\n";
  b.put("experiment", "window_sweep");
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::vector<double> pct;
    for (double win : windows) {
      w->cache() = snapshot;
      TenantSim ts(w->cache(), derive_seed(s.seed, 0x5eed, i));
      TenantWorkload tw;
      tw.name = names[i];
      tw.kind = WorkloadKind::polluter;
      tw.actor = tenant;
      tw.region_base = tenant_region_base(0);
      tw.region_size = region_kb * 1024;
      tw.rate = rates[i];
      tw.start = t_base;
      ts.add(tw);
      ts.fast_forward(t_base);
      MonitorConfig mc = s.monitor;
      mc.window_ms = win;
      mc.window_min_ms = std::min(mc.window_min_ms, win);
      mc.window_max_ms = std::max(mc.window_max_ms, win);
      ContentionMonitor mon(mc, sets, g.n_domains, static_cast<unsigned>(w->filters().size()), s.seed);
      const TimeNs t0 = t_base + ms_to_ns(lead_ms);
      w->set_now(t0);
      const CycleResult r = mon.cycle(ps, &ts, t0, false);
      pct.push_back(r.mean_evicted_pct);
      csv << names[i] << ',' << Bundle::fmt(rates[i]) << ',' << Bundle::fmt(win) << ',' << Bundle::fmt(r.mean_evicted_pct)
          << ',' << Bundle::fmt(r.full_share) << '\n';
    }
    bool mono = true;
    for (std::size_t k = 1; k < pct.size(); ++k) mono = mono && pct[k] + 1e-9 >= pct[k - 1];
    double sat = -1;
    for (std::size_t k = 0; k < pct.size(); ++k)
      if (pct[k] >= saturated) {
        sat = windows[k];
        break;
      }
    b.put("monotone_" + names[i], mono);
    b.put("saturation_ms_" + names[i], sat);
    b.put("max_pct_" + names[i], *std::max_element(pct.begin(), pct.end()));
  }
  b.files["window_sweep.csv"] = csv.str();
  w->check("vscan", b, o);
  return b;
}

// ---------------------------------------------------------------------------

struct MonitorOutcome {
  std::uint64_t reuse_misses = 0;
  std::uint64_t reuse_accesses = 0;
  unsigned scan_zones_steady = 0;  // most zones filled by scans in one steady interval
  std::uint64_t reclaims = 0;
  std::vector<double> residency_cas;       // sensitive tasks, per domain
  std::vector<double> residency_baseline;  // same seeds, contention-blind
  std::uint64_t tier_changes = 0;
  std::vector<CycleResult> cycles;
};

/// Monitors for the scenario's duration with its tenants. `cap` selects the
/// page-cache policy for file scans (uncolored when empty); CAS placement is
/// simulated next to a contention-blind baseline when the policy asks for it.
inline MonitorOutcome run_monitor(const ScenarioSpec& s, std::optional<CapMode> cap, const RunOptions& o, Bundle& b,
                                  const std::string& prefix) {
  MonitorOutcome out;
  const auto& p = s.params;
  std::uint64_t extra = 0;
  for (const auto& t : s.tenants) extra += t.pages + t.budget;
  const std::uint64_t color_budget = p.uint("color_budget", cap && *cap != CapMode::uncolored ? 16 * s.geometry.colors(Level::L2) * 4 : 0);
  extra += color_budget;
  auto w = make_world(s, s.seed, extra);
  const CacheGeometry& g = w->geometry();
  w->build_filters();
  const auto groups = w->classify_pool();
  const auto rep = w->build_sets(groups, s.monitor.f, s.max_offsets, s.monitor.workers);
  const unsigned n_colors = static_cast<unsigned>(w->filters().size());
  ContentionMonitor mon(s.monitor, w->monitored_sets(rep), g.n_domains, n_colors, derive_seed(s.seed, 0x3011));
  if (mon.sets().empty()) throw Error(Errc::no_sets, "no sets to monitor");

  ColoredFreeLists lists(n_colors);
  if (color_budget) refill_lists(lists, color_budget, w->prober(0), w->filters(), w->allocator());
  const CapMode mode = cap.value_or(CapMode::uncolored);

  const TimeNs T0 = (w->now() / ms_to_ns(1) + 1) * ms_to_ns(1);
  w->set_now(T0);
  TenantSim ts(w->cache(), derive_seed(s.seed, 0x7e));
  ts.fast_forward(T0);

  std::vector<std::unique_ptr<PageCache>> caches;
  std::set<ActorId> scan_actors;
  std::vector<std::tuple<std::string, ActorId, PageCache*>> scanners;
  std::vector<ActorId> reuse_actors;
  std::vector<std::pair<std::string, ActorId>> named;
  unsigned foreign = 0;
  for (const auto& t : s.tenants) {
    const ActorId a = t.own_vm ? w->vm_thread(t.domain) : w->tenant_core(t.domain, t.name);
    named.emplace_back(t.name, a);
    TenantWorkload tw;
    tw.name = t.name;
    tw.kind = t.kind;
    tw.actor = a;
    tw.colors = t.colors;
    tw.region_base = tenant_region_base(foreign);
    tw.region_size = t.region_kb * 1024;
    tw.stride = t.stride;
    tw.rate = t.rate;
    tw.start = T0 + ms_to_ns(t.start_ms);
    if (t.stop_ms >= 0) tw.stop = T0 + ms_to_ns(t.stop_ms);
    tw.own_vm = t.own_vm;
    if (!t.own_vm) ++foreign;
    if (t.kind == WorkloadKind::reuse_loop) {
      for (auto page : w->allocator().alloc_n(t.pages))
        for (unsigned l = 0; l < kLinesPerPage; ++l) tw.addresses.push_back(w->map().gva_to_hpa((page << kPageBits) | (l * kLineSize)));
      reuse_actors.push_back(a);
    }
    if (t.kind == WorkloadKind::file_scan) {
      caches.push_back(std::make_unique<PageCache>(t.budget, mode, lists, w->allocator()));
      PageCache* pc = caches.back().get();
      World* wp = w.get();
      const std::uint64_t file_pages = t.file_pages;
      auto cursor = std::make_shared<std::uint64_t>(0);
      tw.hook = [pc, wp, a, file_pages, cursor](TimeNs) {
        const std::uint64_t off = (*cursor)++ % file_pages * kPageSize;
        pc->access_file(a, off, [wp](std::uint64_t gva_page, ActorId who) {
          for (unsigned l = 0; l < kLinesPerPage; ++l)
            wp->cache().access(wp->map().gva_to_hpa((gva_page << kPageBits) | (l * kLineSize)), who);
        });
      };
      scan_actors.insert(a);
      scanners.emplace_back(t.name, a, pc);
    }
    ts.add(std::move(tw));
  }

  std::set<unsigned> zones_now;
  w->cache().set_fill_observer([&](std::uint64_t line, ActorId owner) {
    if (scan_actors.count(owner)) zones_now.insert(w->zone_of_hpa(line << kLineBits));
  });

  TierTracker tracker(g.n_domains, static_cast<unsigned>(p.uint("tiers", 2)));
  RecolorTracker recolor;
  CpuTopology topo;
  for (unsigned v = 0; v < w->n_vcpus(); ++v) topo.domain_of.push_back(v / s.vm.vcpus_per_domain);
  std::vector<SimTask> cas_tasks, base_tasks;
  const auto n_sens = p.uint("sensitive_tasks", 1);
  const auto n_insens = p.uint("insensitive_tasks", 0);
  for (std::uint64_t i = 0; i < n_sens + n_insens; ++i)
    cas_tasks.push_back(SimTask{static_cast<unsigned>(i), 0, i < n_sens ? Sensitivity::sensitive : Sensitivity::insensitive, {}});
  base_tasks = cas_tasks;
  TickConfig tc;
  tc.tick_ms = p.num("tick_ms", tc.tick_ms);
  tc.busy_prob = p.num("busy_prob", tc.busy_prob);

  ProberSet ps = w->prober_set();
  const auto n_cycles = static_cast<std::uint64_t>(std::floor(s.duration_ms / s.monitor.interval_ms));
  std::ostringstream sets_csv, agg_csv, win_csv, tier_csv, place_csv, pc_csv;
  place_csv << "interval,task,domain,tier\n";
  pc_csv << "interval,actor,hits,misses,alloc_color\n";
  std::vector<FileCounters> pc_last(scanners.size());
  win_csv << "t_ms,window_ms,prime_ms,probe_ms,full_share,mean_evicted_pct,violated\n";
  tier_csv << "t_ms,domain,tier,rate\n";
  bool prev_reclaim = true;
  for (std::uint64_t k = 0; k < n_cycles; ++k) {
    const TimeNs t = T0 + ms_to_ns(s.monitor.interval_ms * static_cast<double>(k));
    if (s.active_ms > 0 && t - ms_to_ns(s.active_ms) > ts.now()) ts.fast_forward(t - ms_to_ns(s.active_ms));
    ts.step(std::max(t, ts.now()));
    // Scan fills since the previous cycle, attributed to that interval.
    const bool steady = !prev_reclaim && k > 0;
    if (steady) out.scan_zones_steady = std::max(out.scan_zones_steady, static_cast<unsigned>(zones_now.size()));
    zones_now.clear();

    const TimeNs t0 = std::max({t, w->now(), ts.now()});
    if (t0 >= T0 + ms_to_ns(s.duration_ms)) break;
    const CycleResult r = mon.cycle(ps, &ts, t0, true);
    out.cycles.push_back(r);
    mon.write_sets_csv(sets_csv, k == 0);
    mon.write_aggregates_csv(agg_csv, k == 0);
    win_csv << Bundle::fmt(ns_to_ms(r.t0)) << ',' << Bundle::fmt(r.window_ms) << ',' << Bundle::fmt(r.prime_ms) << ','
            << Bundle::fmt(r.probe_ms) << ',' << Bundle::fmt(r.full_share) << ',' << Bundle::fmt(r.mean_evicted_pct) << ','
            << r.window_violated << '\n';

    if (s.cas()) {
      tracker.update(r.domain_agg);
      Rng rc = make_rng(s.seed, 0xca5, k), rb = make_rng(s.seed, 0xca5, k);
      run_interval(cas_tasks, topo, tracker.tiers(), s.monitor.interval_ms, tc, rc);
      run_interval(base_tasks, topo, {}, s.monitor.interval_ms, tc, rb);
      for (unsigned d = 0; d < g.n_domains; ++d)
        tier_csv << Bundle::fmt(ns_to_ms(r.t0)) << ',' << d << ',' << tracker.tiers()[d] << ','
                 << Bundle::fmt(r.domain_agg[d]) << '\n';
      // Majority domain of the interval, lowest id on ties.
      for (const auto& task : cas_tasks) {
        const auto& row = task.residency.back();
        const auto dom = static_cast<unsigned>(std::max_element(row.begin(), row.end()) - row.begin());
        place_csv << k << ',' << task.id << ',' << dom << ',' << tracker.tiers()[dom] << '\n';
      }
    }
    for (std::size_t i = 0; i < scanners.size(); ++i) {
      const auto& [name, a, pc] = scanners[i];
      const FileCounters c = pc->counters(a);
      const auto col = pc->current_color();
      pc_csv << k << ',' << name << ',' << c.hits - pc_last[i].hits << ',' << c.misses - pc_last[i].misses << ','
             << (col ? std::to_string(*col) : std::string("none")) << '\n';
      pc_last[i] = c;
    }
    prev_reclaim = false;
    if (mode == CapMode::ranked) {
      const ColorRanking ranking = rank_colors(r.color_agg);
      const bool again = recolor.maybe_recolor(ranking);
      if (again)
        for (auto& pc : caches) pc->reclaim();
      for (auto& pc : caches) pc->set_ranking(ranking, k == 0 || again);
      prev_reclaim = k == 0 || again;
    }
  }
  const TimeNs t_end = T0 + ms_to_ns(s.duration_ms);
  if (t_end > ts.now()) {
    if (s.active_ms > 0)
      ts.fast_forward(t_end);
    else
      ts.step(t_end);
  }
  if (!prev_reclaim && !out.cycles.empty()) out.scan_zones_steady = std::max(out.scan_zones_steady, static_cast<unsigned>(zones_now.size()));
  w->cache().set_fill_observer(nullptr);

  for (auto a : reuse_actors) {
    out.reuse_misses += w->cache().stats(a).memory;
    out.reuse_accesses += w->cache().stats(a).accesses();
  }
  for (auto& pc : caches) out.reclaims += pc->reclaims();
  out.tier_changes = tracker.changes();

  b.put(prefix + "cycles", static_cast<std::uint64_t>(out.cycles.size()));
  if (!out.cycles.empty()) {
    double wsum = 0;
    for (const auto& c : out.cycles) wsum += c.window_ms;
    b.put(prefix + "mean_window_ms", wsum / static_cast<double>(out.cycles.size()));
    b.put(prefix + "final_window_ms", mon.window_ms());
    const auto agg = mon.aggregate_by_domain();
    for (unsigned d = 0; d < g.n_domains; ++d) b.put(prefix + "ewma_domain" + std::to_string(d), agg[d]);
  }
  for (const auto& [name, a] : named) {
    const ActorStats st = w->cache().stats(a);
    b.put(prefix + "miss_rate." + name, st.accesses() ? static_cast<double>(st.memory) / static_cast<double>(st.accesses()) : 0.0);
  }
  if (s.cas()) {
    for (unsigned d = 0; d < g.n_domains; ++d) {
      double c = 0, base = 0;
      for (std::uint64_t i = 0; i < n_sens; ++i) {
        c += residency_share(cas_tasks[i], d);
        base += residency_share(base_tasks[i], d);
      }
      out.residency_cas.push_back(n_sens ? c / static_cast<double>(n_sens) : 0.0);
      out.residency_baseline.push_back(n_sens ? base / static_cast<double>(n_sens) : 0.0);
      b.put(prefix + "residency_cas_d" + std::to_string(d), out.residency_cas.back());
      b.put(prefix + "residency_baseline_d" + std::to_string(d), out.residency_baseline.back());
    }
    b.put(prefix + "tier_changes", out.tier_changes);
    b.files[prefix + "tiers.csv"] = tier_csv.str();
    b.files[prefix + "placement.csv"] = place_csv.str();
  }
  if (!caches.empty()) {
    b.put(prefix + "reuse_misses", out.reuse_misses);
    b.put(prefix + "reuse_accesses", out.reuse_accesses);
    b.put(prefix + "scan_zones_steady", out.scan_zones_steady);
    b.put(prefix + "reclaims", out.reclaims);
    std::uint64_t hits = 0, misses = 0, unc = 0;
    for (const auto& pc : caches) {
      for (auto a : scan_actors) {
        hits += pc->counters(a).hits;
        misses += pc->counters(a).misses;
      }
      unc += pc->uncolored_allocs();
    }
    b.put(prefix + "page_cache_hits", hits);
    b.put(prefix + "page_cache_misses", misses);
    b.put(prefix + "uncolored_allocs", unc);
    std::ostringstream lc;
    lc << "color,free_pages\n";
    const auto h = lists.histogram();
    for (std::size_t c = 0; c < h.size(); ++c) lc << c << ',' << h[c] << '\n';
    b.files[prefix + "color_lists.csv"] = lc.str();
    b.files[prefix + "page_cache.csv"] = pc_csv.str();
  }
  b.files[prefix + "sets.csv"] = sets_csv.str();
  b.files[prefix + "aggregates.csv"] = agg_csv.str();
  b.files[prefix + "windows.csv"] = win_csv.str();
  w->check("vscan", b, o);
  return out;
}

inline Bundle exp_monitor(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  b.put("experiment", "monitor");
  b.put("policy", s.policy);
  if (s.cap()) {
    const auto ranked = run_monitor(s, CapMode::ranked, o, b, "cap.");
    const auto unranked = run_monitor(s, CapMode::unranked, o, b, "cap_unranked.");
    b.put("reuse_misses_cap", ranked.reuse_misses);
    b.put("reuse_misses_cap_unranked", unranked.reuse_misses);
  } else {
    run_monitor(s, std::nullopt, o, b, "");
  }
  return b;
}

// ---------------------------------------------------------------------------

inline double overlap_of(World& w, std::span<const std::uint64_t> sample) {
  std::vector<ColoredPage> cp;
  for (auto page : sample)
    if (auto c = w.classify(page)) cp.push_back(ColoredPage{page, *c});
  return gpa_color_overlap(cp, w.map());
}

inline Bundle exp_fragmentation(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const auto& p = s.params;
  const auto shuffles = p.nums("shuffles", {0.0, 1.0});
  const std::uint64_t pages = p.uint("pages", 4096);
  const auto stages = p.nums("remap_fractions", {0.1, 0.1, 0.1, 0.1, 0.1});
  std::ostringstream csv;
  csv << "kind,param,overlap\n";
  b.put("experiment", "fragmentation");
  b.put("pages", pages);
  for (double sh : shuffles) {
    if (sh < 0 || sh > 1) throw Error(Errc::validation, "shuffle must be in [0,1]");
    ScenarioSpec v = s;
    v.profile = sh == 0 ? FragmentationProfile::contiguous() : FragmentationProfile::fragmented(sh);
    auto w = make_world(v, derive_seed(s.seed, 0xf4a9), pages);
    w->build_filters();
    const auto sample = w->allocator().alloc_n(pages);
    const double ov = overlap_of(*w, sample);
    b.put("overlap_shuffle_" + Bundle::fmt(sh), ov);
    csv << "shuffle," << Bundle::fmt(sh) << ',' << Bundle::fmt(ov) << '\n';
    w->check("mem-model", b, o);
  }
  if (!stages.empty()) {
    ScenarioSpec v = s;
    v.profile = FragmentationProfile::contiguous();
    auto w = make_world(v, derive_seed(s.seed, 0x57a9), pages);
    w->build_filters();
    const auto sample = w->allocator().alloc_n(pages);
    std::vector<double> ov{overlap_of(*w, sample)};
    csv << "stage,0," << Bundle::fmt(ov.back()) << '\n';
    for (std::size_t i = 0; i < stages.size(); ++i) {
      RemapEvent ev;
      ev.at = static_cast<TimeNs>(i + 1);
      ev.fraction = stages[i];
      w->set_map(apply_remap(w->map(), ev));
      w->build_filters(true);
      ov.push_back(overlap_of(*w, sample));
      csv << "stage," << i + 1 << ',' << Bundle::fmt(ov.back()) << '\n';
    }
    bool dec = true;
    for (std::size_t i = 0; i < ov.size(); ++i) {
      b.put("overlap_stage" + std::to_string(i), ov[i]);
      if (i) dec = dec && ov[i] < ov[i - 1];
    }
    b.put("staged_decreasing", dec);
    w->check("mem-model", b, o);
  }
  b.files["overlap.csv"] = csv.str();
  return b;
}

// ---------------------------------------------------------------------------

inline Bundle exp_build(const ScenarioSpec& s, const RunOptions& o) {
  Bundle b;
  const auto& p = s.params;
  const auto f = static_cast<unsigned>(p.uint("f", s.monitor.f));
  const auto max_off = static_cast<unsigned>(p.uint("max_offsets", s.max_offsets));
  const auto workers = static_cast<unsigned>(p.uint("workers", s.monitor.workers));
  auto w = make_world(s, s.seed);
  w->build_filters();
  ClassifyStats st;
  const auto groups = w->classify_pool(&st);
  const auto rep = w->build_sets(groups, f, max_off, workers);

  std::size_t congruent = 0;
  double size_sum = 0;
  for (const auto& e : rep.sets) {
    congruent += oracle_congruent(w->map(), w->geometry(), e);
    size_sum += static_cast<double>(e.size());
  }
  b.put("experiment", "build");
  b.put("filters", static_cast<std::uint64_t>(w->filters().size()));
  b.put("partitions", static_cast<std::uint64_t>(rep.partitions));
  b.put("empty_partitions", static_cast<std::uint64_t>(rep.empty_partitions));
  b.put("sets", static_cast<std::uint64_t>(rep.sets.size()));
  b.put("duplicates", static_cast<std::uint64_t>(rep.duplicates));
  b.put("congruent_share", rep.sets.empty() ? 0.0 : static_cast<double>(congruent) / static_cast<double>(rep.sets.size()));
  b.put("mean_set_size", rep.sets.empty() ? 0.0 : size_sum / static_cast<double>(rep.sets.size()));
  b.put("coverage", rep.row_coverage());
  if (f <= 2 * s.geometry.n_slices) b.put("theoretical", coverage_theoretical(s.geometry.n_slices, f));
  b.put("elapsed_ms", ns_to_ms(rep.elapsed));
  b.put("unclassified", st.failed);

  std::ostringstream ev, fl, wk;
  write_evsets_csv(ev, rep.sets);
  std::vector<EvictionSet> fs;
  for (const auto& x : w->filters()) fs.push_back(x.base);
  write_evsets_csv(fl, fs);
  wk << "worker,busy_ms\n";
  for (std::size_t i = 0; i < rep.per_worker.size(); ++i) wk << i << ',' << Bundle::fmt(ns_to_ms(rep.per_worker[i])) << '\n';
  b.files["evsets.csv"] = ev.str();
  b.files["filters.csv"] = fl.str();
  b.files["workers.csv"] = wk.str();
  w->check("evset", b, o);
  return b;
}

/// Refills colored free lists with `budget` classified pages.
inline Bundle exp_vcol(const ScenarioSpec& s, const RunOptions& o, std::uint64_t budget) {
  Bundle b;
  auto w = make_world(s, s.seed, budget);
  w->build_filters();
  ColoredFreeLists lists(static_cast<unsigned>(w->filters().size()));
  const auto rep = refill_lists(lists, budget, w->prober(0), w->filters(), w->allocator());
  std::uint64_t agree = 0;
  std::map<unsigned, std::map<unsigned, std::uint64_t>> by_color;
  std::ostringstream dump, hist;
  lists.dump(dump);
  hist << "color,pages\n";
  const auto h = lists.histogram();
  for (std::size_t c = 0; c < h.size(); ++c) hist << c << ',' << h[c] << '\n';
  std::istringstream in(dump.str());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    const unsigned c = static_cast<unsigned>(std::stoul(line.substr(0, comma)));
    const std::uint64_t gva = std::stoull(line.substr(comma + 1), nullptr, 16);
    ++by_color[c][w->zone_of_gva(gva)];
  }
  for (const auto& [c, zs] : by_color) {
    std::uint64_t best = 0;
    for (const auto& [z, n] : zs) best = std::max(best, n);
    agree += best;
  }
  b.put("experiment", "vcol");
  b.put("filters", static_cast<std::uint64_t>(w->filters().size()));
  b.put("budget", budget);
  b.put("colored", static_cast<std::uint64_t>(lists.total()));
  b.put("uncolored", rep.uncolored);
  b.put("oracle_agreement", lists.total() ? static_cast<double>(agree) / static_cast<double>(lists.total()) : 0.0);
  b.files["color_histogram.csv"] = hist.str();
  b.files["free_lists.csv"] = dump.str();
  w->check("vcol", b, o);
  return b;
}

inline Bundle run_scenario(const ScenarioSpec& s, const RunOptions& o = {}) {
  Bundle b;
  if (s.experiment == "coverage") b = exp_coverage(s, o);
  else if (s.experiment == "associativity") b = exp_associativity(s, o);
  else if (s.experiment == "color_id") b = exp_color_id(s, o);
  else if (s.experiment == "manual_flush") b = exp_manual_flush(s, o);
  else if (s.experiment == "window_sweep") b = exp_window_sweep(s, o);
  else if (s.experiment == "monitor") b = exp_monitor(s, o);
  else if (s.experiment == "fragmentation") b = exp_fragmentation(s, o);
  else if (s.experiment == "build") b = exp_build(s, o);
  else throw Error(Errc::validation, "unknown experiment '" + s.experiment + "'");
  Bundle head;
  head.put("scenario", s.name);
  head.put("seed", s.seed);
  for (auto& kv : b.summary) head.put(kv.first, kv.second);
  head.files = std::move(b.files);
  return head;
}

/// Writes summary.txt and every CSV under `dir`.
inline void write_bundle(const Bundle& b, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / "summary.txt") << b.summary_text();
  for (const auto& [name, body] : b.files) std::ofstream(fs::path(dir) / name) << body;
}

}  // namespace cachex
