#pragma once

// Scenario descriptions, the simulated world a scenario runs in, and the
// artifact bundle it produces.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cachex/cache_model.hpp"
#include "cachex/common.hpp"
#include "cachex/config.hpp"
#include "cachex/evset.hpp"
#include "cachex/mem_model.hpp"
#include "cachex/parallel_build.hpp"
#include "cachex/probe.hpp"
#include "cachex/tenant_sim.hpp"
#include "cachex/timing.hpp"
#include "cachex/vcol.hpp"
#include "cachex/vscan.hpp"

namespace cachex {

inline const std::vector<std::string>& known_experiments() {
  static const std::vector<std::string> v{"coverage", "associativity", "color_id", "manual_flush",
                                          "window_sweep", "monitor", "fragmentation", "build"};
  return v;
}

inline const std::vector<std::string>& known_policies() {
  static const std::vector<std::string> v{"none", "cas", "cap", "cas+cap"};
  return v;
}

struct TenantSpec {
  std::string name;
  WorkloadKind kind = WorkloadKind::idle;
  unsigned domain = 0;
  bool own_vm = false;
  double rate = 0;
  std::uint64_t region_kb = 0;
  std::uint64_t stride = kLineSize;
  double start_ms = 0;
  double stop_ms = -1;  // < 0: runs to the end
  std::vector<unsigned> colors;  // LLC colors for a poisoner
  std::uint64_t pages = 0;       // reuse loop working set
  std::uint64_t budget = 0;      // page-cache budget of a file scan
  std::uint64_t file_pages = 0;  // file length of a file scan
};

struct VmSpec {
  unsigned vcpus_per_domain = 2;
  unsigned pool_scale = 3;
  ProbeConfig probe;
  unsigned calibrate_samples = 200;
};

struct ScenarioSpec {
  std::string name;
  std::string experiment = "monitor";
  std::string policy = "none";
  std::uint64_t seed = 1;
  double duration_ms = 1000;
  CacheGeometry geometry;
  LatencyModel latency;
  FragmentationProfile profile;
  std::uint64_t guest_pages = 0;  // 0 = sized to the experiment
  std::uint64_t host_pages = 0;
  VmSpec vm;
  MonitorConfig monitor;
  unsigned max_offsets = 2;
  /// Simulated tenant time before each cycle; 0 simulates whole intervals.
  double active_ms = 0;
  std::vector<TenantSpec> tenants;
  ConfigSection params;

  bool cas() const { return policy == "cas" || policy == "cas+cap"; }
  bool cap() const { return policy == "cap" || policy == "cas+cap"; }
};

inline Replacement parse_replacement(const std::string& s) {
  if (s == "lru") return Replacement::lru;
  if (s == "plru") return Replacement::plru;
  if (s == "random") return Replacement::random;
  throw Error(Errc::validation, "unknown replacement policy '" + s + "'");
}

inline CacheGeometry parse_geometry(const ConfigSection& sec) {
  CacheGeometry g;
  const std::string preset = sec.str("preset", "");
  if (preset.empty()) {
    for (const char* k : {"l2_ways", "l2_sets", "llc_ways", "llc_sets", "n_slices"}) sec.at(k);
  } else if (preset != "table1") {
    throw Error(Errc::validation, "unknown geometry preset '" + preset + "'");
  }
  auto u = [&](const char* k, unsigned def) { return static_cast<unsigned>(sec.uint(k, def)); };
  g.l2_ways = u("l2_ways", g.l2_ways);
  g.l2_sets = u("l2_sets", g.l2_sets);
  g.llc_ways = u("llc_ways", g.llc_ways);
  g.llc_sets = u("llc_sets", g.llc_sets);
  g.n_slices = u("n_slices", g.n_slices);
  g.n_domains = u("n_domains", g.n_domains);
  g.cores_per_domain = u("cores_per_domain", g.cores_per_domain);
  g.replacement = parse_replacement(sec.str("replacement", "lru"));
  const std::string inc = sec.str("inclusivity", "non_inclusive");
  if (inc == "inclusive")
    g.inclusivity = Inclusivity::inclusive;
  else if (inc == "non_inclusive")
    g.inclusivity = Inclusivity::non_inclusive;
  else
    throw Error(Errc::validation, "unknown inclusivity '" + inc + "'");
  try {
    g.validate();
  } catch (const Error& e) {
    throw Error(Errc::validation, e.what());
  }
  return g;
}

/// Reads a scenario. `geometry_override` replaces the [geometry] section.
inline ScenarioSpec parse_scenario(const Config& cfg, const Config* geometry_override = nullptr) {
  ScenarioSpec s;
  const ConfigSection& sc = cfg.section("scenario");
  s.name = sc.str("name", "unnamed");
  s.experiment = sc.str("experiment", "monitor");
  if (std::find(known_experiments().begin(), known_experiments().end(), s.experiment) == known_experiments().end())
    throw Error(Errc::validation, ConfigSection::where(sc.at("experiment")) + "unknown experiment '" + s.experiment + "'");
  s.policy = sc.str("policy", "none");
  if (std::find(known_policies().begin(), known_policies().end(), s.policy) == known_policies().end())
    throw Error(Errc::validation, ConfigSection::where(sc.at("policy")) + "unknown policy '" + s.policy + "'");
  s.seed = sc.uint("seed", 1);
  s.duration_ms = sc.num("duration_ms", 1000);
  if (!(s.duration_ms > 0)) throw Error(Errc::validation, "duration_ms must be > 0");

  if (geometry_override) {
    const ConfigSection* g = geometry_override->find("geometry");
    if (!g) g = geometry_override->find("");
    if (!g) throw Error(Errc::validation, geometry_override->origin() + ": no geometry keys");
    s.geometry = parse_geometry(*g);
  } else {
    s.geometry = parse_geometry(cfg.section("geometry"));
  }

  if (const auto* t = cfg.find("timing")) {
    s.latency.l2 = t->num("l2", s.latency.l2);
    s.latency.llc = t->num("llc", s.latency.llc);
    s.latency.mem = t->num("mem", s.latency.mem);
    s.latency.jitter = t->num("jitter", s.latency.jitter);
    s.latency.spike_prob_cold = t->num("spike_prob", s.latency.spike_prob_cold);
    s.latency.spike = t->num("spike", s.latency.spike);
    s.latency.ghz = t->num("ghz", s.latency.ghz);
    try {
      s.latency.validate();
    } catch (const Error& e) {
      throw Error(Errc::validation, e.what());
    }
  }

  if (const auto* m = cfg.find("memory")) {
    const std::string mode = m->str("mode", "contiguous");
    if (mode == "contiguous")
      s.profile = FragmentationProfile::contiguous();
    else if (mode == "fragmented")
      s.profile = FragmentationProfile::fragmented(m->num("shuffle", 1.0));
    else
      throw Error(Errc::validation, ConfigSection::where(m->at("mode")) + "unknown memory mode '" + mode + "'");
    if (m->has("allowed_l2_colors")) {
      std::uint32_t mask = 0;
      for (auto c : m->uints("allowed_l2_colors")) {
        if (c >= 16) throw Error(Errc::validation, "allowed_l2_colors entries must be < 16");
        mask |= 1u << c;
      }
      s.profile.allowed_l2_colors = mask;
    }
    if (s.profile.shuffle < 0 || s.profile.shuffle > 1) throw Error(Errc::validation, "shuffle must be in [0,1]");
    s.guest_pages = m->uint("guest_pages", 0);
    s.host_pages = m->uint("host_pages", 0);
  }

  if (const auto* v = cfg.find("vm")) {
    s.vm.vcpus_per_domain = static_cast<unsigned>(v->uint("vcpus_per_domain", s.vm.vcpus_per_domain));
    s.vm.pool_scale = static_cast<unsigned>(v->uint("pool_scale", s.vm.pool_scale));
    s.vm.probe.rounds = static_cast<unsigned>(v->uint("rounds", s.vm.probe.rounds));
    s.vm.probe.votes = static_cast<unsigned>(v->uint("votes", s.vm.probe.votes));
    s.vm.probe.confirm = static_cast<unsigned>(v->uint("confirm", s.vm.probe.confirm));
    s.vm.probe.retries = static_cast<unsigned>(v->uint("retries", s.vm.probe.retries));
    s.vm.probe.mlp = v->num("mlp", s.vm.probe.mlp);
    s.vm.calibrate_samples = static_cast<unsigned>(v->uint("calibrate_samples", s.vm.calibrate_samples));
    if (s.vm.pool_scale < 1 || s.vm.probe.rounds < 1 || s.vm.probe.votes < 1 || s.vm.probe.confirm < 1)
      throw Error(Errc::validation, "[vm] pool_scale, rounds, votes and confirm must be >= 1");
  }
  if (s.vm.vcpus_per_domain < 2 || s.vm.vcpus_per_domain > s.geometry.cores_per_domain)
    throw Error(Errc::validation, "vcpus_per_domain must be in [2, cores_per_domain]");

  if (const auto* m = cfg.find("monitor")) {
    auto& mc = s.monitor;
    mc.interval_ms = m->num("interval_ms", mc.interval_ms);
    mc.window_ms = m->num("window_ms", mc.window_ms);
    mc.window_min_ms = m->num("window_min_ms", mc.window_min_ms);
    mc.window_max_ms = m->num("window_max_ms", std::max(mc.window_max_ms, mc.window_ms));
    mc.shrink_step_ms = m->num("shrink_step_ms", mc.shrink_step_ms);
    mc.f = static_cast<unsigned>(m->uint("f", mc.f));
    mc.alpha = m->num("alpha", mc.alpha);
    mc.full_threshold = m->num("full_threshold", mc.full_threshold);
    mc.workers = static_cast<unsigned>(m->uint("workers", mc.workers));
    mc.preempt_prob = m->num("preempt_prob", mc.preempt_prob);
    mc.preempt_ms = m->num("preempt_ms", mc.preempt_ms);
    s.max_offsets = static_cast<unsigned>(m->uint("max_offsets", s.max_offsets));
    s.active_ms = m->num("active_ms", s.active_ms);
  }
  try {
    s.monitor.validate();
  } catch (const Error& e) {
    throw Error(Errc::validation, e.what());
  }
  if (s.max_offsets < 1 || s.max_offsets > kLinesPerPage) throw Error(Errc::validation, "max_offsets must be in [1, 64]");

  for (const ConfigSection* t : cfg.with_prefix("tenant")) {
    TenantSpec ts;
    ts.name = t->name.substr(7);
    const std::string kind = t->str("kind");
    const auto k = parse_workload_kind(kind);
    if (!k) throw Error(Errc::validation, ConfigSection::where(t->at("kind")) + "unknown workload kind '" + kind + "'");
    ts.kind = *k;
    ts.domain = static_cast<unsigned>(t->uint("domain", 0));
    if (ts.domain >= s.geometry.n_domains)
      throw Error(Errc::validation, "[" + t->name + "] domain " + std::to_string(ts.domain) + " out of range");
    ts.own_vm = t->flag("own_vm", ts.kind == WorkloadKind::file_scan || ts.kind == WorkloadKind::reuse_loop);
    ts.rate = t->num("rate", 0);
    ts.region_kb = t->uint("region_kb", 0);
    ts.stride = t->uint("stride", kLineSize);
    ts.start_ms = t->num("start_ms", 0);
    ts.stop_ms = t->num("stop_ms", -1);
    if (t->has("colors"))
      for (auto c : t->uints("colors")) ts.colors.push_back(static_cast<unsigned>(c));
    if (t->has("l2_color")) {
      const auto c = static_cast<unsigned>(t->uint("l2_color"));
      ts.colors.push_back(c % 16);
      ts.colors.push_back(c % 16 + 16);
    }
    ts.pages = t->uint("pages", 0);
    ts.budget = t->uint("budget", 0);
    ts.file_pages = t->uint("file_pages", 0);
    if (ts.rate < 0) throw Error(Errc::validation, "[" + t->name + "] rate must be >= 0");
    if (ts.kind == WorkloadKind::reuse_loop && ts.pages == 0)
      throw Error(Errc::validation, "[" + t->name + "] reuse_loop needs pages");
    if (ts.kind == WorkloadKind::file_scan && (ts.budget == 0 || ts.file_pages == 0))
      throw Error(Errc::validation, "[" + t->name + "] file_scan needs budget and file_pages");
    if ((ts.kind == WorkloadKind::polluter || ts.kind == WorkloadKind::noise || ts.kind == WorkloadKind::poisoner) &&
        ts.region_kb == 0)
      throw Error(Errc::validation, "[" + t->name + "] needs region_kb");
    if (ts.kind == WorkloadKind::poisoner && ts.colors.empty())
      throw Error(Errc::validation, "[" + t->name + "] poisoner needs colors or l2_color");
    s.tenants.push_back(std::move(ts));
  }
  // Core budget per domain: the VM's vCPUs plus one core per foreign tenant.
  for (unsigned d = 0; d < s.geometry.n_domains; ++d) {
    unsigned foreign = 0, own = 0;
    for (const auto& t : s.tenants)
      if (t.domain == d) (t.own_vm ? own : foreign) += 1;
    if (s.vm.vcpus_per_domain + foreign > s.geometry.cores_per_domain)
      throw Error(Errc::validation, "domain " + std::to_string(d) + " has too few cores for its tenants");
    if (own + 2 > s.vm.vcpus_per_domain)
      throw Error(Errc::validation, "domain " + std::to_string(d) + " has too few vCPUs for own-VM workloads");
  }

  if (const auto* e = cfg.find("experiment")) s.params = *e;
  s.params.name = "experiment";
  return s;
}

inline ScenarioSpec load_scenario(const std::string& path, const std::string& geometry_path = {}) {
  const Config cfg = Config::load(path);
  if (geometry_path.empty()) return parse_scenario(cfg);
  const Config g = Config::load(geometry_path);
  return parse_scenario(cfg, &g);
}

// ---------------------------------------------------------------------------

/// Ordered `key = value` summary plus named CSV files.
struct Bundle {
  std::vector<std::pair<std::string, std::string>> summary;
  std::map<std::string, std::string> files;

  void put(const std::string& k, const std::string& v) {
    for (auto& kv : summary)
      if (kv.first == k) {
        kv.second = v;
        return;
      }
    summary.emplace_back(k, v);
  }
  void put(const std::string& k, double v) { put(k, fmt(v)); }
  void put(const std::string& k, std::uint64_t v) { put(k, std::to_string(v)); }
  void put(const std::string& k, unsigned v) { put(k, std::to_string(v)); }
  void put(const std::string& k, int v) { put(k, std::to_string(v)); }
  void put(const std::string& k, bool v) { put(k, std::string(v ? "true" : "false")); }
  void put(const std::string& k, const char* v) { put(k, std::string(v)); }

  std::optional<std::string> get(const std::string& k) const {
    for (const auto& kv : summary)
      if (kv.first == k) return kv.second;
    return std::nullopt;
  }
  double num(const std::string& k) const {
    auto v = get(k);
    if (!v) throw Error(Errc::invalid_argument, "summary has no key " + k);
    return std::stod(*v);
  }

  std::string summary_text() const {
    std::string out;
    for (const auto& [k, v] : summary) out += k + " = " + v + "\n";
    return out;
  }

  bool operator==(const Bundle&) const = default;

  static std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
  }
};

struct RunOptions {
  bool dump_map = false;
  bool dump_state = false;
};

/// Mid-run invariant failure; carries whatever the run produced plus dumps.
class InvariantAbort : public Error {
 public:
  InvariantAbort(const std::string& what, Bundle partial) : Error(Errc::invariant, what), bundle_(std::move(partial)) {}
  const Bundle& bundle() const { return bundle_; }

 private:
  Bundle bundle_;
};

// ---------------------------------------------------------------------------

/// One host with one monitoring VM. Per domain the VM owns the first
/// `vcpus_per_domain` cores; vCPU 0 constructs, vCPU 1 is its helper and the
/// rest host the VM's own workloads. Foreign tenants take the cores after.
class World {
 public:
  World(const CacheGeometry& g, const FragmentationProfile& prof, std::uint64_t guest_pages, const LatencyModel& lat,
        const VmSpec& vm, std::uint64_t seed, std::uint64_t host_pages = 0)
      : g_(g), cache_(g, derive_seed(seed, 1)),
        map_(build_translation(prof, guest_pages, derive_seed(seed, 2), host_pages)),
        alloc_(guest_pages, derive_seed(seed, 3)), lat_(lat), vm_(vm), seed_(seed) {
    if (vm.vcpus_per_domain < 2 || vm.vcpus_per_domain > g.cores_per_domain)
      throw Error(Errc::validation, "vcpus_per_domain must be in [2, cores_per_domain]");
    next_core_.assign(g.n_domains, vm.vcpus_per_domain);
    next_vcpu_.assign(g.n_domains, 2);
    for (unsigned d = 0; d < g.n_domains; ++d)
      for (unsigned v = 0; v < vm.vcpus_per_domain; ++v)
        vcpus_.push_back(cache_.register_actor(d * g.cores_per_domain + v, "vm." + std::to_string(d) + "." + std::to_string(v)));
    scratch_ = alloc_.alloc();
    for (unsigned d = 0; d < g.n_domains; ++d) {
      probers_.push_back(std::make_unique<Prober>(cache_, map_, vcpu(d, 0), vcpu(d, 1), lat, vm.probe, derive_seed(seed, 4, d)));
      probers_.back()->calibrate(scratch_ << kPageBits, vm.calibrate_samples);
    }
  }

  World(const World&) = delete;
  World& operator=(const World&) = delete;

  /// Guest size that fits both construction pools, `extra` pages and slack.
  static std::uint64_t guest_pages_for(const CacheGeometry& g, unsigned pool_scale, std::uint64_t extra = 0,
                                       std::uint64_t at_least = 0) {
    const std::uint64_t need = pool_size(g, Level::L2, pool_scale) + pool_size(g, Level::LLC, pool_scale) + extra + 64;
    std::uint64_t n = std::max<std::uint64_t>({need + need / 4, at_least, 1024});
    return (n + 15) / 16 * 16;
  }

  const CacheGeometry& geometry() const { return g_; }
  CacheState& cache() { return cache_; }
  const TranslationMap& map() const { return map_; }
  GuestAllocator& allocator() { return alloc_; }
  const VmSpec& vm() const { return vm_; }
  std::uint64_t seed() const { return seed_; }
  const LatencyModel& latency() const { return lat_; }

  ActorId vcpu(unsigned domain, unsigned i) const { return vcpus_.at(domain * vm_.vcpus_per_domain + i); }
  unsigned n_vcpus() const { return static_cast<unsigned>(vcpus_.size()); }
  Prober& prober(unsigned domain = 0) { return *probers_.at(domain); }
  ProberSet prober_set() {
    ProberSet ps;
    for (auto& p : probers_) ps.push_back(p.get());
    return ps;
  }

  TimeNs now() const {
    TimeNs t = 0;
    for (const auto& p : probers_) t = std::max(t, p->now());
    return t;
  }
  void set_now(TimeNs t) {
    for (auto& p : probers_) p->set_now(t);
  }

  /// Registers a foreign tenant on the next free core of `domain`.
  ActorId tenant_core(unsigned domain, const std::string& name) {
    if (next_core_.at(domain) >= g_.cores_per_domain)
      throw Error(Errc::validation, "domain " + std::to_string(domain) + " has no free core for " + name);
    return cache_.register_actor(domain * g_.cores_per_domain + next_core_[domain]++, name);
  }

  /// Hands out the next spare VM vCPU of `domain`.
  ActorId vm_thread(unsigned domain) {
    if (next_vcpu_.at(domain) >= vm_.vcpus_per_domain)
      throw Error(Errc::validation, "domain " + std::to_string(domain) + " has no spare vCPU");
    return vcpu(domain, next_vcpu_[domain]++);
  }

  /// Replaces the translation; probers see the new backing at once.
  void set_map(const TranslationMap& m) { map_ = m; }

  const std::vector<ColorFilter>& filters() const { return filters_; }
  const std::vector<std::uint64_t>& filter_pages() const { return filter_pages_; }

  /// Builds the L2 color filters from a fresh pool (or the previous pool).
  const std::vector<ColorFilter>& build_filters(bool reuse_pool = false) {
    if (!reuse_pool || filter_pages_.empty())
      filter_pages_ = alloc_.alloc_n(pool_size(g_, Level::L2, vm_.pool_scale));
    filters_ = build_color_filters(prober(0), filter_pages_);
    return filters_;
  }

  std::optional<unsigned> classify(std::uint64_t page, ClassifyStats* st = nullptr) {
    return classify_page(prober(0), page, filters_, 2, st);
  }

  /// Allocates the LLC construction pool and groups it by virtual color.
  std::vector<std::vector<std::uint64_t>> classify_pool(ClassifyStats* st = nullptr) {
    std::vector<std::vector<std::uint64_t>> groups(filters_.size());
    for (auto page : alloc_.alloc_n(pool_size(g_, Level::LLC, vm_.pool_scale)))
      if (auto c = classify(page, st)) groups[*c].push_back(page);
    return groups;
  }

  ParallelReport build_sets(std::span<const std::vector<std::uint64_t>> groups, unsigned f, unsigned max_offsets,
                            unsigned workers, bool use_oracle = true) {
    ParallelConfig pc;
    pc.f = f;
    pc.workers = workers;
    pc.max_offsets = max_offsets;
    pc.seed = derive_seed(seed_, 5);
    return build_parallel(prober(0), groups, pc, use_oracle ? &map_ : nullptr);
  }

  /// Every non-duplicate set, monitored once per domain.
  std::vector<MonitoredSet> monitored_sets(const ParallelReport& rep) const {
    std::vector<MonitoredSet> out;
    for (const auto& e : rep.sets) {
      if (e.duplicate) continue;
      for (unsigned d = 0; d < g_.n_domains; ++d) out.push_back(MonitoredSet{e, static_cast<unsigned>(e.color), d});
    }
    return out;
  }

  /// True LLC zone (HPA L2 color bits) of a guest address.
  unsigned zone_of_gva(std::uint64_t gva) const {
    return static_cast<unsigned>(bits(map_.gva_to_hpa(gva), kPageBits + g_.uncontrollable_bits(Level::L2) - 1, kPageBits));
  }
  unsigned zone_of_hpa(std::uint64_t hpa) const {
    const unsigned b = g_.uncontrollable_bits(Level::L2);
    return b ? static_cast<unsigned>(bits(hpa, kPageBits + b - 1, kPageBits)) : 0;
  }

  /// Throws InvariantAbort (with dumps) if the cache or the map is corrupt.
  void check(const std::string& module, Bundle& b, const RunOptions& o) const {
    if (o.dump_map) add_map_dump(b);
    if (o.dump_state) add_state_dump(b);
    std::string bad;
    if (!cache_.unique_lines()) bad = "cache-model: a line is resident twice in one set";
    if (!map_.injective()) bad = "mem-model: translation lost injectivity";
    if (bad.empty()) return;
    add_map_dump(b);
    add_state_dump(b);
    throw InvariantAbort(module + ": " + bad, b);
  }

  void add_map_dump(Bundle& b) const {
    std::ostringstream os;
    map_.dump(os);
    b.files["map.txt"] = os.str();
  }
  void add_state_dump(Bundle& b) const {
    std::ostringstream os;
    cache_.dump_csv(os);
    b.files["cache_state.csv"] = os.str();
  }

 private:
  CacheGeometry g_;
  CacheState cache_;
  TranslationMap map_;
  GuestAllocator alloc_;
  LatencyModel lat_;
  VmSpec vm_;
  std::uint64_t seed_;
  std::vector<ActorId> vcpus_;
  std::vector<unsigned> next_core_;
  std::vector<unsigned> next_vcpu_;
  std::uint64_t scratch_ = 0;
  std::vector<std::unique_ptr<Prober>> probers_;
  std::vector<ColorFilter> filters_;
  std::vector<std::uint64_t> filter_pages_;
};

}  // namespace cachex
