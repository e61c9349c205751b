#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "cachex/cachex.hpp"

#ifndef CACHEX_SCENARIO_DIR
#define CACHEX_SCENARIO_DIR "scenarios"
#endif

using namespace cachex;

namespace {

struct Common {
  std::string scenario;
  std::string geometry;
  std::string out;
  std::uint64_t seed = 0;
  bool has_seed = false;
  bool dump_map = false;
  bool dump_state = false;
};

void add_common(CLI::App* sc, Common& c, bool positional = true) {
  sc->add_option("--scenario", c.scenario, "scenario file");
  if (positional) sc->add_option("scenario_file", c.scenario, "scenario file");
  sc->add_option("--geometry", c.geometry, "geometry file replacing the scenario's [geometry]");
  sc->add_option("--out", c.out, "output directory");
  sc->add_option("--seed", c.seed, "seed override")->each([&](const std::string&) { c.has_seed = true; });
  sc->add_flag("--dump-map", c.dump_map, "write the GPA->HPA map");
  sc->add_flag("--dump-state", c.dump_state, "write the final cache contents");
}

ScenarioSpec load(const Common& c) {
  if (c.scenario.empty()) throw Error(Errc::validation, "no scenario given");
  ScenarioSpec s = load_scenario(c.scenario, c.geometry);
  if (c.has_seed) s.seed = c.seed;
  return s;
}

void set_param(ScenarioSpec& s, const std::string& k, const std::string& v) {
  ConfigValue cv;
  cv.text = v;
  s.params.values[k] = cv;
}

int emit(const Bundle& b, const Common& c, const ScenarioSpec& s) {
  const std::string dir = c.out.empty() ? "out/" + s.name : c.out;
  write_bundle(b, dir);
  std::cout << b.summary_text() << "bundle: " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cachex: simulated vCache probing, monitoring and placement policies"};
  app.require_subcommand(1);

  Common run_c, build_c, vcol_c, vscan_c, val_c;
  auto* run = app.add_subcommand("run", "run a scenario and write its bundle");
  add_common(run, run_c);

  auto* list = app.add_subcommand("list", "list bundled scenarios");
  std::string list_dir = CACHEX_SCENARIO_DIR;
  list->add_option("--dir", list_dir, "scenario directory");

  auto* validate = app.add_subcommand("validate", "check a scenario without running it");
  add_common(validate, val_c);

  auto* build = app.add_subcommand("build-evsets", "build color filters and LLC eviction sets");
  add_common(build, build_c);
  unsigned build_f = 0, build_workers = 0, build_offsets = 0;
  build->add_option("--f", build_f, "sets per (color, offset)");
  build->add_option("--workers", build_workers, "logical construction workers");
  build->add_option("--max-offsets", build_offsets, "page offsets to cover");

  auto* vcol = app.add_subcommand("vcol", "classify pages into colored free lists");
  add_common(vcol, vcol_c);
  std::uint64_t budget = 0;
  std::string report;
  vcol->add_option("--budget", budget, "pages to classify")->required();
  vcol->add_option("--report", report, "color histogram CSV");

  auto* vscan = app.add_subcommand("vscan", "monitor contention over the scenario duration");
  add_common(vscan, vscan_c);
  double interval = 0, window = 0;
  unsigned vscan_f = 0;
  vscan->add_option("--interval", interval, "ms between cycles");
  vscan->add_option("--window", window, "initial window in ms");
  vscan->add_option("--f", vscan_f, "sets per (color, offset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  Common* active = nullptr;
  try {
    if (*list) {
      std::vector<std::filesystem::path> files;
      for (const auto& ent : std::filesystem::directory_iterator(list_dir))
        if (ent.path().extension() == ".toml") files.push_back(ent.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        const ScenarioSpec s = load_scenario(f.string());
        std::cout << f.filename().string() << "\t" << s.name << "\t" << s.experiment << "\t" << s.policy << "\n";
      }
      return 0;
    }
    if (*validate) {
      active = &val_c;
      const ScenarioSpec s = load(val_c);
      std::cout << "ok: " << s.name << " (" << s.experiment << ", policy " << s.policy << ")\n";
      return 0;
    }
    if (*run) {
      active = &run_c;
      const ScenarioSpec s = load(run_c);
      return emit(run_scenario(s, RunOptions{run_c.dump_map, run_c.dump_state}), run_c, s);
    }
    if (*build) {
      active = &build_c;
      ScenarioSpec s = load(build_c);
      s.experiment = "build";
      if (build_f) set_param(s, "f", std::to_string(build_f));
      if (build_workers) set_param(s, "workers", std::to_string(build_workers));
      if (build_offsets) set_param(s, "max_offsets", std::to_string(build_offsets));
      return emit(run_scenario(s, RunOptions{build_c.dump_map, build_c.dump_state}), build_c, s);
    }
    if (*vcol) {
      active = &vcol_c;
      const ScenarioSpec s = load(vcol_c);
      const Bundle b = exp_vcol(s, RunOptions{vcol_c.dump_map, vcol_c.dump_state}, budget);
      if (!report.empty()) std::ofstream(report) << b.files.at("color_histogram.csv");
      return emit(b, vcol_c, s);
    }
    if (*vscan) {
      active = &vscan_c;
      ScenarioSpec s = load(vscan_c);
      s.experiment = "monitor";
      if (interval > 0) s.monitor.interval_ms = interval;
      if (window > 0) {
        s.monitor.window_ms = window;
        s.monitor.window_max_ms = std::max(s.monitor.window_max_ms, window);
        s.monitor.window_min_ms = std::min(s.monitor.window_min_ms, window);
      }
      if (vscan_f) s.monitor.f = vscan_f;
      s.monitor.validate();
      return emit(run_scenario(s, RunOptions{vscan_c.dump_map, vscan_c.dump_state}), vscan_c, s);
    }
  } catch (const InvariantAbort& e) {
    std::cerr << "invariant violated: " << e.what() << "\n";
    if (active) {
      const std::string dir = active->out.empty() ? "out/abort" : active->out;
      write_bundle(e.bundle(), dir);
      std::cerr << "state dumped to " << dir << "\n";
    }
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.code()) {
      case Errc::parse:
      case Errc::validation:
      case Errc::invalid_argument: return 2;
      case Errc::invariant: return 3;
      default: return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
