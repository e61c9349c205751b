#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

fs::path scratch() {
  const fs::path d = fs::temp_directory_path() / ("cachex_cli_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

Result cli(const std::string& args) {
  const fs::path log = scratch() / "log.txt";
  const std::string cmd = std::string(CACHEX_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write(const std::string& name, const std::string& body) {
  const fs::path p = scratch() / name;
  std::ofstream(p) << body;
  return p;
}

const std::string kDir = CACHEX_SCENARIO_DIR;

const char* kScenario = R"([scenario]
name = "tiny"
experiment = "manual_flush"
policy = "none"
seed = 4

[geometry]
l2_ways = 4
l2_sets = 256
llc_ways = 8
llc_sets = 512
n_slices = 4

[experiment]
flush = [1, 3]
)";

std::string without(const std::string& s, const std::string& line) {
  const auto at = s.find(line);
  return at == std::string::npos ? s : s.substr(0, at) + s.substr(at + line.size() + 1);
}

std::string replaced(std::string s, const std::string& from, const std::string& to) {
  s.replace(s.find(from), from.size(), to);
  return s;
}

}  // namespace

TEST(Cli, ListsBundledScenarios) {
  const auto r = cli("list --dir " + kDir);
  EXPECT_EQ(r.code, 0);
  for (const auto& e : fs::directory_iterator(kDir)) EXPECT_NE(r.out.find(e.path().filename().string()), std::string::npos);
}

TEST(Cli, EveryBundledScenarioValidates) {
  for (const auto& e : fs::directory_iterator(kDir)) {
    const auto r = cli("validate --scenario " + e.path().string());
    EXPECT_EQ(r.code, 0) << e.path() << "\n" << r.out;
    EXPECT_EQ(r.out.rfind("ok: ", 0), 0u) << r.out;
  }
}

TEST(Cli, MissingGeometryKeyIsNamed) {
  const auto p = write("missing.toml", without(kScenario, "llc_sets = 512"));
  const auto r = cli("validate " + p.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("llc_sets"), std::string::npos) << r.out;
}

TEST(Cli, UnknownPolicyRejected) {
  const auto p = write("policy.toml", replaced(kScenario, "policy = \"none\"", "policy = \"lru-magic\""));
  const auto r = cli("run --scenario " + p.string() + " --out " + (scratch() / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("lru-magic"), std::string::npos) << r.out;
}

TEST(Cli, UnknownExperimentAndSyntaxErrors) {
  EXPECT_EQ(cli("validate " + write("exp.toml", replaced(kScenario, "\"manual_flush\"", "\"teleport\"")).string()).code, 2);
  const auto r = cli("validate " + write("syntax.toml", replaced(kScenario, "seed = 4", "seed 4")).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("line"), std::string::npos) << r.out;
  EXPECT_EQ(cli("validate " + (scratch() / "nope.toml").string()).code, 2);
  EXPECT_EQ(cli("run --bogus-flag").code, 2);
}

TEST(Cli, GeometryFileReplacesScenarioGeometry) {
  const auto g = write("geo.toml", "l2_ways = 4\nl2_sets = 256\nllc_ways = 6\nllc_sets = 512\nn_slices = 4\n");
  const auto p = write("geo_scn.toml", kScenario);
  const fs::path out = scratch() / "geo_out";
  const auto r = cli("run --scenario " + p.string() + " --geometry " + g.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(slurp(out / "summary.txt").find("detected = 1,3"), std::string::npos);
  const auto bad = write("geo_bad.toml", "l2_ways = 4\nl2_sets = 256\nllc_ways = 6\nn_slices = 4\n");
  const auto rb = cli("validate " + p.string() + " --geometry " + bad.string());
  EXPECT_EQ(rb.code, 2);
  EXPECT_NE(rb.out.find("llc_sets"), std::string::npos) << rb.out;
}

TEST(Cli, EqualSeedsGiveIdenticalBundles) {
  const std::string scn = kDir + "/monitor_polluter.toml";
  const fs::path a = scratch() / "a", b = scratch() / "b";
  ASSERT_EQ(cli("run " + scn + " --seed 9 --out " + a.string()).code, 0);
  ASSERT_EQ(cli("run " + scn + " --seed 9 --out " + b.string()).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path().filename();
    ++files;
  }
  EXPECT_GE(files, 4u);
  EXPECT_NE(slurp(a / "summary.txt").find("seed = 9"), std::string::npos);
}

TEST(Cli, DumpsOnRequest) {
  const auto p = write("dump.toml", kScenario);
  const fs::path out = scratch() / "dump";
  ASSERT_EQ(cli("run " + p.string() + " --dump-map --dump-state --out " + out.string()).code, 0);
  EXPECT_TRUE(fs::exists(out / "map.txt"));
  EXPECT_TRUE(fs::exists(out / "cache_state.csv"));
}

TEST(Cli, SubcommandsWriteTheirReports) {
  const auto p = write("sub.toml", kScenario);
  const fs::path hist = scratch() / "hist.csv";
  const auto r = cli("vcol " + p.string() + " --budget 64 --report " + hist.string() + " --out " + (scratch() / "v").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(hist).rfind("color,", 0), 0u);
  const auto b = cli("build-evsets " + p.string() + " --f 2 --max-offsets 1 --workers 2 --out " + (scratch() / "b").string());
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_TRUE(fs::exists(scratch() / "b" / "evsets.csv"));
  EXPECT_EQ(cli("vcol " + p.string()).code, 2);
}

TEST(Cli, PolicyCsvHeaders) {
  const auto p = write("both.toml", replaced(slurp(kDir + "/cap_poisoner.toml"), "policy = \"cap\"", "policy = \"cas+cap\""));
  const fs::path out = scratch() / "both";
  const auto r = cli("run " + p.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto place = slurp(out / "cap.placement.csv");
  EXPECT_EQ(place.rfind("interval,task,domain,tier\n0,0,", 0), 0u) << place.substr(0, 60);
  const auto pc = slurp(out / "cap.page_cache.csv");
  EXPECT_EQ(pc.rfind("interval,actor,hits,misses,alloc_color\n0,scan,", 0), 0u) << pc.substr(0, 60);
  EXPECT_EQ(slurp(out / "cap_unranked.page_cache.csv").find(",none\n"), std::string::npos);
}
