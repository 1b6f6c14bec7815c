#include <doctest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
  int status = -1;
  std::string out;
};

// stdout is captured; stderr is discarded so messages do not mix into the output.
Result tallysim(const std::string& args) {
  const std::string cmd = std::string("\"") + TALLYSIM_EXE + "\" " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string sample(const std::string& name) { return std::string(TALLY_SAMPLES_DIR) + "/" + name; }

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tallysim_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// A small two-task experiment that runs in well under a second.
fs::path small_config(const fs::path& dir) {
  const auto path = dir / "cfg.json";
  write(path, R"({
    "schema_version": 1,
    "workloads": [{"suite": "bert-like"}, {"suite": "train-short"}],
    "traces": {"bert-like": {"load": 0.3}},
    "scheduler": {"policies": ["tally", "eager"]},
    "seed": 8,
    "duration_s": 1,
    "profile_runs": 2,
    "outputs": {"dir": "out", "event_log": true}
  })");
  return path;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("slice 1/4 of a 16-block kernel gives offsets 0, 4, 8, 12") {
    const auto dir = scratch("slice");
    const auto r = tallysim("transform " + sample("blocks16.ir") + " --pass slice --fraction 1/4 -o " +
                            (dir / "sliced.ir").string());
    REQUIRE(r.status == 0);
    const auto table = json::parse(r.out);
    CHECK(table["schema_version"] == 1);
    REQUIRE(table["sub_launches"].size() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(table["sub_launches"][i]["block_offset"][0] == 4 * i);
      CHECK(table["sub_launches"][i]["grid"][0] == 4);
    }
    CHECK(read(dir / "sliced.ir").find("kernel blocks16") != std::string::npos);
  }

  TEST_CASE("ptb needs unified synchronization; the chain unify-sync then ptb succeeds") {
    CHECK(tallysim("transform " + sample("witness.ir") + " --pass ptb --workers 2").status == 3);
    const auto r = tallysim("transform " + sample("witness.ir") + " --pass unify-sync --pass ptb --workers 2");
    CHECK(r.status == 0);
    CHECK(r.out.find("__ptb_counter") != std::string::npos);
  }

  TEST_CASE("an inter-block-dependent kernel is never transformed") {
    CHECK(tallysim("transform " + sample("cooperative.ir") + " --pass slice --fraction 1/2").status == 3);
    CHECK(tallysim("transform " + sample("cooperative.ir") + " --pass unify-sync --pass ptb --workers 2").status == 3);
  }

  TEST_CASE("an IR parse error exits 2") {
    const auto dir = scratch("parse");
    write(dir / "bad.ir", "kernel k\ngrid 1 1 1\nblock 1 1 1\n  FROB r0\n");
    CHECK(tallysim("transform " + (dir / "bad.ir").string() + " --pass unify-sync").status == 2);
    CHECK(tallysim("interpret " + (dir / "bad.ir").string() + " " + sample("vector_add.launch.json")).status == 2);
  }

  TEST_CASE("interpret vector_add prints the summed output deterministically") {
    const auto cmd = "interpret " + sample("vector_add.ir") + " " + sample("vector_add.launch.json");
    const auto r = tallysim(cmd);
    REQUIRE(r.status == 0);
    CHECK(r.out.starts_with("status=Completed\n"));
    for (int i = 0; i < 8; ++i) {
      CHECK(r.out.find("\n" + std::to_string(16 + i) + "," + std::to_string(i + 1) + "\n") != std::string::npos);
    }
    CHECK(tallysim(cmd).out == r.out);
    CHECK(tallysim(cmd + " --seed 12345").out == r.out);
  }

  TEST_CASE("interpret the divergence witness exits nonzero with DivergentBarrier") {
    const auto r = tallysim("interpret " + sample("witness.ir") + " " + sample("witness.launch.json"));
    CHECK(r.status == 4);
    CHECK(r.out.find("status=DivergentBarrier") != std::string::npos);
  }

  TEST_CASE("run with an invalid config exits 2 and writes nothing") {
    const auto dir = scratch("badcfg");
    write(dir / "cfg.json", R"({"schema_version": 1, "workloads": [{"suite": "train-short"}]})");
    CHECK(tallysim("run " + (dir / "cfg.json").string()).status == 2);
    CHECK(tallysim("run " + (dir / "missing.json").string()).status == 2);
    CHECK(tallysim("run " + small_config(dir).string() + " --policy mps").status == 2);
    CHECK(tallysim("run " + small_config(dir).string() + " --load 1.5").status == 2);
    CHECK(tallysim("run").status == 2);
    CHECK_FALSE(fs::exists(dir / "out"));
  }

  TEST_CASE("run writes metrics, events and a manifest that reproduces the run") {
    const auto dir = scratch("run");
    const auto cfg = small_config(dir);
    REQUIRE(tallysim("run " + cfg.string()).status == 0);
    const auto out = dir / "out";
    const auto metrics = read(out / "metrics.csv");
    CHECK(metrics.starts_with("policy,task,p99_ms,norm_throughput,system_throughput\n"));
    CHECK(read(out / "events_tally.csv").starts_with("time_ns,kind,task,kernel,block\n"));
    CHECK(fs::exists(out / "events_eager.csv"));
    const auto manifest = json::parse(read(out / "manifest.json"));
    CHECK(manifest["seed"] == 8);
    CHECK(manifest["config_hash"].get<std::string>().size() == 64);
    for (const auto& e : fs::directory_iterator(out)) CHECK(e.path().extension() != ".tmp");

    const auto again = dir / "again";
    REQUIRE(tallysim("run " + (out / "manifest.json").string() + " --out-dir " + again.string()).status == 0);
    CHECK(read(again / "metrics.csv") == metrics);
    CHECK(read(again / "events_tally.csv") == read(out / "events_tally.csv"));
    CHECK(json::parse(read(again / "manifest.json"))["config_hash"] == manifest["config_hash"]);
  }

  TEST_CASE("flag overrides change the recorded config") {
    const auto dir = scratch("flags");
    const auto cfg = small_config(dir);
    REQUIRE(tallysim("run " + cfg.string() + " --policy kernel-priority --seed 9 --threshold-ms 0.5 --duration-s 0.5 --load 0.2 --out-dir " +
                     (dir / "o").string())
                .status == 0);
    const auto m = json::parse(read(dir / "o" / "manifest.json"));
    CHECK(m["seed"] == 9);
    const auto metrics = read(dir / "o" / "metrics.csv");
    CHECK(metrics.find("kernel-priority,bert-like,") != std::string::npos);
    CHECK(metrics.find("tally,") == std::string::npos);
  }

  TEST_CASE("sweep writes one row group per axis value") {
    const auto dir = scratch("sweep");
    const auto cfg = small_config(dir);
    REQUIRE(tallysim("sweep " + cfg.string() + " --axis threshold --values 0.1,1 --policy tally --duration-s 0.5 --out-dir " +
                     (dir / "s").string())
                .status == 0);
    const auto csv = read(dir / "s" / "sweep_threshold.csv");
    CHECK(csv.starts_with("axis,value,policy,task,p99_ms,norm_throughput,system_throughput\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2);
    CHECK(tallysim("sweep " + cfg.string() + " --axis bogus").status == 2);
    CHECK(tallysim("sweep " + cfg.string() + " --axis load --values 1.2").status == 2);
  }

  TEST_CASE("profile prints candidates and dumps a cache") {
    const auto dir = scratch("profile");
    const auto cfg = small_config(dir);
    const auto r = tallysim("profile " + cfg.string() + " --out-dir " + (dir / "p").string());
    REQUIRE(r.status == 0);
    CHECK(r.out.find("ptb") != std::string::npos);
    const auto cache = json::parse(read(dir / "p" / "profile_cache.json"));
    CHECK(cache["schema_version"] == 1);
  }
}
