#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <nlohmann/json.hpp>
#include <sstream>

#include "tally/config.hpp"
#include "tally/experiment.hpp"

using namespace tally;
using namespace tally::config;
using namespace tally::experiment;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json base_doc() {
  return json::parse(R"({
    "schema_version": 1,
    "workloads": [{"suite": "bert-like"}, {"suite": "train-short"}],
    "traces": {"bert-like": {"load": 0.5}},
    "scheduler": {"policies": ["tally", "kernel-priority"]},
    "seed": 3,
    "duration_s": 2,
    "profile_runs": 2
  })");
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tally_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("a minimal config parses with defaults") {
    const auto cfg = parse_config(base_doc().dump());
    CHECK(cfg.gpu == workloads::suite::desk_gpu());
    CHECK(cfg.workloads.size() == 2);
    CHECK(cfg.high_priority().name == "bert-like");
    CHECK(cfg.policies.size() == 2);
    CHECK(cfg.threshold == profiler::kDefaultThreshold);
    CHECK(cfg.quantum == 2ms);
    CHECK(cfg.duration == 2s);
    CHECK(cfg.profile_runs == 2);
  }

  TEST_CASE("explicit workloads, IR-bound kernels and trace files") {
    const auto cfg = load_config(std::string(TALLY_CONFIGS_DIR) + "/trace_replay.json");
    REQUIRE(cfg.workloads.size() == 2);
    const auto& head = cfg.workloads[0].kernels[2];
    CHECK(head.name == "head");
    CHECK(head.grid == ir::Dim3{4, 1, 1});
    CHECK(head.cost.threads_per_block == 2);
    CHECK(cfg.workloads[1].kernels[1].cost.threads_per_block == 256);
    CHECK(cfg.traces.at("small-infer").file->ends_with("traces/bursty.csv"));
  }

  TEST_CASE("every shipped config validates") {
    for (const auto& e : fs::directory_iterator(TALLY_CONFIGS_DIR)) {
      if (e.path().extension() != ".json") continue;
      CAPTURE(e.path().string());
      CHECK_NOTHROW(load_config(e.path().string()));
    }
  }

  TEST_CASE("validation failures") {
    auto expect_error = [](json doc, const std::string& needle) {
      CAPTURE(needle);
      CHECK_THROWS_WITH_AS(parse_config(doc.dump()), doctest::Contains(needle.c_str()), ConfigError);
    };
    auto d = base_doc();
    d["schema_version"] = 2;
    expect_error(d, "schema_version");
    d = base_doc();
    d["workloads"][1]["priority"] = "high";
    expect_error(d, "exactly one high-priority");
    d = base_doc();
    d["workloads"][0]["priority"] = "best-effort";
    expect_error(d, "exactly one high-priority");
    d = base_doc();
    d["traces"] = json::object();
    expect_error(d, "has no trace");
    d = base_doc();
    d["traces"]["bert-like"]["load"] = 1.5;
    expect_error(d, "load must lie");
    d = base_doc();
    d["traces"]["bert-like"] = {{"file", "/nonexistent/trace.csv"}};
    expect_error(d, "does not exist");
    d = base_doc();
    d["scheduler"]["policies"] = {"mps"};
    expect_error(d, "unknown policy");
    d = base_doc();
    d["scheduler"]["threshold_ms"] = 0;
    expect_error(d, "threshold");
    d = base_doc();
    d["bogus"] = 1;
    expect_error(d, "unknown field");
    d = base_doc();
    d["workloads"].push_back({{"suite", "train-short"}});
    expect_error(d, "duplicate name");
    d = base_doc();
    d["workloads"][1] = {{"name", "x"}, {"kind", "training"}, {"kernels", {{{"name", "k"}, {"block_us", 10}, {"blocks", 4}, {"threads_per_block", 4096}}}}};
    expect_error(d, "does not fit");
    d = base_doc();
    d["duration_s"] = 0;
    expect_error(d, "duration_s");
    CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  }

  TEST_CASE("canonical JSON round trips and the hash tracks content, not the output dir") {
    const auto cfg = parse_config(base_doc().dump());
    const auto again = parse_config(to_json(cfg));
    CHECK(to_json(again) == to_json(cfg));
    CHECK(config_hash(again) == config_hash(cfg));
    CHECK(config_hash(cfg).size() == 64);
    auto moved = cfg;
    moved.out_dir = "/elsewhere";
    CHECK(config_hash(moved) == config_hash(cfg));
    auto reseeded = cfg;
    reseeded.seed = 4;
    CHECK(config_hash(reseeded) != config_hash(cfg));
  }
}

TEST_SUITE("experiment") {
  TEST_CASE("write-then-rename leaves no partial file behind") {
    const auto dir = scratch("atomic");
    {
      OutputFile f((dir / "a.csv").string());
      f.stream() << "partial";
      CHECK(fs::exists(dir / "a.csv.tmp"));
      CHECK_FALSE(fs::exists(dir / "a.csv"));
    }
    CHECK_FALSE(fs::exists(dir / "a.csv.tmp"));
    CHECK_FALSE(fs::exists(dir / "a.csv"));
    write_file_atomic((dir / "b.csv").string(), "x\n");
    CHECK(read(dir / "b.csv") == "x\n");
    CHECK_FALSE(fs::exists(dir / "b.csv.tmp"));
  }

  TEST_CASE("HP alone under Tally matches its calibration p99 within 1%") {
    auto doc = base_doc();
    doc["workloads"] = json::array({{{"suite", "bert-like"}}});
    doc["scheduler"]["policies"] = {"tally"};
    doc["duration_s"] = 10;
    const auto report = run_experiment(parse_config(doc.dump()));
    const auto& t = report.result(sched::PolicyKind::Tally).metrics.tasks.at(0);
    const auto cal = *report.standalone_p99.at("bert-like");
    CHECK(static_cast<double>(t.p99->count()) == doctest::Approx(static_cast<double>(cal.count())).epsilon(0.01));
    CHECK(t.normalized_throughput == doctest::Approx(1.0));
  }

  TEST_CASE("metrics rows: one per (policy, task), p99 empty for training tasks") {
    const auto report = run_experiment(parse_config(base_doc().dump()));
    const auto rows = metrics_rows(report);
    CHECK(count_lines(rows) == 4);
    std::istringstream in(rows);
    std::string line;
    std::getline(in, line);
    CHECK(line.starts_with("tally,bert-like,"));
    std::getline(in, line);
    CHECK(line.starts_with("tally,train-short,,"));
    for (const auto& r : report.results) {
      double sum = 0;
      for (const auto& t : r.metrics.tasks) {
        sum += t.normalized_throughput;
        CHECK(t.normalized_throughput <= 1.02);
      }
      CHECK(r.metrics.system_throughput == doctest::Approx(sum));
    }
  }

  TEST_CASE("same config and seed give byte-identical outputs, serial or parallel") {
    auto cfg = parse_config(base_doc().dump());
    cfg.event_log = true;
    const auto d1 = scratch("det1");
    const auto d2 = scratch("det2");
    cfg.out_dir = d1.string();
    const auto w1 = run_and_write(cfg, ExecutionMode::Parallel);
    cfg.out_dir = d2.string();
    const auto w2 = run_and_write(cfg, ExecutionMode::Serial);
    CHECK(w1.files == w2.files);
    for (const auto& f : w1.files) {
      CAPTURE(f);
      const auto a = read(d1 / f);
      CHECK(!a.empty());
      if (f == "manifest.json") continue;  // records the output dir
      CHECK(a == read(d2 / f));
    }
    CHECK(read(d1 / "events_tally.csv").starts_with("time_ns,kind,task,kernel,block\n"));
    CHECK(read(d1 / "metrics.csv").starts_with(kMetricsCsvHeader));
  }

  TEST_CASE("the manifest records hash and seed and reproduces the run") {
    auto cfg = parse_config(base_doc().dump());
    const auto d1 = scratch("manifest");
    cfg.out_dir = d1.string();
    run_and_write(cfg);
    const auto text = read(d1 / "manifest.json");
    const auto doc = json::parse(text);
    CHECK(doc["config_hash"] == config_hash(cfg));
    CHECK(doc["seed"] == 3);
    CHECK(looks_like_manifest(text));
    CHECK_FALSE(looks_like_manifest(to_json(cfg)));
    const auto m = parse_manifest(text);
    CHECK(m.command == "run");
    CHECK(config_hash(m.config) == config_hash(cfg));
    auto rerun = m.config;
    const auto d2 = scratch("manifest2");
    rerun.out_dir = d2.string();
    run_and_write(rerun);
    CHECK(read(d1 / "metrics.csv") == read(d2 / "metrics.csv"));

    auto tampered = doc;
    tampered["config"]["seed"] = 99;
    CHECK_THROWS_AS(parse_manifest(tampered.dump()), ConfigError);
  }

  TEST_CASE("axis application") {
    const auto cfg = parse_config(base_doc().dump());
    CHECK(apply_axis(cfg, SweepAxis::Threshold, 0.1).threshold == 100us);
    CHECK(*apply_axis(cfg, SweepAxis::Load, 0.2).traces.at("bert-like").load == 0.2);
    const auto four = apply_axis(cfg, SweepAxis::BeCount, 4);
    REQUIRE(four.workloads.size() == 5);
    CHECK(four.workloads[0].name == "bert-like");
    CHECK(four.workloads[1].name == "train-short");
    CHECK(four.workloads[4].name == "train-short#4");
    CHECK_THROWS_AS(apply_axis(cfg, SweepAxis::BeCount, 0), ConfigError);
    CHECK_THROWS_AS(apply_axis(cfg, SweepAxis::BeCount, 1.5), ConfigError);
    CHECK_THROWS_AS(apply_axis(cfg, SweepAxis::Load, 1.0), ConfigError);
    CHECK_THROWS_AS(apply_axis(cfg, SweepAxis::Threshold, -1), ConfigError);
    CHECK(parse_axis("be-count") == SweepAxis::BeCount);
    CHECK_FALSE(parse_axis("x"));
  }

  TEST_CASE("threshold sweep over the default grid emits 7 row groups") {
    auto doc = base_doc();
    doc["scheduler"]["policies"] = {"tally"};
    doc["duration_s"] = 1;
    auto cfg = parse_config(doc.dump());
    const auto values = default_axis_values(SweepAxis::Threshold);
    CHECK(values == std::vector<double>{0.01, 0.0316, 0.1, 0.316, 1, 3.16, 10});
    const auto points = run_sweep(cfg, SweepAxis::Threshold, values);
    const auto csv = sweep_csv(SweepAxis::Threshold, points);
    CHECK(csv.starts_with(kSweepCsvHeader));
    std::set<std::string> groups;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) groups.insert(line.substr(0, line.find(",tally,")));
    CHECK(groups.size() == 7);
    CHECK(count_lines(csv) == 1 + 7 * 2);
  }

  TEST_CASE("BE-count sweep 1..10 emits 10 row groups with growing task lists") {
    auto doc = base_doc();
    doc["scheduler"]["policies"] = {"tally"};
    doc["duration_s"] = 0.5;
    const auto points = run_sweep(parse_config(doc.dump()), SweepAxis::BeCount, default_axis_values(SweepAxis::BeCount));
    REQUIRE(points.size() == 10);
    for (std::size_t i = 0; i < points.size(); ++i) {
      CHECK(points[i].report.results.at(0).metrics.tasks.size() == i + 2);
    }
  }

  TEST_CASE("a replayed trace rescaled to a target load") {
    auto cfg = load_config(std::string(TALLY_CONFIGS_DIR) + "/trace_replay.json");
    cfg.duration = 5s;
    const auto scripts = build_scripts(cfg);
    REQUIRE(!scripts[0].arrivals.empty());
    CHECK(scripts[0].arrivals.back() < 5s);
    CHECK(scripts[1].arrivals.empty());
  }
}
