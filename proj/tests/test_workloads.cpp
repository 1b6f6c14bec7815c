#include <doctest.h>

#include <numeric>
#include <sstream>

#include "tally/scheduler.hpp"
#include "tally/workloads.hpp"

using namespace tally;
using namespace tally::workloads;
using namespace std::chrono_literals;

namespace {

Duration ms(double v) { return Duration{static_cast<std::int64_t>(v * 1e6)}; }

/// Fraction of [0, horizon) during which the task has a request in service.
double busy_fraction(const RunRecord& run, Duration horizon) {
  Duration busy{0};
  Duration covered{0};  // end of the busy period already counted
  for (const auto& r : run.tasks.at(0).requests) {
    if (!r.completion) continue;
    const auto start = std::max(r.arrival, covered);
    const auto end = std::min(*r.completion, horizon);
    if (end > start) busy += end - start;
    covered = std::max(covered, *r.completion);
  }
  return static_cast<double>(busy.count()) / static_cast<double>(horizon.count());
}

RunRecord isolated(const WorkloadSpec& w, const std::vector<Duration>& arrivals, Duration duration) {
  profiler::Profiler prof(suite::desk_gpu());
  sched::RunOptions opt;
  opt.duration = duration;
  return sched::run_policy({sched::PolicyKind::Eager}, {{w, arrivals}}, suite::desk_gpu(), prof, opt).record;
}

}  // namespace

TEST_SUITE("workloads") {
  TEST_CASE("bert-like request latency is the sum of isolated kernel completions") {
    const auto w = suite::bert_like();
    CHECK(w.kernels.size() == 40);
    CHECK(isolated_sequence_latency(w, suite::desk_gpu()) == 3930us);
  }

  TEST_CASE("suite kernel lengths match their descriptions") {
    const auto gpu = suite::desk_gpu();
    auto lengths = [&](const WorkloadSpec& w) {
      std::vector<Duration> out;
      for (const auto& k : w.kernels) {
        WorkloadSpec one = w;
        one.kernels = {k};
        out.push_back(isolated_sequence_latency(one, gpu));
      }
      return out;
    };
    for (const auto d : lengths(suite::resnet_like())) CHECK(d < 100us);
    for (const auto d : lengths(suite::training_short())) CHECK(d < 100us);
    int long_kernels = 0;
    for (const auto d : lengths(suite::training_long())) long_kernels += d >= 3930us ? 1 : 0;
    CHECK(long_kernels >= 3);
    CHECK(suite::training_cooperative().kernels[2].inter_block_dependent);
    for (const auto& name : suite::names()) CHECK(suite::by_name(name).has_value());
    CHECK(suite::by_name("train-long-3")->name == "train-long-3");
    CHECK_FALSE(suite::by_name("train-long-x"));
    CHECK_FALSE(suite::by_name("nope"));
  }

  TEST_CASE("workload validation") {
    WorkloadSpec w;
    w.name = "w";
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
    w.kernels.push_back(KernelSpec::linear("k", 10us, 4));
    CHECK_NOTHROW(w.validate());
    w.kernels[0].grid = ir::Dim3{2, 1, 1};
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  }

  TEST_CASE("arrival rate arithmetic: load 0.5 at 3.93 ms gives a 7.86 ms mean gap") {
    const auto a = generate_arrivals(0.5, 3930us, std::chrono::seconds(600), 1);
    const double mean_gap_ms = 600'000.0 / static_cast<double>(a.size());
    CHECK(mean_gap_ms == doctest::Approx(7.86).epsilon(0.02));
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(a.back() < std::chrono::seconds(600));
  }

  TEST_CASE("arrivals are seeded and deterministic") {
    const auto a = generate_arrivals(0.3, 2ms, 5s, 9);
    CHECK(a == generate_arrivals(0.3, 2ms, 5s, 9));
    CHECK(a != generate_arrivals(0.3, 2ms, 5s, 10));
  }

  TEST_CASE("a vanishing load gives no arrivals over a short window") {
    CHECK(generate_arrivals(1e-9, 3930us, 1s, 5).empty());
  }

  TEST_CASE("invalid load is rejected") {
    CHECK_THROWS_AS(generate_arrivals(0.0, 1ms, 1s, 0), std::invalid_argument);
    CHECK_THROWS_AS(generate_arrivals(1.0, 1ms, 1s, 0), std::invalid_argument);
    CHECK_THROWS_AS(generate_arrivals(0.5, 0ms, 1s, 0), std::invalid_argument);
  }

  TEST_CASE("served in isolation, a synthetic trace keeps the GPU busy for about the load") {
    const auto w = suite::bert_like();
    const auto latency = isolated_sequence_latency(w, suite::desk_gpu());
    for (const double load : {0.1, 0.5}) {
      const auto a = generate_arrivals(load, latency, 60s, 77);
      const auto run = isolated(w, a, 60s);
      CHECK(busy_fraction(run, 60s) == doctest::Approx(load).epsilon(0.05));
    }
  }

  TEST_CASE("trace parsing") {
    std::istringstream in("0\n5\n12\n");
    CHECK(parse_trace(in) == std::vector<Duration>{ms(0), ms(5), ms(12)});
    std::istringstream blanks("  1.5 \n\n2\r\n");
    CHECK(parse_trace(blanks) == std::vector<Duration>{1500us, ms(2)});
  }

  TEST_CASE("trace errors name the line") {
    std::istringstream bad("0\nabc\n");
    CHECK_THROWS_WITH_AS(parse_trace(bad), doctest::Contains("line 2"), std::invalid_argument);
    std::istringstream decreasing("5\n3\n");
    CHECK_THROWS_WITH_AS(parse_trace(decreasing), doctest::Contains("decrease"), std::invalid_argument);
    std::istringstream negative("-1\n");
    CHECK_THROWS_AS(parse_trace(negative), std::invalid_argument);
    CHECK_THROWS_AS(load_trace("/nonexistent/trace.csv"), std::invalid_argument);
  }

  TEST_CASE("rescaling by 2 doubles every timestamp") {
    const std::vector<Duration> ts{ms(0), ms(5), ms(12)};
    CHECK(rescale_trace(ts, 2.0) == std::vector<Duration>{ms(0), ms(10), ms(24)});
    CHECK_THROWS_AS(rescale_trace(ts, 0.0), std::invalid_argument);
  }

  TEST_CASE("a rescaled trace reaches its target load when served in isolation") {
    // a bursty trace: clusters of arrivals with long gaps, far from the target load
    std::vector<Duration> ts;
    std::mt19937_64 rng(3);
    Duration t{0};
    for (int i = 0; i < 4000; ++i) {
      t += Duration{static_cast<std::int64_t>(rng() % 3'000'000)};
      if (i % 10 == 0) t += 40ms;
      ts.push_back(t);
    }
    const auto w = suite::bert_like();
    const auto latency = isolated_sequence_latency(w, suite::desk_gpu());
    for (const double load : {0.2, 0.5}) {
      const auto scaled = rescale_trace(ts, rescale_factor_for_load(ts, latency, load));
      const auto horizon = scaled.back() + latency;
      const auto run = isolated(w, scaled, horizon + 1s);
      CHECK(busy_fraction(run, horizon) == doctest::Approx(load).epsilon(0.05));
    }
  }

  TEST_CASE("nearest-rank p99 of 1..100 ms is 99 ms") {
    std::vector<Duration> v;
    for (int i = 100; i >= 1; --i) v.push_back(ms(i));
    CHECK(percentile_nearest_rank(v, 99.0) == ms(99));
    CHECK(percentile_nearest_rank(v, 100.0) == ms(100));
    CHECK(percentile_nearest_rank({ms(7)}, 99.0) == ms(7));
    CHECK(percentile_nearest_rank({ms(1), ms(2)}, 50.0) == ms(1));
    CHECK_THROWS_AS(percentile_nearest_rank({}, 99.0), std::invalid_argument);
  }

  TEST_CASE("a single task normalized against itself scores 1") {
    const auto w = suite::bert_like();
    const auto a = generate_arrivals(0.4, 3930us, 10s, 4);
    const auto run = isolated(w, a, 10s);
    const auto raw = raw_metrics(run);
    const auto m = compute_metrics(run, {{w.name, raw.tasks[0].throughput}});
    CHECK(m.tasks[0].normalized_throughput == doctest::Approx(1.0));
    CHECK(m.system_throughput == doctest::Approx(1.0));

    const auto train = suite::training_short();
    const auto trun = isolated(train, {}, 5s);
    const auto traw = raw_metrics(trun);
    const auto tm = compute_metrics(trun, {{train.name, traw.tasks[0].throughput}});
    CHECK(tm.system_throughput == doctest::Approx(1.0));
  }

  TEST_CASE("conservation: completed plus in flight equals window arrivals") {
    RunRecord run;
    run.duration = 10s;
    TaskLog t;
    t.name = "hp";
    t.kind = WorkloadKind::Inference;
    t.requests = {{500ms, 600ms}, {2s, 2100ms}, {5s, std::nullopt}, {9900ms, 10100ms}, {9950ms, 9990ms}};
    run.tasks.push_back(t);
    const auto m = raw_metrics(run).tasks[0];
    CHECK(m.arrivals_in_window == 4);
    CHECK(m.completed_in_window == 2);
    CHECK(m.in_flight_at_cutoff == 2);
    CHECK(m.completed_in_window + m.in_flight_at_cutoff == m.arrivals_in_window);
    // censored: 5 s arrival counts as 5 s, the largest value
    CHECK(*m.p99 == 5s);
  }

  TEST_CASE("metrics errors") {
    RunRecord run;
    run.duration = 10s;
    TaskLog t;
    t.name = "hp";
    t.kind = WorkloadKind::Inference;
    t.requests = {{2s, std::nullopt}};
    run.tasks.push_back(t);
    CHECK_THROWS_AS(compute_metrics(run, {{"hp", 1.0}}), std::invalid_argument);
    run.tasks[0].requests[0].completion = 3s;
    CHECK_NOTHROW(compute_metrics(run, {{"hp", 1.0}}));
    CHECK_THROWS_AS(compute_metrics(run, {}), std::invalid_argument);
    CHECK_THROWS_AS(compute_metrics(run, {{"hp", 0.0}}), std::invalid_argument);
  }

  TEST_CASE("system throughput is the sum of normalized throughputs, recomputed from raw records") {
    const auto gpu = suite::desk_gpu();
    const auto hp = suite::bert_like();
    const auto be = suite::training_long();
    const auto a = generate_arrivals(0.5, 3930us, 10s, 11);
    profiler::Profiler prof(gpu);
    sched::RunOptions opt;
    opt.duration = 10s;
    const auto run = sched::run_policy({sched::PolicyKind::Tally}, {{hp, a}, {be, {}}}, gpu, prof, opt).record;
    const double hp_alone = raw_metrics(isolated(hp, a, 10s)).tasks[0].throughput;
    const double be_alone = raw_metrics(isolated(be, {}, 10s)).tasks[0].throughput;
    const auto m = compute_metrics(run, {{hp.name, hp_alone}, {be.name, be_alone}});

    // independent recomputation straight from the records
    const Duration warm = 1s;
    double hp_done = 0;
    for (const auto& r : run.tasks[0].requests) {
      if (r.arrival >= warm && r.completion && *r.completion <= 10s) hp_done += 1;
    }
    double be_work = 0;
    for (const auto& k : run.tasks[1].kernels_done) {
      if (k.time > warm) be_work += k.work_ns;
    }
    const double hp_norm = hp_done / 9.0 / hp_alone;
    const double be_norm = be_work / be.work_ns() / 9.0 / be_alone;
    CHECK(m.system_throughput == doctest::Approx(hp_norm + be_norm).epsilon(1e-9));
    for (const auto& t : m.tasks) CHECK(t.normalized_throughput <= 1.02);
  }
}
