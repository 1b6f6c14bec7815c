#include <doctest.h>

#include <map>
#include <set>

#include "tally/scheduler.hpp"

using namespace tally;
using namespace tally::sched;
using namespace std::chrono_literals;
using sim::EventKind;
using sim::SimEvent;
using workloads::KernelSpec;
using workloads::WorkloadKind;
using workloads::WorkloadSpec;

namespace {

const sim::GpuSpec kGpu = workloads::suite::desk_gpu();

WorkloadSpec training(std::string name, std::vector<KernelSpec> kernels) {
  WorkloadSpec w;
  w.name = std::move(name);
  w.kind = WorkloadKind::Training;
  w.priority = sim::Priority::BestEffort;
  w.kernels = std::move(kernels);
  return w;
}

WorkloadSpec inference(std::string name, std::vector<KernelSpec> kernels) {
  WorkloadSpec w;
  w.name = std::move(name);
  w.kind = WorkloadKind::Inference;
  w.priority = sim::Priority::High;
  w.kernels = std::move(kernels);
  return w;
}

struct Traced {
  RunOutput out;
  std::vector<SimEvent> events;
};

Traced traced_run(PolicyKind policy, const std::vector<TaskScript>& tasks, Duration duration,
                  Duration threshold = profiler::kDefaultThreshold, std::uint64_t seed = 0) {
  profiler::Profiler prof(kGpu);
  Traced t;
  RunOptions opt;
  opt.duration = duration;
  opt.placement_seed = seed;
  opt.on_events = [&](std::span<const SimEvent> batch) { t.events.insert(t.events.end(), batch.begin(), batch.end()); };
  SchedulerConfig cfg;
  cfg.policy = policy;
  cfg.turnaround_threshold = threshold;
  t.out = run_policy(cfg, tasks, kGpu, prof, opt);
  return t;
}

std::vector<SimEvent> of(const std::vector<SimEvent>& events, EventKind kind, int task) {
  std::vector<SimEvent> out;
  for (const auto& e : events) {
    if (e.kind == kind && e.task == task) out.push_back(e);
  }
  return out;
}

// 3200 blocks of 25 us: a 10 ms kernel on the desk GPU
KernelSpec long_kernel(const std::string& name) { return KernelSpec::linear(name, 25us, 3200); }

}  // namespace

TEST_SUITE("scheduler") {
  TEST_CASE("policy names round trip") {
    for (const auto p : {PolicyKind::Tally, PolicyKind::Eager, PolicyKind::KernelPriority, PolicyKind::TimeSliced}) {
      CHECK(parse_policy(policy_name(p)) == p);
    }
    CHECK_FALSE(parse_policy("mps"));
  }

  TEST_CASE("config and script validation") {
    SchedulerConfig cfg;
    cfg.turnaround_threshold = 0ns;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = SchedulerConfig{PolicyKind::TimeSliced, profiler::kDefaultThreshold, 0ns};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    profiler::Profiler prof(kGpu);
    RunOptions opt;
    opt.duration = 10ms;
    const auto hp = inference("hp", {KernelSpec::linear("h", 50us, 8)});
    const auto be = training("be", {KernelSpec::linear("b", 50us, 8)});
    CHECK_THROWS_AS(run_policy({PolicyKind::Tally}, {{hp, {}}, {hp, {}}}, kGpu, prof, opt), std::invalid_argument);
    CHECK_THROWS_AS(run_policy({PolicyKind::Tally}, {{be, {}}}, kGpu, prof, opt), std::invalid_argument);
    CHECK_THROWS_AS(run_policy({PolicyKind::KernelPriority}, {{be, {}}}, kGpu, prof, opt), std::invalid_argument);
    CHECK_NOTHROW(run_policy({PolicyKind::Eager}, {{be, {}}}, kGpu, prof, opt));
    CHECK_THROWS_AS(run_policy({PolicyKind::Eager}, {{hp, {2ms, 1ms}}}, kGpu, prof, opt), std::invalid_argument);
    profiler::Profiler other({2, 2048, 2});
    CHECK_THROWS_AS(run_policy({PolicyKind::Eager}, {{be, {}}}, kGpu, other, opt), std::invalid_argument);
  }

  TEST_CASE("an HP kernel on an idle GPU issues at arrival plus launch overhead") {
    const auto hp = inference("hp", {KernelSpec::linear("h", 50us, 8)});
    const auto t = traced_run(PolicyKind::Tally, {{hp, {1ms}}}, 10ms);
    const auto issued = of(t.events, EventKind::LaunchIssued, 0);
    REQUIRE(issued.size() == 1);
    CHECK(issued[0].time == 1ms + 5us);
    const auto& req = t.out.record.tasks[0].requests;
    REQUIRE(req.size() == 1);
    CHECK(*req[0].completion == 1ms + 55us);
  }

  TEST_CASE("HP arrival while a BE PTB runs: signal at arrival, HP starts within the drain") {
    const auto hp = inference("hp", {KernelSpec::linear("h", 50us, 8)});
    const auto be = training("be", {long_kernel("b")});
    const auto t = traced_run(PolicyKind::Tally, {{hp, {2ms}}, {be, {}}}, 5ms);
    const auto sig = of(t.events, EventKind::PreemptSignaled, 1);
    REQUIRE(!sig.empty());
    CHECK(sig[0].time == 2ms);
    const auto hp_start = of(t.events, EventKind::BlockStarted, 0);
    REQUIRE(!hp_start.empty());
    // PTB iteration = 25 us + 1.5 us; the HP kernel cannot be placed before its launch overhead
    CHECK(hp_start[0].time <= 2ms + 5us + 26500ns);
    CHECK(hp_start[0].time >= 2ms + 5us);
  }

  TEST_CASE("no BE launch is issued while HP is active") {
    const auto hp = inference("hp", {KernelSpec::linear("h", 100us, 8), KernelSpec::linear("h2", 100us, 8)});
    const auto be = training("be", {KernelSpec::linear("b", 25us, 64)});
    std::vector<Duration> arrivals{1ms, 1050us, 3ms};
    const auto t = traced_run(PolicyKind::Tally, {{hp, arrivals}, {be, {}}}, 5ms);
    const auto& reqs = t.out.record.tasks[0].requests;
    for (const auto& e : of(t.events, EventKind::LaunchIssued, 1)) {
      for (const auto& r : reqs) {
        REQUIRE(r.completion);
        // a BE launch submitted at time s issues at s + 5 us; s must lie outside every HP busy period
        const auto submitted = e.time - 5us;
        CHECK_FALSE((submitted >= r.arrival && submitted < *r.completion));
      }
    }
  }

  TEST_CASE("two BE tasks with HP idle alternate their submissions") {
    const auto hp = inference("hp", {KernelSpec::linear("h", 50us, 8)});
    const auto a = training("a", {KernelSpec::linear("ka", 25us, 64)});
    const auto b = training("b", {KernelSpec::linear("kb", 25us, 64)});
    const auto t = traced_run(PolicyKind::Tally, {{hp, {}}, {a, {}}, {b, {}}}, 3ms);
    std::vector<int> order;
    for (const auto& e : t.events) {
      if (e.kind == EventKind::LaunchIssued && e.block <= 0) order.push_back(e.task);
    }
    REQUIRE(order.size() >= 6);
    for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == (i % 2 == 0 ? 1 : 2));
  }

  TEST_CASE("an exempt BE kernel runs whole and the HP arrival waits its remaining time") {
    auto coop = KernelSpec::linear("coop", 10ms, 8);
    coop.inter_block_dependent = true;
    const auto hp = inference("hp", {KernelSpec::linear("h", 50us, 8)});
    const auto be = training("be", {coop});
    const auto t = traced_run(PolicyKind::Tally, {{hp, {3ms}}, {be, {}}}, 12ms);
    CHECK(of(t.events, EventKind::PreemptSignaled, 1).empty());
    const auto be_done = of(t.events, EventKind::KernelFinished, 1);
    REQUIRE(!be_done.empty());
    CHECK(be_done[0].time == 10ms + 5us);
    const auto hp_start = of(t.events, EventKind::BlockStarted, 0);
    REQUIRE(!hp_start.empty());
    CHECK(hp_start[0].time == be_done[0].time);
  }

  TEST_CASE("KernelPriority delays an HP arrival by the in-flight 10 ms BE kernel; Tally does not") {
    const auto hp = inference("hp", {KernelSpec::linear("h", 50us, 8)});
    const auto be = training("be", {long_kernel("b")});
    const std::vector<TaskScript> tasks{{hp, {2ms}}, {be, {}}};
    const auto kp = traced_run(PolicyKind::KernelPriority, tasks, 25ms);
    const auto tally = traced_run(PolicyKind::Tally, tasks, 25ms);
    const auto kp_delay = *kp.out.record.tasks[0].requests[0].completion - 2ms - 55us;
    const auto tally_delay = *tally.out.record.tasks[0].requests[0].completion - 2ms - 55us;
    CHECK(kp_delay >= 7900us);  // the BE kernel started at 5 us and ends at 10.005 ms
    CHECK(kp_delay <= 10ms);
    CHECK(tally_delay <= 2 * profiler::kDefaultThreshold);
    CHECK(kp.out.stats.preempt_signals == 0);
  }

  TEST_CASE("Eager with only one task behaves like Tally with only the HP task") {
    const auto hp = workloads::suite::bert_like();
    const auto arrivals = workloads::generate_arrivals(0.5, 3930us, 2s, 8);
    const auto eager = traced_run(PolicyKind::Eager, {{hp, arrivals}}, 2s);
    const auto tally = traced_run(PolicyKind::Tally, {{hp, arrivals}}, 2s);
    CHECK(eager.events == tally.events);
    const auto& a = eager.out.record.tasks[0].requests;
    const auto& b = tally.out.record.tasks[0].requests;
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].completion == b[i].completion);
  }

  TEST_CASE("strict priority, bounded intrusion and work conservation under Tally") {
    const auto hp = workloads::suite::bert_like();
    const std::vector<WorkloadSpec> mixes{workloads::suite::training_long(), workloads::suite::training_short()};
    for (const auto& be : mixes) {
      CAPTURE(be.name);
      const auto arrivals = workloads::generate_arrivals(0.5, 3930us, 2s, 21);
      const auto t = traced_run(PolicyKind::Tally, {{hp, arrivals}, {be, {}}}, 2s);
      REQUIRE(t.out.stats.preempt_signals + t.out.stats.holds > 0);

      // strict priority: between an HP kernel's issue and its last block start, no BE block starts
      std::map<sim::KernelHandle, std::int64_t> hp_unplaced;
      std::int64_t open = 0;
      std::int64_t violations = 0;
      for (const auto& e : t.events) {
        if (e.task == 0 && e.kind == EventKind::LaunchIssued) {
          hp_unplaced[e.kernel] = 8;
          ++open;
        } else if (e.task == 0 && e.kind == EventKind::BlockStarted) {
          if (--hp_unplaced[e.kernel] == 0) --open;
        } else if (e.task == 1 && e.kind == EventKind::BlockStarted && open > 0) {
          ++violations;
        }
      }
      CHECK(violations == 0);

      // bounded intrusion: first HP block within the largest BE drain of its issue.
      // PTB drain <= 25 us + 1.5 us; a sliced sub-kernel <= one wave of 30 us blocks.
      std::map<sim::KernelHandle, Duration> issued;
      Duration worst{0};
      for (const auto& e : t.events) {
        if (e.task != 0) continue;
        if (e.kind == EventKind::LaunchIssued) issued[e.kernel] = e.time;
        if (e.kind == EventKind::BlockStarted && issued.count(e.kernel)) {
          worst = std::max(worst, e.time - issued[e.kernel]);
          issued.erase(e.kernel);
        }
      }
      CHECK(worst <= profiler::kDefaultThreshold * 105 / 100 + 2us);

      // work conservation: each finished BE kernel ran each block exactly once
      std::map<sim::KernelHandle, std::set<std::int64_t>> done;
      std::map<sim::KernelHandle, std::int64_t> finished_count;
      for (const auto& e : t.events) {
        if (e.task != 1 || e.kind != EventKind::BlockFinished) continue;
        CHECK(done[e.kernel].insert(e.block).second);
        ++finished_count[e.kernel];
      }
      const auto& completed = t.out.record.tasks[1].kernels_done;
      REQUIRE(!completed.empty());
      std::int64_t completed_blocks = 0;
      for (std::size_t i = 0; i < completed.size(); ++i) {
        completed_blocks += be.kernels[i % be.kernels.size()].cost.total_blocks;
      }
      std::int64_t counted = 0;
      for (const auto& [h, n] : finished_count) counted += n;
      // blocks of the launch still in flight at the cutoff are the only difference
      const auto& last = be.kernels[completed.size() % be.kernels.size()];
      CHECK(counted >= completed_blocks);
      CHECK(counted <= completed_blocks + last.cost.total_blocks);
    }
  }

  TEST_CASE("time slicing never overlaps kernels of different tasks") {
    const auto hp = workloads::suite::resnet_like();
    const auto be = workloads::suite::training_short();
    const auto arrivals = workloads::generate_arrivals(0.3, 1ms, 1s, 2);
    const auto t = traced_run(PolicyKind::TimeSliced, {{hp, arrivals}, {be, {}}}, 1s);
    int running_task = -1;
    std::int64_t running = 0;
    for (const auto& e : t.events) {
      if (e.kind == EventKind::LaunchIssued) {
        if (running > 0) CHECK(e.task == running_task);
        running_task = e.task;
        ++running;
      } else if (e.kind == EventKind::KernelFinished) {
        --running;
      }
    }
    CHECK(t.out.record.tasks[0].requests.size() == arrivals.size());
  }

  TEST_CASE("every policy is deterministic") {
    const auto hp = workloads::suite::bert_like();
    const auto be = workloads::suite::training_long();
    const auto arrivals = workloads::generate_arrivals(0.5, 3930us, 1s, 5);
    for (const auto p : {PolicyKind::Tally, PolicyKind::Eager, PolicyKind::KernelPriority, PolicyKind::TimeSliced}) {
      CAPTURE(policy_name(p));
      const auto a = traced_run(p, {{hp, arrivals}, {be, {}}}, 1s, profiler::kDefaultThreshold, 3);
      const auto b = traced_run(p, {{hp, arrivals}, {be, {}}}, 1s, profiler::kDefaultThreshold, 3);
      CHECK(a.events.size() > 1000);
      CHECK(a.events == b.events);
    }
  }
}
