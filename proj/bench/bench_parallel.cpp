// Serial reference vs OpenMP fan-out for the three batch workloads that use
// for_each_index: the transform equivalence batch, candidate profiling and a
// multi-policy experiment.

#include <benchmark/benchmark.h>

#include "support/equivalence.hpp"
#include "tally/experiment.hpp"
#include "tally/logging.hpp"
#include "tally/profiler.hpp"

namespace {

using namespace tally;

ExecutionMode mode_of(const benchmark::State& state) {
  return state.range(0) == 0 ? ExecutionMode::Serial : ExecutionMode::Parallel;
}

void BM_EquivalenceBatch(benchmark::State& state) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 48; ++s) seeds.push_back(500 + s);
  for (auto _ : state) {
    benchmark::DoNotOptimize(testing::check_batch(seeds, {}, mode_of(state)));
  }
  state.SetLabel(mode_of(state) == ExecutionMode::Serial ? "serial" : "openmp");
}
BENCHMARK(BM_EquivalenceBatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_ProfileCandidates(benchmark::State& state) {
  const auto gpu = workloads::suite::desk_gpu();
  const auto cost = sim::KernelCostModel::uniform(std::chrono::microseconds(50), 4096);
  const profiler::ProfileKey key{"k", profiler::linear_grid(4096), {cost.threads_per_block, 1, 1}};
  for (auto _ : state) {
    profiler::Profiler p(gpu, mode_of(state));
    benchmark::DoNotOptimize(p.profile(key, cost));
  }
  state.SetLabel(mode_of(state) == ExecutionMode::Serial ? "serial" : "openmp");
}
BENCHMARK(BM_ProfileCandidates)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Experiment(benchmark::State& state) {
  config::ExperimentConfig cfg;
  cfg.gpu = workloads::suite::desk_gpu();
  cfg.workloads = {workloads::suite::bert_like(), workloads::suite::training_long()};
  cfg.traces["bert-like"] = config::TraceSpec{std::nullopt, 0.5, std::nullopt};
  cfg.policies = {sched::PolicyKind::Tally, sched::PolicyKind::Eager, sched::PolicyKind::KernelPriority,
                  sched::PolicyKind::TimeSliced};
  cfg.duration = std::chrono::seconds(10);
  cfg.profile_runs = 2;
  for (auto _ : state) {
    benchmark::DoNotOptimize(experiment::run_experiment(cfg, mode_of(state)));
  }
  state.SetLabel(mode_of(state) == ExecutionMode::Serial ? "serial" : "openmp");
}
BENCHMARK(BM_Experiment)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  tally::init_logging("bench");
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
