#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tally/gpu_sim.hpp"
#include "tally/profiler.hpp"
#include "tally/workloads.hpp"

namespace tally::sched {

using sim::Duration;

enum class PolicyKind { Tally, Eager, KernelPriority, TimeSliced };

/// "tally", "eager", "kernel-priority", "time-sliced".
const char* policy_name(PolicyKind p);
std::optional<PolicyKind> parse_policy(std::string_view text);

inline constexpr Duration kDefaultQuantum = std::chrono::milliseconds(2);

struct SchedulerConfig {
  PolicyKind policy = PolicyKind::Tally;
  Duration turnaround_threshold = profiler::kDefaultThreshold;
  Duration quantum = kDefaultQuantum;  // TimeSliced only

  void validate() const;
};

/// One task of a run: its workload and, for inference tasks, request arrival times.
/// Training tasks always have their next iteration ready.
struct TaskScript {
  workloads::WorkloadSpec spec;
  std::vector<Duration> arrivals;
};

struct RunOptions {
  Duration duration{0};
  std::uint64_t placement_seed = 0;
  /// Receives every batch of simulator events in order. Runs of a minute produce tens
  /// of millions of events, so nothing is retained unless the caller does it here.
  std::function<void(std::span<const sim::SimEvent>)> on_events;
};

struct RunStats {
  std::int64_t submissions = 0;
  std::int64_t preempt_signals = 0;
  std::int64_t holds = 0;
  std::int64_t resumes = 0;
};

struct RunOutput {
  workloads::RunRecord record;
  RunStats stats;
};

/// Drives one simulated GPU with the given policy until options.duration. Tasks are
/// streams: a task's next kernel is submitted only after the previous one finishes.
///   Tally: HP kernels launch original with high priority as soon as they are ready;
///     at that moment every best-effort PTB launch is signalled and every sliced one
///     held. Best-effort work is submitted (or resumed) only while the HP task is
///     inactive, one launch per task, tasks visited round-robin.
///   Eager: every kernel is submitted original as soon as it is ready, one class.
///   KernelPriority: HP kernels wait for in-flight best-effort kernels to finish, then
///     launch with high priority; best-effort kernels start only while HP is inactive.
///   TimeSliced: tasks take turns of one quantum, checked at kernel boundaries.
/// Throws std::invalid_argument unless exactly one task of a Tally or KernelPriority
/// run is high priority.
RunOutput run_policy(const SchedulerConfig& config, const std::vector<TaskScript>& tasks,
                     const sim::GpuSpec& gpu, profiler::Profiler& profiler, const RunOptions& options);

/// Key under which the profiler stores a workload kernel.
profiler::ProfileKey profile_key(const workloads::KernelSpec& k);

}  // namespace tally::sched
