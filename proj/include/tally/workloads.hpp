#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tally/gpu_sim.hpp"
#include "tally/ir.hpp"

namespace tally::workloads {

using sim::Duration;
using sim::KernelCostModel;
using sim::Priority;

struct KernelSpec {
  std::string name;
  KernelCostModel cost;
  ir::Dim3 grid;  // must cover cost.total_blocks
  bool inter_block_dependent = false;

  /// Kernel whose blocks lie along x.
  static KernelSpec linear(std::string name, Duration block_duration, std::int64_t blocks,
                           int threads_per_block = 128);
  /// Block work in nanoseconds (blocks times block duration).
  double work_ns() const;
};

enum class WorkloadKind { Inference, Training };
const char* workload_kind_name(WorkloadKind k);

struct WorkloadSpec {
  std::string name;
  WorkloadKind kind = WorkloadKind::Training;
  Priority priority = Priority::BestEffort;
  std::vector<KernelSpec> kernels;  // one request (inference) or one iteration (training)

  void validate() const;
  double work_ns() const;
};

/// Sum of the isolated completion times of the kernels, each run original on an idle GPU.
Duration isolated_sequence_latency(const WorkloadSpec& w, const sim::GpuSpec& gpu);

/// Poisson arrivals with rate load / request_latency over [0, duration).
std::vector<Duration> generate_arrivals(double load, Duration request_latency, Duration duration,
                                        std::uint64_t seed);

/// One non-negative millisecond timestamp per line, non-decreasing. Blank lines are
/// skipped. Throws std::invalid_argument naming the offending line.
std::vector<Duration> parse_trace(std::istream& in);
std::vector<Duration> load_trace(const std::string& path);
std::vector<Duration> rescale_trace(const std::vector<Duration>& ts, double factor);
/// Linear time-rescaling factor that makes n * request_latency / span equal the load.
double rescale_factor_for_load(const std::vector<Duration>& ts, Duration request_latency,
                               double target_load);

struct RequestRecord {
  Duration arrival{0};
  std::optional<Duration> completion;
};

struct KernelCompletion {
  Duration time{0};
  double work_ns = 0;
};

/// What the scheduler records for one task during a run.
struct TaskLog {
  int task = 0;
  std::string name;
  WorkloadKind kind = WorkloadKind::Training;
  Priority priority = Priority::BestEffort;
  double iteration_work_ns = 0;
  std::vector<RequestRecord> requests;           // inference
  std::vector<KernelCompletion> kernels_done;    // training progress
};

struct RunRecord {
  Duration duration{0};
  std::vector<TaskLog> tasks;
};

struct TaskMetrics {
  std::string name;
  Priority priority = Priority::BestEffort;
  WorkloadKind kind = WorkloadKind::Training;
  std::vector<Duration> latencies;  // requests arriving after warm-up, completed in the window
  /// Nearest-rank p99 over every request arriving in the window; a request still
  /// unfinished at the cutoff counts with latency cutoff - arrival (a lower bound).
  std::optional<Duration> p99;
  std::int64_t arrivals_in_window = 0;
  std::int64_t completed_in_window = 0;
  std::int64_t in_flight_at_cutoff = 0;
  double throughput = 0;  // requests or iterations per second
  double normalized_throughput = 0;
};

struct Metrics {
  std::vector<TaskMetrics> tasks;
  double system_throughput = 0;
};

inline constexpr double kWarmupFraction = 0.1;

/// Nearest-rank percentile (p in (0, 100]) of an unsorted list.
Duration percentile_nearest_rank(std::vector<Duration> values, double p);

/// Throughput of each task in [warm-up end, duration]; no normalization.
Metrics raw_metrics(const RunRecord& run);

/// Metrics normalized by each task's standalone throughput, looked up by task name.
/// Throws std::invalid_argument when an inference task completed no request at all
/// or a standalone throughput is missing or zero.
Metrics compute_metrics(const RunRecord& run, const std::map<std::string, double>& standalone);

/// Desk-scale benchmark suite.
namespace suite {
/// 40 kernels of 8 blocks x 93.25 us: a 3.93 ms request on a 4-SM, 2-slot GPU.
WorkloadSpec bert_like();
/// 48 short kernels, all under 0.1 ms.
WorkloadSpec resnet_like();
/// Training iteration with kernels of 20-40 ms built from 25 us blocks.
WorkloadSpec training_long(int variant = 0);
/// Training iteration of short kernels only (all under 0.1 ms).
WorkloadSpec training_short(int variant = 0);
/// training_long plus a 10 ms inter-block-dependent kernel whose 8 blocks are co-resident.
WorkloadSpec training_cooperative();
std::optional<WorkloadSpec> by_name(const std::string& name);
std::vector<std::string> names();
sim::GpuSpec desk_gpu();
}  // namespace suite

}  // namespace tally::workloads
