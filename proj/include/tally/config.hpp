#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tally/gpu_sim.hpp"
#include "tally/scheduler.hpp"
#include "tally/workloads.hpp"

namespace tally::config {

using sim::Duration;

inline constexpr int kSchemaVersion = 1;

/// Any problem with an experiment config document; the CLI maps it to exit status 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Arrivals of one inference workload: a trace file, optionally rescaled to a target
/// load, or a synthetic Poisson process at `load`.
struct TraceSpec {
  std::optional<std::string> file;  // resolved path
  std::optional<double> load;
  std::optional<std::uint64_t> seed;  // synthetic only; derived from the experiment seed when absent
};

struct ExperimentConfig {
  sim::GpuSpec gpu;
  std::vector<workloads::WorkloadSpec> workloads;
  std::map<std::string, TraceSpec> traces;  // keyed by workload name
  std::vector<sched::PolicyKind> policies{sched::PolicyKind::Tally};
  Duration threshold = profiler::kDefaultThreshold;
  Duration quantum = sched::kDefaultQuantum;
  std::uint64_t seed = 0;
  Duration duration = std::chrono::seconds(60);
  int profile_runs = profiler::kDefaultRuns;
  std::string out_dir = "out";
  bool event_log = false;

  /// Throws ConfigError describing the first violated rule.
  void validate() const;
  const workloads::WorkloadSpec& high_priority() const;
};

/// Parses a JSON document. Relative file paths resolve against base_dir.
ExperimentConfig parse_config(const std::string& text, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON form (sorted keys, fully expanded workloads).
std::string to_json(const ExperimentConfig& cfg);
/// Hex SHA-256 of to_json(cfg).
std::string config_hash(const ExperimentConfig& cfg);

/// Duration from fractional milliseconds, rounded to the nearest nanosecond.
Duration from_ms(double ms);
double to_ms(Duration d);

}  // namespace tally::config
