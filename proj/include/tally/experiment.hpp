#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tally/config.hpp"
#include "tally/parallel.hpp"
#include "tally/scheduler.hpp"
#include "tally/workloads.hpp"

namespace tally::experiment {

using config::ExperimentConfig;
using sim::Duration;

/// Writes to "<path>.tmp" and renames onto the path on commit(); an uncommitted file
/// is removed on destruction, so a failed run leaves no partial output behind.
class OutputFile {
 public:
  explicit OutputFile(std::string path);
  ~OutputFile();
  OutputFile(const OutputFile&) = delete;
  OutputFile& operator=(const OutputFile&) = delete;

  std::ofstream& stream() { return out_; }
  void commit();

 private:
  std::string path_;
  std::string tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

void write_file_atomic(const std::string& path, std::string_view content);

struct PolicyResult {
  sched::PolicyKind policy = sched::PolicyKind::Tally;
  workloads::Metrics metrics;
  sched::RunStats stats;
  std::uint64_t events = 0;
};

struct ExperimentReport {
  std::map<std::string, double> standalone_throughput;
  std::map<std::string, std::optional<Duration>> standalone_p99;
  std::vector<PolicyResult> results;  // config policy order

  const PolicyResult& result(sched::PolicyKind p) const;
};

/// Task scripts in config order, with arrivals for the inference tasks.
std::vector<sched::TaskScript> build_scripts(const ExperimentConfig& cfg);

/// Runs each workload alone (calibration), then every configured policy on the full
/// mix. Independent runs fan out per `mode`. When event_log_prefix is set, each policy
/// run streams its events to "<prefix><policy>.csv".
ExperimentReport run_experiment(const ExperimentConfig& cfg, ExecutionMode mode = ExecutionMode::Parallel,
                                const std::optional<std::string>& event_log_prefix = std::nullopt);

inline constexpr const char* kMetricsCsvHeader = "policy,task,p99_ms,norm_throughput,system_throughput\n";
/// Rows for one report, without the header.
std::string metrics_rows(const ExperimentReport& report);

enum class SweepAxis { Threshold, Load, BeCount };
const char* axis_name(SweepAxis a);
std::optional<SweepAxis> parse_axis(std::string_view text);
/// Default grids: thresholds 0.01..10 ms, loads 0.1..0.9, BE counts 1..10.
std::vector<double> default_axis_values(SweepAxis a);
/// Config with the axis set to value. BeCount cycles through the configured
/// best-effort workloads, renaming repeats "<name>#<k>".
ExperimentConfig apply_axis(const ExperimentConfig& cfg, SweepAxis axis, double value);

struct SweepPoint {
  double value = 0;
  ExperimentReport report;
};

std::vector<SweepPoint> run_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values,
                                  ExecutionMode mode = ExecutionMode::Parallel);

inline constexpr const char* kSweepCsvHeader =
    "axis,value,policy,task,p99_ms,norm_throughput,system_throughput\n";
std::string sweep_csv(SweepAxis axis, const std::vector<SweepPoint>& points);

/// Files written by the run/sweep commands, relative to cfg.out_dir.
struct WrittenOutputs {
  std::vector<std::string> files;
};

/// Runs the experiment and writes metrics.csv, manifest.json and (if enabled) the
/// event logs into cfg.out_dir.
WrittenOutputs run_and_write(const ExperimentConfig& cfg, ExecutionMode mode = ExecutionMode::Parallel);
/// Runs the sweep and writes sweep_<axis>.csv and manifest.json into cfg.out_dir.
WrittenOutputs sweep_and_write(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values,
                               ExecutionMode mode = ExecutionMode::Parallel);

/// Manifest: schema_version, command, config_hash, seed, axis/values for sweeps, the
/// output files and the canonical config, which is enough to rerun.
std::string manifest_json(const ExperimentConfig& cfg, const std::string& command,
                          const std::optional<SweepAxis>& axis, const std::vector<double>& values,
                          const std::vector<std::string>& files);

struct Manifest {
  std::string command;
  ExperimentConfig config;
  std::optional<SweepAxis> axis;
  std::vector<double> values;
};
/// Reads a manifest written by run_and_write or sweep_and_write. Throws ConfigError.
Manifest parse_manifest(const std::string& text);
bool looks_like_manifest(const std::string& text);

}  // namespace tally::experiment
