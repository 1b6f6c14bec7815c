#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tally/gpu_sim.hpp"
#include "tally/ir.hpp"
#include "tally/parallel.hpp"
#include "tally/transforms.hpp"

namespace tally::profiler {

using sim::Duration;
using sim::GpuSpec;
using sim::KernelCostModel;

inline constexpr Duration kDefaultThreshold{31'600};  // 0.0316 ms
inline constexpr int kDefaultRuns = 10;

struct ConfigCandidate {
  enum class Kind { Ptb, Sliced, Original };  // also the tie-break preference order
  Kind kind = Kind::Original;
  std::int64_t workers = 0;                     // Ptb
  transforms::Fraction fraction{1, 1};          // Sliced

  static ConfigCandidate original() { return {}; }
  static ConfigCandidate ptb(std::int64_t workers) { return {Kind::Ptb, workers, {1, 1}}; }
  static ConfigCandidate sliced(transforms::Fraction f) { return {Kind::Sliced, 0, f}; }

  /// "original", "ptb:<workers>" or "sliced:<num>/<den>".
  std::string str() const;
  static ConfigCandidate parse(const std::string& text);
  friend bool operator==(const ConfigCandidate&, const ConfigCandidate&) = default;
};

/// Grid used for cost-model-only kernels: all blocks along x.
ir::Dim3 linear_grid(std::int64_t total_blocks);

std::vector<ConfigCandidate> candidate_configs(const KernelCostModel& cost, const GpuSpec& gpu,
                                               const ir::Dim3& grid);
inline std::vector<ConfigCandidate> candidate_configs(const KernelCostModel& cost, const GpuSpec& gpu) {
  return candidate_configs(cost, gpu, linear_grid(cost.total_blocks));
}

/// PTB: latency * workers / total, the single-slice completion for sliced
/// launches and the whole latency for original launches.
Duration estimate_turnaround(const ConfigCandidate& c, Duration kernel_latency,
                             std::int64_t total_blocks, Duration single_slice = Duration{0});

sim::LaunchShape to_shape(const ConfigCandidate& c, const ir::Dim3& grid);

struct ProfileKey {
  std::string kernel;
  ir::Dim3 grid;
  ir::Dim3 block;
  friend bool operator==(const ProfileKey&, const ProfileKey&) = default;
  friend bool operator<(const ProfileKey& a, const ProfileKey& b);
};

struct ProfileRecord {
  ConfigCandidate candidate;
  Duration kernel_latency{0};
  Duration turnaround_estimate{0};
  int runs = 0;
  friend bool operator==(const ProfileRecord&, const ProfileRecord&) = default;
};

/// Minimal kernel_latency among records whose estimate is within the threshold; when
/// none qualifies, minimal estimate. Ties prefer Ptb, then Sliced, then Original, then
/// the smaller worker count or fraction.
ConfigCandidate select_config(const std::vector<ProfileRecord>& records, Duration threshold);

/// Measures candidates in isolated simulator runs and caches the records per key for
/// the lifetime of the object.
class Profiler {
 public:
  explicit Profiler(GpuSpec gpu, ExecutionMode mode = ExecutionMode::Serial);

  const GpuSpec& gpu() const { return gpu_; }

  /// Records for every feasible candidate of the kernel. Cached after the first call.
  const std::vector<ProfileRecord>& profile(const ProfileKey& key, const KernelCostModel& cost,
                                            int runs = kDefaultRuns);
  /// Records for an explicit candidate list; not cached.
  std::vector<ProfileRecord> measure(const ProfileKey& key, const KernelCostModel& cost,
                                     const std::vector<ConfigCandidate>& candidates,
                                     int runs = kDefaultRuns);

  /// Configuration the scheduler should launch with. Inter-block-dependent kernels
  /// always run original.
  ConfigCandidate choose(const ProfileKey& key, const KernelCostModel& cost, Duration threshold,
                         bool inter_block_dependent = false);

  std::uint64_t simulator_runs() const { return sim_runs_; }
  bool cached(const ProfileKey& key) const { return cache_.count(key) > 0; }

  /// JSON document with schema_version, the GPU spec and every cached key.
  std::string dump() const;
  /// Replaces the cache with a dump. Throws std::invalid_argument on malformed input
  /// or a dump taken for a different GPU.
  void load(const std::string& text);

 private:
  GpuSpec gpu_;
  ExecutionMode mode_;
  std::uint64_t sim_runs_ = 0;
  std::map<ProfileKey, std::vector<ProfileRecord>> cache_;
};

}  // namespace tally::profiler
