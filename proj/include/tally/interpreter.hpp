#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "tally/ir.hpp"

namespace tally::ir {

inline constexpr std::uint64_t kDefaultStepLimit = 10'000'000;

/// Host-side write applied while a launch runs: once memory[watch_addr] >= threshold,
/// memory[target_addr] is set to value (at most once). Models the host raising a
/// preemption flag when a kernel's task counter reaches a given point.
struct HostTrigger {
  Word watch_addr = 0;
  Word threshold = 0;
  Word target_addr = 0;
  Word value = 1;
};

struct LaunchSpec {
  KernelDef kernel;
  std::vector<Word> args;
  std::vector<Word> global_memory;
  std::optional<HostTrigger> trigger;
};

enum class ExecStatus : std::uint8_t { Completed, DivergentBarrier, StepLimitExceeded, MemoryFault };

std::string_view status_name(ExecStatus s) noexcept;

struct ExecResult {
  ExecStatus status = ExecStatus::Completed;
  std::vector<Word> final_memory;  // empty unless status == Completed
  std::uint64_t steps_executed = 0;
  std::string detail;              // human-readable context for failures
};

/// Runs every block of the launch. Blocks execute one after another in an order
/// permuted by schedule_seed; inside a block, runnable threads take turns in
/// thread-index order, each running until it blocks at BAR_SYNC or returns.
///
/// A barrier releases once every thread of the block waits at the same BAR_SYNC
/// site. The block is reported as DivergentBarrier when nothing is runnable but
/// the waiting threads disagree: some already returned, or they wait at
/// different sites.
///
/// DIV and MOD by zero yield 0. Registers and shared memory start zeroed.
ExecResult interpret(const LaunchSpec& launch, std::uint64_t schedule_seed = 0,
                     std::uint64_t step_limit = kDefaultStepLimit);

/// Block execution order used by interpret for a given seed (exposed for tests).
std::vector<Word> block_order(Word block_count, std::uint64_t schedule_seed);

}  // namespace tally::ir
