#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tally/interpreter.hpp"
#include "tally/ir.hpp"

namespace tally::transforms {

using ir::Dim3;
using ir::KernelDef;
using ir::Word;

/// A pass declined its input (inter-block-dependent kernel or unmet precondition).
class TransformRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Positive rational in (0, 1].
struct Fraction {
  std::int64_t num = 1;
  std::int64_t den = 1;

  static Fraction parse(const std::string& text);  // "1/4", "0.25" or "1"
  std::string str() const;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

inline constexpr const char* kOffsetParams[3] = {"__offset_x", "__offset_y", "__offset_z"};

struct SubLaunch {
  Dim3 block_offset;
  Dim3 sub_grid;
  friend bool operator==(const SubLaunch&, const SubLaunch&) = default;
};

struct SlicedPlan {
  KernelDef base_kernel;  // offset-augmented, grid = original grid
  std::vector<SubLaunch> sub_launches;
};

/// Appends the __offset_{x,y,z} params and rebases every blockIdx read onto them.
/// gridDim reads are pinned to the original grid so sub-launches observe the full grid.
KernelDef add_block_offset(const KernelDef& k);

/// Slicing axis: the one with the most blocks, ties resolved x, then y, then z.
int slicing_axis(const Dim3& grid);

/// Extents of the slices along one axis: max(1, round(fraction * len)) each, with the
/// last slice absorbing the remainder.
std::vector<Word> slice_extents(Word axis_len, Fraction fraction);

/// Block counts of the sub-launches slice_kernel would produce for this grid.
std::vector<Word> slice_block_counts(const Dim3& grid, Fraction fraction);

SlicedPlan slice_kernel(const KernelDef& k, Fraction fraction);

/// Launch of sub-launch i of a plan: the base kernel over the sub-grid with the
/// original args followed by the block offset.
ir::LaunchSpec sub_launch(const SlicedPlan& plan, std::size_t i, std::vector<Word> args,
                          std::vector<Word> memory);

/// Runs every sub-launch of the plan in order, threading global memory through.
ir::ExecResult run_sliced(const SlicedPlan& plan, const std::vector<Word>& args,
                          std::vector<Word> memory, std::uint64_t schedule_seed = 0);

inline constexpr const char* kUnifiedSyncLabel = "__usync_U";
inline constexpr const char* kUnifiedExitLabel = "__usync_exit";

/// Routes every BAR_SYNC and RET through a single synchronization block so that
/// threads of a block only meet at one barrier and return together.
KernelDef unify_synchronization(const KernelDef& k);

/// True when every RET sits inside the unified synchronization block.
bool has_unified_synchronization(const KernelDef& k);

struct PtbControl {
  Word task_counter_addr = 0;
  Word preempt_flag_addr = 0;
  Word total_blocks = 0;
  Dim3 original_grid;
};

inline constexpr const char* kPtbCounterParam = "__ptb_counter";
inline constexpr const char* kPtbFlagParam = "__ptb_flag";
inline constexpr const char* kPtbTotalParam = "__ptb_total";
inline constexpr const char* kPtbGridParams[3] = {"__ptb_grid_x", "__ptb_grid_y", "__ptb_grid_z"};

struct PtbKernelDef {
  KernelDef kernel;  // grid == worker_grid
  Dim3 worker_grid;
  Dim3 original_grid;
};

enum class PreconditionCheck { Enforce, Skip };

/// Worker-loop form of k. Each iteration thread (0,0,0) reads the preempt flag and,
/// if clear, claims the next task index from the global counter and publishes it
/// through shared memory; all threads then either leave (flag set or tasks
/// exhausted) or run the original body for blockIdx = delinearize(index) and meet at
/// an end-of-iteration barrier. Registers and shared memory are reset each iteration.
///
/// Requires unify_synchronization to have been applied unless check == Skip.
PtbKernelDef make_preemptible(const KernelDef& k, const Dim3& worker_grid,
                              PreconditionCheck check = PreconditionCheck::Enforce);

/// Control block placed in two words appended after `memory_words` words.
PtbControl append_control(const KernelDef& original, Word memory_words);

/// Launch of a PTB kernel: original args followed by the control params. The memory
/// must already contain the control words.
ir::LaunchSpec ptb_launch(const PtbKernelDef& ptb, const PtbControl& control,
                          std::vector<Word> args, std::vector<Word> memory);

}  // namespace tally::transforms
