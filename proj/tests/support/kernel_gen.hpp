#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tally/interpreter.hpp"
#include "tally/ir.hpp"

namespace tally::testing {

struct GenOptions {
  ir::Word max_blocks = 64;
  ir::Word max_threads = 32;
  int outputs_per_thread = 3;
  int statements = 10;
  bool allow_barriers = true;
  bool allow_early_return = true;  // only after the last barrier
  bool allow_atomics = true;
  std::optional<ir::Dim3> grid;  // fixed grid instead of a random one
};

struct GeneratedCase {
  ir::KernelDef kernel;
  std::vector<ir::Word> args;
  std::vector<ir::Word> memory;
};

/// Random kernel whose global writes are disjoint across blocks (each thread owns its
/// output slots) plus optional atomic accumulations whose results are never read, so
/// the final memory does not depend on block order.
GeneratedCase generate_case(std::uint64_t seed, const GenOptions& options = {});

ir::LaunchSpec launch_of(const GeneratedCase& c);

/// Kernel in which threads with threadIdx.x < 2 return before a barrier the others reach.
GeneratedCase divergence_witness();

/// out[i] = a[i] + b[i] over grid (4,1,1) x block (2,1,1).
GeneratedCase vector_add_case();

}  // namespace tally::testing
