#pragma once

#include <cstddef>
#include <exception>
#include <mutex>
#include <string_view>

namespace tally {

/// Serial is the reference path; Parallel fans independent work items out over
/// OpenMP threads. Both must produce identical results.
enum class ExecutionMode { Serial, Parallel };

ExecutionMode parse_execution_mode(std::string_view text);
int parallel_threads();

/// Calls fn(i) for i in [0, n). Work items must not share mutable state; results
/// are expected to be written to slot i of a pre-sized container. The first
/// exception thrown by any item is rethrown after the loop.
template <class Fn>
void for_each_index(std::size_t n, ExecutionMode mode, Fn&& fn) {
  if (mode == ExecutionMode::Serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace tally
