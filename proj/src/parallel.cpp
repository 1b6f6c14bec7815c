#include "tally/parallel.hpp"

#include <omp.h>

#include <stdexcept>
#include <string>

namespace tally {

ExecutionMode parse_execution_mode(std::string_view text) {
  if (text == "serial") return ExecutionMode::Serial;
  if (text == "parallel" || text == "openmp") return ExecutionMode::Parallel;
  throw std::invalid_argument("unknown execution mode '" + std::string(text) + "'");
}

int parallel_threads() { return omp_get_max_threads(); }

}  // namespace tally
