#pragma once

#include <string>

namespace tally {

/// Installs a stderr logger named `name` as the default logger at level warn, then
/// applies TALLYSIM_LOG when set (spdlog level syntax, e.g. "debug" or "info,tallysim=trace").
void init_logging(const std::string& name);

}  // namespace tally
