#include "tally/profiler.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>
#include <tuple>

namespace tally::profiler {

using json = nlohmann::json;
using transforms::Fraction;

std::string ConfigCandidate::str() const {
  switch (kind) {
    case Kind::Ptb: return "ptb:" + std::to_string(workers);
    case Kind::Sliced: return "sliced:" + std::to_string(fraction.num) + "/" + std::to_string(fraction.den);
    case Kind::Original: return "original";
  }
  return "?";
}

ConfigCandidate ConfigCandidate::parse(const std::string& text) {
  if (text == "original") return original();
  if (text.starts_with("ptb:")) {
    std::size_t used = 0;
    const auto w = std::stoll(text.substr(4), &used);
    if (used != text.size() - 4 || w < 1) throw std::invalid_argument("bad candidate '" + text + "'");
    return ptb(w);
  }
  if (text.starts_with("sliced:")) return sliced(Fraction::parse(text.substr(7)));
  throw std::invalid_argument("bad candidate '" + text + "'");
}

ir::Dim3 linear_grid(std::int64_t total_blocks) { return ir::Dim3{total_blocks, 1, 1}; }

namespace {

const Fraction kSliceMenu[] = {{1, 2}, {1, 4}, {1, 8}, {1, 16}, {1, 32}};

}  // namespace

std::vector<ConfigCandidate> candidate_configs(const KernelCostModel& cost, const GpuSpec& gpu,
                                               const ir::Dim3& grid) {
  if (grid.total() != cost.total_blocks) {
    throw std::invalid_argument("candidate_configs: grid does not match total_blocks");
  }
  std::vector<ConfigCandidate> out{ConfigCandidate::original()};
  const int per_sm = gpu.blocks_per_sm_for(cost.threads_per_block);
  for (int k = 1; k <= per_sm; ++k) {
    const std::int64_t workers = static_cast<std::int64_t>(k) * gpu.num_sms;
    if (workers > cost.total_blocks) break;
    out.push_back(ConfigCandidate::ptb(workers));
  }
  std::set<std::vector<std::int64_t>> tilings;
  std::vector<Fraction> menu(std::begin(kSliceMenu), std::end(kSliceMenu));
  menu.push_back(Fraction{1, cost.total_blocks});
  for (const auto& f : menu) {
    if (f.num > f.den) continue;
    auto counts = transforms::slice_block_counts(grid, f);
    if (counts.size() < 2) continue;  // a single slice is the original launch
    if (tilings.insert(std::move(counts)).second) out.push_back(ConfigCandidate::sliced(f));
  }
  return out;
}

Duration estimate_turnaround(const ConfigCandidate& c, Duration kernel_latency,
                             std::int64_t total_blocks, Duration single_slice) {
  switch (c.kind) {
    case ConfigCandidate::Kind::Ptb:
      return kernel_latency * std::min(c.workers, total_blocks) / total_blocks;
    case ConfigCandidate::Kind::Sliced: return single_slice;
    case ConfigCandidate::Kind::Original: return kernel_latency;
  }
  return kernel_latency;
}

sim::LaunchShape to_shape(const ConfigCandidate& c, const ir::Dim3& grid) {
  switch (c.kind) {
    case ConfigCandidate::Kind::Ptb: return sim::PtbShape{c.workers, 0};
    case ConfigCandidate::Kind::Sliced:
      return sim::SlicedShape{transforms::slice_block_counts(grid, c.fraction)};
    case ConfigCandidate::Kind::Original: return sim::OriginalShape{};
  }
  return sim::OriginalShape{};
}

bool operator<(const ProfileKey& a, const ProfileKey& b) {
  auto tie = [](const ProfileKey& k) {
    return std::tie(k.kernel, k.grid.x, k.grid.y, k.grid.z, k.block.x, k.block.y, k.block.z);
  };
  return tie(a) < tie(b);
}

namespace {

auto preference(const ConfigCandidate& c) {
  const double param = c.kind == ConfigCandidate::Kind::Ptb ? static_cast<double>(c.workers)
                                                            : c.fraction.value();
  return std::make_tuple(static_cast<int>(c.kind), param);
}

}  // namespace

ConfigCandidate select_config(const std::vector<ProfileRecord>& records, Duration threshold) {
  if (records.empty()) throw std::invalid_argument("select_config: no records");
  const ProfileRecord* best = nullptr;
  auto better = [](const ProfileRecord& a, const ProfileRecord& b, auto metric) {
    if (metric(a) != metric(b)) return metric(a) < metric(b);
    return preference(a.candidate) < preference(b.candidate);
  };
  const auto latency = [](const ProfileRecord& r) { return r.kernel_latency; };
  const auto estimate = [](const ProfileRecord& r) { return r.turnaround_estimate; };
  for (const auto& r : records) {
    if (r.turnaround_estimate > threshold) continue;
    if (!best || better(r, *best, latency)) best = &r;
  }
  if (best) return best->candidate;
  for (const auto& r : records) {
    if (!best || better(r, *best, estimate)) best = &r;
  }
  return best->candidate;
}

Profiler::Profiler(GpuSpec gpu, ExecutionMode mode) : gpu_(gpu), mode_(mode) { gpu_.validate(); }

namespace {

struct RunResult {
  bool feasible = true;
  Duration latency{0};
  Duration single_slice{0};
};

RunResult isolated_run(const GpuSpec& spec, const KernelCostModel& cost, const sim::LaunchShape& shape,
                       std::uint64_t seed) {
  RunResult r;
  sim::Gpu gpu(spec, seed, false);
  sim::SimLaunch launch;
  launch.priority = sim::Priority::BestEffort;
  launch.cost = cost;
  launch.shape = shape;
  sim::KernelHandle h = 0;
  try {
    h = gpu.submit(launch, Duration{0});
  } catch (const std::invalid_argument&) {
    r.feasible = false;
    return r;
  }
  std::optional<Duration> first_issue;
  while (const auto t = gpu.next_event_time()) {
    for (const auto& e : gpu.run_until(*t)) {
      if (e.kind == sim::EventKind::LaunchIssued && e.block == 0 && !first_issue) first_issue = e.time;
      if (e.kind == sim::EventKind::KernelFinished && e.block == 0 && first_issue &&
          r.single_slice == Duration{0}) {
        r.single_slice = e.time - *first_issue;
      }
    }
  }
  r.latency = *gpu.finish_time(h);
  return r;
}

}  // namespace

std::vector<ProfileRecord> Profiler::measure(const ProfileKey& key, const KernelCostModel& cost,
                                             const std::vector<ConfigCandidate>& candidates, int runs) {
  if (runs < 1) throw std::invalid_argument("profile: runs must be >= 1");
  if (key.grid.total() != cost.total_blocks) {
    throw std::invalid_argument("profile: key grid does not match the cost model's block count");
  }
  const auto n = candidates.size() * static_cast<std::size_t>(runs);
  std::vector<RunResult> results(n);
  for_each_index(n, mode_, [&](std::size_t i) {
    const auto& c = candidates[i / static_cast<std::size_t>(runs)];
    results[i] = isolated_run(gpu_, cost, to_shape(c, key.grid), i % static_cast<std::size_t>(runs));
  });
  sim_runs_ += n;

  std::vector<ProfileRecord> records;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    Duration latency{0};
    Duration slice{0};
    bool feasible = true;
    for (int r = 0; r < runs; ++r) {
      const auto& res = results[c * static_cast<std::size_t>(runs) + static_cast<std::size_t>(r)];
      feasible = feasible && res.feasible;
      latency += res.latency;
      slice += res.single_slice;
    }
    if (!feasible) {
      spdlog::warn("profile {}: candidate {} is infeasible on this GPU, skipped", key.kernel,
                   candidates[c].str());
      continue;
    }
    ProfileRecord rec;
    rec.candidate = candidates[c];
    rec.runs = runs;
    rec.kernel_latency = latency / runs;
    rec.turnaround_estimate =
        estimate_turnaround(rec.candidate, rec.kernel_latency, cost.total_blocks, slice / runs);
    records.push_back(rec);
    spdlog::debug("profile {}: {} latency {} ns, turnaround {} ns", key.kernel, rec.candidate.str(),
                  rec.kernel_latency.count(), rec.turnaround_estimate.count());
  }
  return records;
}

const std::vector<ProfileRecord>& Profiler::profile(const ProfileKey& key, const KernelCostModel& cost,
                                                    int runs) {
  if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
  auto records = measure(key, cost, candidate_configs(cost, gpu_, key.grid), runs);
  return cache_.emplace(key, std::move(records)).first->second;
}

ConfigCandidate Profiler::choose(const ProfileKey& key, const KernelCostModel& cost, Duration threshold,
                                 bool inter_block_dependent) {
  if (inter_block_dependent) return ConfigCandidate::original();
  return select_config(profile(key, cost), threshold);
}

namespace {

json dim_json(const ir::Dim3& d) { return json::array({d.x, d.y, d.z}); }

ir::Dim3 dim_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("profile cache: dims must be [x, y, z]");
  return ir::Dim3{j[0].get<std::int64_t>(), j[1].get<std::int64_t>(), j[2].get<std::int64_t>()};
}

}  // namespace

std::string Profiler::dump() const {
  json doc;
  doc["schema_version"] = 1;
  doc["gpu"] = {{"num_sms", gpu_.num_sms},
                {"max_threads_per_sm", gpu_.max_threads_per_sm},
                {"max_blocks_per_sm", gpu_.max_blocks_per_sm}};
  json entries = json::array();
  for (const auto& [key, records] : cache_) {
    json recs = json::array();
    for (const auto& r : records) {
      recs.push_back({{"candidate", r.candidate.str()},
                      {"kernel_latency_ns", r.kernel_latency.count()},
                      {"turnaround_estimate_ns", r.turnaround_estimate.count()},
                      {"runs", r.runs}});
    }
    entries.push_back({{"kernel", key.kernel},
                       {"grid", dim_json(key.grid)},
                       {"block", dim_json(key.block)},
                       {"records", recs}});
  }
  doc["entries"] = entries;
  return doc.dump(2) + "\n";
}

void Profiler::load(const std::string& text) {
  std::map<ProfileKey, std::vector<ProfileRecord>> cache;
  try {
    const auto doc = json::parse(text);
    if (doc.at("schema_version").get<int>() != 1) {
      throw std::invalid_argument("profile cache: unsupported schema_version");
    }
    const auto& g = doc.at("gpu");
    const GpuSpec spec{g.at("num_sms").get<int>(), g.at("max_threads_per_sm").get<int>(),
                       g.at("max_blocks_per_sm").get<int>()};
    if (!(spec == gpu_)) throw std::invalid_argument("profile cache: recorded for a different GPU");
    for (const auto& e : doc.at("entries")) {
      ProfileKey key{e.at("kernel").get<std::string>(), dim_from(e.at("grid")), dim_from(e.at("block"))};
      std::vector<ProfileRecord> records;
      for (const auto& r : e.at("records")) {
        ProfileRecord rec;
        rec.candidate = ConfigCandidate::parse(r.at("candidate").get<std::string>());
        rec.kernel_latency = Duration{r.at("kernel_latency_ns").get<std::int64_t>()};
        rec.turnaround_estimate = Duration{r.at("turnaround_estimate_ns").get<std::int64_t>()};
        rec.runs = r.at("runs").get<int>();
        if (rec.runs < 1 || rec.kernel_latency < Duration{0} || rec.turnaround_estimate < Duration{0}) {
          throw std::invalid_argument("profile cache: invalid record for " + key.kernel);
        }
        records.push_back(rec);
      }
      if (records.empty()) throw std::invalid_argument("profile cache: no records for " + key.kernel);
      cache[key] = std::move(records);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("profile cache: ") + e.what());
  }
  cache_ = std::move(cache);
}

}  // namespace tally::profiler
