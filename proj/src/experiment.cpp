#include "tally/experiment.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "tally/profiler.hpp"

namespace tally::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;
using sched::PolicyKind;
using workloads::WorkloadKind;

OutputFile::OutputFile(std::string path) : path_(std::move(path)), tmp_(path_ + ".tmp") {
  const auto parent = fs::path(path_).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  out_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot write " + tmp_);
}

OutputFile::~OutputFile() {
  if (!committed_) {
    out_.close();
    std::error_code ec;
    fs::remove(tmp_, ec);
  }
}

void OutputFile::commit() {
  out_.flush();
  if (!out_) throw std::runtime_error("write failed for " + tmp_);
  out_.close();
  fs::rename(tmp_, path_);
  committed_ = true;
}

void write_file_atomic(const std::string& path, std::string_view content) {
  OutputFile f(path);
  f.stream() << content;
  f.commit();
}

const PolicyResult& ExperimentReport::result(PolicyKind p) const {
  for (const auto& r : results) {
    if (r.policy == p) return r;
  }
  throw std::out_of_range(std::string("report has no result for policy ") + sched::policy_name(p));
}

namespace {

std::uint64_t derived_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 step so neighbouring experiment seeds give unrelated arrival streams
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<sched::TaskScript> build_scripts(const ExperimentConfig& cfg) {
  std::vector<sched::TaskScript> scripts;
  for (std::size_t i = 0; i < cfg.workloads.size(); ++i) {
    sched::TaskScript s;
    s.spec = cfg.workloads[i];
    if (s.spec.kind == WorkloadKind::Inference) {
      const auto& tr = cfg.traces.at(s.spec.name);
      const auto latency = workloads::isolated_sequence_latency(s.spec, cfg.gpu);
      if (tr.file) {
        auto ts = workloads::load_trace(*tr.file);
        if (tr.load) ts = workloads::rescale_trace(ts, workloads::rescale_factor_for_load(ts, latency, *tr.load));
        std::erase_if(ts, [&](Duration t) { return t >= cfg.duration; });
        s.arrivals = std::move(ts);
      } else {
        s.arrivals = workloads::generate_arrivals(*tr.load, latency, cfg.duration,
                                                  tr.seed.value_or(derived_seed(cfg.seed, i)));
      }
    }
    scripts.push_back(std::move(s));
  }
  return scripts;
}

namespace {

struct RunJob {
  PolicyKind policy = PolicyKind::Eager;
  std::vector<sched::TaskScript> tasks;
  std::optional<std::string> event_path;
};

struct JobOutput {
  workloads::RunRecord record;
  sched::RunStats stats;
  std::uint64_t events = 0;
};

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, ExecutionMode mode,
                                const std::optional<std::string>& event_log_prefix) {
  cfg.validate();
  const auto scripts = build_scripts(cfg);

  profiler::Profiler warm(cfg.gpu, mode);
  for (const auto& s : scripts) {
    if (s.spec.priority == sim::Priority::High) continue;
    for (const auto& k : s.spec.kernels) {
      if (!k.inter_block_dependent) warm.profile(sched::profile_key(k), k.cost, cfg.profile_runs);
    }
  }

  // calibration runs first, then one run per policy
  std::vector<RunJob> jobs;
  for (const auto& s : scripts) jobs.push_back({PolicyKind::Eager, {s}, std::nullopt});
  for (const auto p : cfg.policies) {
    RunJob j{p, scripts, std::nullopt};
    if (event_log_prefix) j.event_path = *event_log_prefix + sched::policy_name(p) + ".csv";
    jobs.push_back(std::move(j));
  }

  std::vector<JobOutput> outputs(jobs.size());
  for_each_index(jobs.size(), mode, [&](std::size_t i) {
    const auto& job = jobs[i];
    profiler::Profiler prof = warm;  // the cache stays private to this run
    sched::RunOptions opt;
    opt.duration = cfg.duration;
    opt.placement_seed = cfg.seed;
    std::optional<OutputFile> events;
    if (job.event_path) {
      events.emplace(*job.event_path);
      events->stream() << sim::kEventCsvHeader;
    }
    std::uint64_t count = 0;
    opt.on_events = [&](std::span<const sim::SimEvent> batch) {
      count += batch.size();
      if (events) sim::write_event_rows(events->stream(), batch);
    };
    sched::SchedulerConfig sc{job.policy, cfg.threshold, cfg.quantum};
    auto out = sched::run_policy(sc, job.tasks, cfg.gpu, prof, opt);
    if (events) events->commit();
    outputs[i] = {std::move(out.record), out.stats, count};
  });

  ExperimentReport report;
  for (std::size_t i = 0; i < scripts.size(); ++i) {
    const auto m = workloads::raw_metrics(outputs[i].record);
    const auto& t = m.tasks.at(0);
    if (!(t.throughput > 0)) {
      throw std::runtime_error("calibration of " + t.name + " completed no work in the measurement window");
    }
    report.standalone_throughput[t.name] = t.throughput;
    report.standalone_p99[t.name] = t.p99;
  }
  for (std::size_t i = 0; i < cfg.policies.size(); ++i) {
    const auto& out = outputs[scripts.size() + i];
    PolicyResult r;
    r.policy = cfg.policies[i];
    r.metrics = workloads::compute_metrics(out.record, report.standalone_throughput);
    r.stats = out.stats;
    r.events = out.events;
    spdlog::info("{}: system throughput {:.4f}, {} events", sched::policy_name(r.policy),
                 r.metrics.system_throughput, r.events);
    report.results.push_back(std::move(r));
  }
  return report;
}

namespace {

std::string row_tail(const workloads::TaskMetrics& t, double system) {
  const std::string p99 = t.p99 ? fmt::format("{:.6f}", config::to_ms(*t.p99)) : std::string();
  return fmt::format("{},{},{:.6f},{:.6f}\n", t.name, p99, t.normalized_throughput, system);
}

}  // namespace

std::string metrics_rows(const ExperimentReport& report) {
  std::string out;
  for (const auto& r : report.results) {
    for (const auto& t : r.metrics.tasks) {
      out += std::string(sched::policy_name(r.policy)) + "," + row_tail(t, r.metrics.system_throughput);
    }
  }
  return out;
}

const char* axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::Threshold: return "threshold";
    case SweepAxis::Load: return "load";
    case SweepAxis::BeCount: return "be-count";
  }
  return "?";
}

std::optional<SweepAxis> parse_axis(std::string_view text) {
  for (const auto a : {SweepAxis::Threshold, SweepAxis::Load, SweepAxis::BeCount}) {
    if (text == axis_name(a)) return a;
  }
  return std::nullopt;
}

std::vector<double> default_axis_values(SweepAxis a) {
  switch (a) {
    case SweepAxis::Threshold: return {0.01, 0.0316, 0.1, 0.316, 1, 3.16, 10};
    case SweepAxis::Load: return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    case SweepAxis::BeCount: return {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  }
  return {};
}

ExperimentConfig apply_axis(const ExperimentConfig& cfg, SweepAxis axis, double value) {
  ExperimentConfig out = cfg;
  switch (axis) {
    case SweepAxis::Threshold:
      if (!(value > 0)) throw config::ConfigError("threshold sweep values must be > 0");
      out.threshold = config::from_ms(value);
      break;
    case SweepAxis::Load: {
      if (!(value > 0 && value < 1)) throw config::ConfigError("load sweep values must lie in (0, 1)");
      out.traces.at(out.high_priority().name).load = value;
      break;
    }
    case SweepAxis::BeCount: {
      if (!(value >= 1) || value != std::floor(value)) {
        throw config::ConfigError("be-count sweep values must be positive integers");
      }
      std::vector<workloads::WorkloadSpec> be;
      out.workloads.clear();
      for (const auto& w : cfg.workloads) {
        if (w.priority == sim::Priority::High) {
          out.workloads.push_back(w);
        } else {
          be.push_back(w);
        }
      }
      if (be.empty()) throw config::ConfigError("be-count sweep needs at least one best-effort workload");
      const auto n = static_cast<std::size_t>(value);
      for (std::size_t i = 0; i < n; ++i) {
        auto w = be[i % be.size()];
        if (i >= be.size()) w.name += "#" + std::to_string(i / be.size() + 1);
        out.workloads.push_back(std::move(w));
      }
      break;
    }
  }
  out.validate();
  return out;
}

std::vector<SweepPoint> run_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values,
                                  ExecutionMode mode) {
  if (values.empty()) throw config::ConfigError("sweep: no axis values");
  std::vector<ExperimentConfig> configs;
  for (const auto v : values) configs.push_back(apply_axis(cfg, axis, v));
  std::vector<SweepPoint> points;
  for (std::size_t i = 0; i < values.size(); ++i) {
    spdlog::info("sweep {} = {}", axis_name(axis), values[i]);
    points.push_back({values[i], run_experiment(configs[i], mode)});
  }
  return points;
}

std::string sweep_csv(SweepAxis axis, const std::vector<SweepPoint>& points) {
  std::string out = kSweepCsvHeader;
  for (const auto& p : points) {
    for (const auto& r : p.report.results) {
      for (const auto& t : r.metrics.tasks) {
        out += fmt::format("{},{},{},", axis_name(axis), p.value, sched::policy_name(r.policy)) +
               row_tail(t, r.metrics.system_throughput);
      }
    }
  }
  return out;
}

std::string manifest_json(const ExperimentConfig& cfg, const std::string& command,
                          const std::optional<SweepAxis>& axis, const std::vector<double>& values,
                          const std::vector<std::string>& files) {
  json doc;
  doc["schema_version"] = config::kSchemaVersion;
  doc["command"] = command;
  doc["config_hash"] = config::config_hash(cfg);
  doc["seed"] = cfg.seed;
  if (axis) {
    doc["axis"] = axis_name(*axis);
    doc["values"] = values;
  }
  doc["outputs"] = files;
  doc["config"] = json::parse(config::to_json(cfg));
  return doc.dump(2) + "\n";
}

bool looks_like_manifest(const std::string& text) {
  try {
    const auto doc = json::parse(text);
    return doc.is_object() && doc.contains("config_hash") && doc.contains("config");
  } catch (const json::exception&) {
    return false;
  }
}

Manifest parse_manifest(const std::string& text) {
  try {
    const auto doc = json::parse(text);
    if (doc.at("schema_version").get<int>() != config::kSchemaVersion) {
      throw config::ConfigError("manifest: unsupported schema_version");
    }
    Manifest m;
    m.command = doc.at("command").get<std::string>();
    m.config = config::parse_config(doc.at("config").dump(), ".");
    if (config::config_hash(m.config) != doc.at("config_hash").get<std::string>()) {
      throw config::ConfigError("manifest: config does not match config_hash");
    }
    if (doc.contains("axis")) {
      m.axis = parse_axis(doc.at("axis").get<std::string>());
      if (!m.axis) throw config::ConfigError("manifest: unknown axis");
      m.values = doc.at("values").get<std::vector<double>>();
    }
    return m;
  } catch (const json::exception& e) {
    throw config::ConfigError(std::string("manifest: ") + e.what());
  }
}

WrittenOutputs run_and_write(const ExperimentConfig& cfg, ExecutionMode mode) {
  fs::create_directories(cfg.out_dir);
  const auto dir = fs::path(cfg.out_dir);
  std::optional<std::string> prefix;
  if (cfg.event_log) prefix = (dir / "events_").string();
  const auto report = run_experiment(cfg, mode, prefix);
  WrittenOutputs w;
  write_file_atomic((dir / "metrics.csv").string(), kMetricsCsvHeader + metrics_rows(report));
  w.files.push_back("metrics.csv");
  if (cfg.event_log) {
    for (const auto p : cfg.policies) w.files.push_back(std::string("events_") + sched::policy_name(p) + ".csv");
  }
  write_file_atomic((dir / "manifest.json").string(), manifest_json(cfg, "run", std::nullopt, {}, w.files));
  w.files.push_back("manifest.json");
  return w;
}

WrittenOutputs sweep_and_write(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values,
                               ExecutionMode mode) {
  fs::create_directories(cfg.out_dir);
  const auto dir = fs::path(cfg.out_dir);
  const auto points = run_sweep(cfg, axis, values, mode);
  WrittenOutputs w;
  const std::string name = std::string("sweep_") + axis_name(axis) + ".csv";
  write_file_atomic((dir / name).string(), sweep_csv(axis, points));
  w.files.push_back(name);
  write_file_atomic((dir / "manifest.json").string(), manifest_json(cfg, "sweep", axis, values, w.files));
  w.files.push_back("manifest.json");
  return w;
}

}  // namespace tally::experiment
