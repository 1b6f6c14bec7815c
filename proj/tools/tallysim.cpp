// tallysim: command-line front end for the kernel transforms, the IR interpreter,
// the profiler and the co-location experiments.
//
// Exit codes
//   0  success
//   1  runtime failure (I/O, simulation error)
//   2  invalid input: command line, IR parse error, config validation
//   3  transform refused (inter-block-dependent kernel or unmet precondition)
//   4  interpret: DivergentBarrier
//   5  interpret: StepLimitExceeded
//   6  interpret: MemoryFault

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "tally/config.hpp"
#include "tally/experiment.hpp"
#include "tally/interpreter.hpp"
#include "tally/ir.hpp"
#include "tally/logging.hpp"
#include "tally/profiler.hpp"
#include "tally/transforms.hpp"

namespace {

using namespace tally;
using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitRuntime = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitRefused = 3;

struct InvalidInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    experiment::write_file_atomic(path, text);
  }
}

json dim_json(const ir::Dim3& d) { return json::array({d.x, d.y, d.z}); }

// ---- transform ----

struct TransformArgs {
  std::string input;
  std::vector<std::string> passes;
  std::string fraction = "1/2";
  std::int64_t workers = 0;
  std::string output;
  std::string table;
};

int cmd_transform(const TransformArgs& a) {
  ir::KernelDef k;
  try {
    k = ir::parse_kernel(read_file(a.input));
  } catch (const ir::ParseError& e) {
    std::cerr << a.input << ":" << e.line() << ":" << e.column() << ": " << e.what() << "\n";
    return kExitInvalid;
  }
  std::optional<json> table;
  for (const auto& pass : a.passes) {
    if (pass == "slice") {
      if (table) throw InvalidInput("slice can appear only once in a pipeline");
      const auto plan = transforms::slice_kernel(k, transforms::Fraction::parse(a.fraction));
      json subs = json::array();
      for (std::size_t i = 0; i < plan.sub_launches.size(); ++i) {
        subs.push_back({{"index", i},
                        {"block_offset", dim_json(plan.sub_launches[i].block_offset)},
                        {"grid", dim_json(plan.sub_launches[i].sub_grid)}});
      }
      table = json{{"schema_version", 1},
                   {"kernel", plan.base_kernel.name},
                   {"fraction", transforms::Fraction::parse(a.fraction).str()},
                   {"sub_launches", subs}};
      k = plan.base_kernel;
    } else if (pass == "unify-sync") {
      k = transforms::unify_synchronization(k);
    } else if (pass == "ptb") {
      if (a.workers < 1) throw InvalidInput("ptb needs --workers >= 1");
      k = transforms::make_preemptible(k, ir::Dim3{a.workers, 1, 1}).kernel;
    } else {
      throw InvalidInput("unknown pass '" + pass + "'");
    }
  }
  write_output(a.output, ir::emit_kernel(k));
  if (table) write_output(a.table, table->dump(2) + "\n");
  return 0;
}

// ---- interpret ----

struct InterpretArgs {
  std::string kernel;
  std::string launch;
  std::optional<std::uint64_t> seed;
};

int cmd_interpret(const InterpretArgs& a) {
  ir::LaunchSpec spec;
  try {
    spec.kernel = ir::parse_kernel(read_file(a.kernel));
  } catch (const ir::ParseError& e) {
    std::cerr << a.kernel << ":" << e.line() << ":" << e.column() << ": " << e.what() << "\n";
    return kExitInvalid;
  }
  std::uint64_t seed = 0;
  std::uint64_t step_limit = ir::kDefaultStepLimit;
  try {
    const auto doc = json::parse(read_file(a.launch));
    if (doc.at("schema_version").get<int>() != 1) throw InvalidInput("launch config: unsupported schema_version");
    for (const auto& [key, v] : doc.items()) {
      if (key != "schema_version" && key != "args" && key != "memory" && key != "memory_words" &&
          key != "seed" && key != "step_limit") {
        throw InvalidInput("launch config: unknown field '" + key + "'");
      }
    }
    spec.args = doc.value("args", std::vector<ir::Word>{});
    if (doc.contains("memory") == doc.contains("memory_words")) {
      throw InvalidInput("launch config: give exactly one of 'memory' and 'memory_words'");
    }
    if (doc.contains("memory")) {
      spec.global_memory = doc.at("memory").get<std::vector<ir::Word>>();
    } else {
      const auto n = doc.at("memory_words").get<std::int64_t>();
      if (n < 0) throw InvalidInput("launch config: memory_words must be >= 0");
      spec.global_memory.assign(static_cast<std::size_t>(n), 0);
    }
    seed = doc.value("seed", std::uint64_t{0});
    step_limit = doc.value("step_limit", step_limit);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("launch config: ") + e.what());
  }
  if (a.seed) seed = *a.seed;
  try {
    ir::validate(spec.kernel);
  } catch (const ir::ValidationError& e) {
    throw InvalidInput(a.kernel + ": " + e.what());
  }
  if (spec.args.size() != spec.kernel.params.size()) {
    throw InvalidInput("launch config: kernel takes " + std::to_string(spec.kernel.params.size()) + " args");
  }
  const auto r = ir::interpret(spec, seed, step_limit);
  std::ostringstream out;
  out << "status=" << ir::status_name(r.status) << "\n";
  out << "steps=" << r.steps_executed << "\n";
  if (!r.detail.empty()) out << "detail=" << r.detail << "\n";
  if (r.status == ir::ExecStatus::Completed) {
    out << "address,value\n";
    for (std::size_t i = 0; i < r.final_memory.size(); ++i) out << i << "," << r.final_memory[i] << "\n";
  }
  std::cout << out.str();
  switch (r.status) {
    case ir::ExecStatus::Completed: return 0;
    case ir::ExecStatus::DivergentBarrier: return 4;
    case ir::ExecStatus::StepLimitExceeded: return 5;
    case ir::ExecStatus::MemoryFault: return 6;
  }
  return kExitRuntime;
}

// ---- experiment commands ----

struct ExperimentFlags {
  std::string config;
  std::string policy;
  std::optional<double> threshold_ms;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration_s;
  std::string out_dir;
  std::string trace;
  std::optional<double> load;
  bool events = false;
  bool serial = false;
};

struct Loaded {
  config::ExperimentConfig cfg;
  std::optional<experiment::SweepAxis> axis;
  std::vector<double> values;
};

Loaded load_with_overrides(const ExperimentFlags& f) {
  Loaded l;
  const auto text = read_file(f.config);
  if (experiment::looks_like_manifest(text)) {
    auto m = experiment::parse_manifest(text);
    l.cfg = std::move(m.config);
    l.axis = m.axis;
    l.values = std::move(m.values);
  } else {
    const auto parent = fs::path(f.config).parent_path();
    l.cfg = config::parse_config(text, parent.empty() ? "." : parent.string());
  }
  auto& cfg = l.cfg;
  if (!f.policy.empty()) {
    cfg.policies.clear();
    std::stringstream ss(f.policy);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto p = sched::parse_policy(item);
      if (!p) throw config::ConfigError("--policy: unknown policy '" + item + "'");
      cfg.policies.push_back(*p);
    }
  }
  if (f.threshold_ms) cfg.threshold = config::from_ms(*f.threshold_ms);
  if (f.seed) cfg.seed = *f.seed;
  if (f.duration_s) cfg.duration = sim::Duration{static_cast<std::int64_t>(std::llround(*f.duration_s * 1e9))};
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (f.events) cfg.event_log = true;
  if (!f.trace.empty() || f.load) {
    auto& tr = cfg.traces[cfg.high_priority().name];
    if (!f.trace.empty()) {
      tr.file = f.trace;
      tr.load.reset();  // replay as recorded unless --load asks for rescaling
      tr.seed.reset();
    }
    if (f.load) tr.load = *f.load;
  }
  if (f.threshold_ms && !(*f.threshold_ms > 0)) throw config::ConfigError("--threshold-ms must be > 0");
  cfg.validate();
  return l;
}

/// Config problems keep exit status 2; anything thrown once simulation starts is a
/// runtime failure, whatever its type.
template <class F>
auto as_runtime(F&& f) {
  try {
    return f();
  } catch (const config::ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw std::runtime_error(e.what());
  }
}

ExecutionMode mode_of(const ExperimentFlags& f) {
  return f.serial ? ExecutionMode::Serial : ExecutionMode::Parallel;
}

int cmd_run(const ExperimentFlags& f) {
  const auto l = load_with_overrides(f);
  const auto written = as_runtime([&] { return experiment::run_and_write(l.cfg, mode_of(f)); });
  for (const auto& file : written.files) std::cout << (fs::path(l.cfg.out_dir) / file).string() << "\n";
  return 0;
}

int cmd_sweep(const ExperimentFlags& f, const std::string& axis_text, const std::vector<double>& values_flag) {
  const auto l = load_with_overrides(f);
  std::optional<experiment::SweepAxis> axis = l.axis;
  if (!axis_text.empty()) axis = experiment::parse_axis(axis_text);
  if (!axis) throw config::ConfigError("--axis must be threshold, load or be-count");
  std::vector<double> values = values_flag;
  if (values.empty()) values = l.axis == axis ? l.values : std::vector<double>{};
  if (values.empty()) values = experiment::default_axis_values(*axis);
  for (const auto v : values) experiment::apply_axis(l.cfg, *axis, v);
  const auto written = as_runtime([&] { return experiment::sweep_and_write(l.cfg, *axis, values, mode_of(f)); });
  for (const auto& file : written.files) std::cout << (fs::path(l.cfg.out_dir) / file).string() << "\n";
  return 0;
}

int cmd_profile(const ExperimentFlags& f, const std::string& cache_in) {
  const auto l = load_with_overrides(f);
  const auto& cfg = l.cfg;
  profiler::Profiler prof(cfg.gpu, mode_of(f));
  if (!cache_in.empty()) prof.load(read_file(cache_in));
  std::cout << "kernel,candidate,kernel_latency_ms,turnaround_estimate_ms,chosen\n";
  for (const auto& w : cfg.workloads) {
    for (const auto& k : w.kernels) {
      const auto key = sched::profile_key(k);
      const auto& records = prof.profile(key, k.cost, cfg.profile_runs);
      const auto chosen = prof.choose(key, k.cost, cfg.threshold, k.inter_block_dependent);
      for (const auto& r : records) {
        std::cout << k.name << "," << r.candidate.str() << "," << config::to_ms(r.kernel_latency) << ","
                  << config::to_ms(r.turnaround_estimate) << "," << (r.candidate == chosen ? 1 : 0) << "\n";
      }
    }
  }
  const auto path = (fs::path(cfg.out_dir) / "profile_cache.json").string();
  experiment::write_file_atomic(path, prof.dump());
  spdlog::info("profile cache written to {}", path);
  return 0;
}

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("config", f.config, "Experiment config (JSON) or a manifest from an earlier run")->required();
  cmd->add_option("--policy", f.policy, "tally, eager, kernel-priority, time-sliced (comma-separated)");
  cmd->add_option("--threshold-ms", f.threshold_ms, "Turnaround latency threshold in milliseconds");
  cmd->add_option("--seed", f.seed, "Experiment seed");
  cmd->add_option("--duration-s", f.duration_s, "Simulated duration in seconds");
  cmd->add_option("--out-dir", f.out_dir, "Output directory");
  cmd->add_option("--trace", f.trace, "Arrival trace (ms timestamps) for the high-priority workload");
  cmd->add_option("--load", f.load, "Target load of the high-priority workload");
  cmd->add_flag("--events", f.events, "Also write the event log of every policy run");
  cmd->add_flag("--serial", f.serial, "Run independent simulations one after another");
}

}  // namespace

int main(int argc, char** argv) {
  init_logging("tallysim");
  CLI::App app{"Block-level GPU sharing simulator"};
  app.require_subcommand(1);

  TransformArgs ta;
  auto* transform = app.add_subcommand("transform", "Apply kernel transforms to an IR file");
  transform->add_option("input", ta.input, "Input IR file")->required();
  transform->add_option("--pass", ta.passes, "slice, unify-sync or ptb; repeat to chain passes")
      ->required()
      ->check(CLI::IsMember({"slice", "unify-sync", "ptb"}));
  transform->add_option("--fraction", ta.fraction, "Slice fraction, e.g. 1/4");
  transform->add_option("--workers", ta.workers, "PTB worker blocks");
  transform->add_option("-o,--output", ta.output, "Output IR file (default stdout)");
  transform->add_option("--table", ta.table, "Sub-launch table file for slice (default stdout)");

  InterpretArgs ia;
  auto* interpret = app.add_subcommand("interpret", "Run an IR kernel and print the final memory");
  interpret->add_option("kernel", ia.kernel, "IR file")->required();
  interpret->add_option("launch", ia.launch, "Launch config (JSON)")->required();
  interpret->add_option("--seed", ia.seed, "Block schedule seed (overrides the launch config)");

  ExperimentFlags pf;
  std::string cache_in;
  auto* profile = app.add_subcommand("profile", "Profile every kernel of a config and dump the cache");
  add_experiment_flags(profile, pf);
  profile->add_option("--cache", cache_in, "Start from an earlier profile cache");

  ExperimentFlags rf;
  auto* run = app.add_subcommand("run", "Run one experiment");
  add_experiment_flags(run, rf);

  ExperimentFlags sf;
  std::string axis;
  std::vector<double> values;
  auto* sweep = app.add_subcommand("sweep", "Run an experiment across threshold, load or BE-count values");
  add_experiment_flags(sweep, sf);
  sweep->add_option("--axis", axis, "threshold, load or be-count");
  sweep->add_option("--values", values, "Axis values (default grid per axis)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*transform) return cmd_transform(ta);
    if (*interpret) return cmd_interpret(ia);
    if (*profile) return cmd_profile(pf, cache_in);
    if (*run) return cmd_run(rf);
    if (*sweep) return cmd_sweep(sf, axis, values);
  } catch (const transforms::TransformRefused& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return kExitRefused;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ir::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::invalid_argument& e) {  // ConfigError and argument validation
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
