#include "tally/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "tally/ir.hpp"

namespace tally::config {

using json = nlohmann::json;
namespace fs = std::filesystem;
using workloads::KernelSpec;
using workloads::WorkloadKind;
using workloads::WorkloadSpec;

Duration from_ms(double ms) { return Duration{static_cast<std::int64_t>(std::llround(ms * 1e6))}; }
double to_ms(Duration d) { return static_cast<double>(d.count()) / 1e6; }

namespace {

Duration from_us(double us) { return Duration{static_cast<std::int64_t>(std::llround(us * 1e3))}; }
double to_us(Duration d) { return static_cast<double>(d.count()) / 1e3; }

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : obj.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown field '" + k + "'");
  }
}

template <class T>
T get(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": field '" + key + "' has the wrong type");
  }
}

template <class T>
T get_or(const json& obj, const std::string& key, T fallback, const std::string& where) {
  return obj.contains(key) ? get<T>(obj, key, where) : fallback;
}

sim::Priority parse_priority(const std::string& text, const std::string& where) {
  if (text == "high") return sim::Priority::High;
  if (text == "best-effort") return sim::Priority::BestEffort;
  throw ConfigError(where + ": priority must be 'high' or 'best-effort'");
}

const char* priority_text(sim::Priority p) { return p == sim::Priority::High ? "high" : "best-effort"; }

std::string resolve(const std::string& path, const std::string& base_dir) {
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (fs::path(base_dir) / p).lexically_normal().string();
}

KernelSpec parse_kernel(const json& j, const std::string& where, const std::string& base_dir) {
  check_keys(j, {"name", "block_us", "blocks", "threads_per_block", "grid", "launch_overhead_us",
                 "iteration_overhead_us", "inter_block_dependent", "ir"},
             where);
  KernelSpec k;
  k.cost.block_duration = from_us(get<double>(j, "block_us", where));
  if (j.contains("ir")) {
    const auto path = resolve(get<std::string>(j, "ir", where), base_dir);
    std::ifstream in(path);
    if (!in) throw ConfigError(where + ": cannot open IR file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    ir::KernelDef def;
    try {
      def = ir::parse_kernel(buf.str());
    } catch (const ir::ParseError& e) {
      throw ConfigError(where + ": " + path + ": " + e.what());
    }
    k.name = get_or<std::string>(j, "name", def.name, where);
    k.grid = def.grid;
    k.cost.total_blocks = def.grid.total();
    k.cost.threads_per_block = static_cast<int>(def.block.total());
    k.inter_block_dependent = def.inter_block_dependent;
    for (const char* f : {"blocks", "grid", "threads_per_block", "inter_block_dependent"}) {
      if (j.contains(f)) throw ConfigError(where + ": '" + f + "' comes from the IR file");
    }
  } else {
    k.name = get<std::string>(j, "name", where);
    k.cost.total_blocks = get<std::int64_t>(j, "blocks", where);
    k.cost.threads_per_block = get_or<int>(j, "threads_per_block", 128, where);
    if (j.contains("grid")) {
      const auto g = get<std::vector<std::int64_t>>(j, "grid", where);
      if (g.size() != 3) throw ConfigError(where + ": grid must be [x, y, z]");
      k.grid = ir::Dim3{g[0], g[1], g[2]};
    } else {
      k.grid = ir::Dim3{k.cost.total_blocks, 1, 1};
    }
    k.inter_block_dependent = get_or<bool>(j, "inter_block_dependent", false, where);
  }
  k.cost.launch_overhead = from_us(get_or<double>(j, "launch_overhead_us", to_us(sim::kDefaultLaunchOverhead), where));
  k.cost.ptb_iteration_overhead = j.contains("iteration_overhead_us")
                                      ? from_us(get<double>(j, "iteration_overhead_us", where))
                                      : sim::default_iteration_overhead(k.cost.block_duration);
  return k;
}

WorkloadSpec parse_workload(const json& j, const std::string& where, const std::string& base_dir) {
  if (j.contains("suite")) {
    check_keys(j, {"suite", "name", "priority"}, where);
    const auto id = get<std::string>(j, "suite", where);
    auto w = workloads::suite::by_name(id);
    if (!w) throw ConfigError(where + ": unknown suite workload '" + id + "'");
    if (j.contains("name")) w->name = get<std::string>(j, "name", where);
    if (j.contains("priority")) w->priority = parse_priority(get<std::string>(j, "priority", where), where);
    return *w;
  }
  check_keys(j, {"name", "kind", "priority", "kernels"}, where);
  WorkloadSpec w;
  w.name = get<std::string>(j, "name", where);
  const auto kind = get<std::string>(j, "kind", where);
  if (kind == "inference") {
    w.kind = WorkloadKind::Inference;
  } else if (kind == "training") {
    w.kind = WorkloadKind::Training;
  } else {
    throw ConfigError(where + ": kind must be 'inference' or 'training'");
  }
  w.priority = parse_priority(get_or<std::string>(j, "priority", "best-effort", where), where);
  if (!j.contains("kernels") || !j.at("kernels").is_array()) throw ConfigError(where + ": kernels must be a list");
  for (std::size_t i = 0; i < j.at("kernels").size(); ++i) {
    w.kernels.push_back(parse_kernel(j.at("kernels")[i], where + ".kernels[" + std::to_string(i) + "]", base_dir));
  }
  return w;
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    gpu.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("gpu: ") + e.what());
  }
  if (workloads.empty()) throw ConfigError("workloads: list is empty");
  std::set<std::string> names;
  int high = 0;
  for (const auto& w : workloads) {
    try {
      w.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!names.insert(w.name).second) throw ConfigError("workloads: duplicate name '" + w.name + "'");
    if (w.priority == sim::Priority::High) ++high;
    for (const auto& k : w.kernels) {
      if (gpu.blocks_per_sm_for(k.cost.threads_per_block) == 0) {
        throw ConfigError("workload " + w.name + ": kernel " + k.name + " does not fit on an SM");
      }
    }
    const auto t = traces.find(w.name);
    if (w.kind == WorkloadKind::Inference) {
      if (t == traces.end()) throw ConfigError("traces: inference workload '" + w.name + "' has no trace");
      const auto& tr = t->second;
      if (!tr.file && !tr.load) throw ConfigError("traces." + w.name + ": needs 'file' or 'load'");
      if (tr.load && !(*tr.load > 0 && *tr.load < 1)) throw ConfigError("traces." + w.name + ": load must lie in (0, 1)");
      if (tr.file && !fs::exists(*tr.file)) throw ConfigError("traces." + w.name + ": file " + *tr.file + " does not exist");
    } else if (t != traces.end()) {
      throw ConfigError("traces: '" + w.name + "' is a training workload");
    }
  }
  for (const auto& [name, tr] : traces) {
    if (!names.count(name)) throw ConfigError("traces: no workload named '" + name + "'");
  }
  if (high != 1) throw ConfigError("workloads: exactly one high-priority workload is required, found " + std::to_string(high));
  if (policies.empty()) throw ConfigError("scheduler: no policies");
  for (const auto p : policies) {
    try {
      sched::SchedulerConfig{p, threshold, quantum}.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (duration <= Duration{0}) throw ConfigError("duration_s must be > 0");
  if (profile_runs < 1) throw ConfigError("profile_runs must be >= 1");
  if (out_dir.empty()) throw ConfigError("outputs.dir is empty");
}

const workloads::WorkloadSpec& ExperimentConfig::high_priority() const {
  for (const auto& w : workloads) {
    if (w.priority == sim::Priority::High) return w;
  }
  throw ConfigError("workloads: no high-priority workload");
}

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, {"schema_version", "gpu", "workloads", "traces", "scheduler", "seed", "duration_s",
                   "profile_runs", "outputs"},
             "config");
  if (get<int>(doc, "schema_version", "config") != kSchemaVersion) {
    throw ConfigError("config: unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
  }
  ExperimentConfig cfg;
  if (doc.contains("gpu")) {
    const auto& g = doc.at("gpu");
    check_keys(g, {"num_sms", "max_threads_per_sm", "max_blocks_per_sm"}, "gpu");
    cfg.gpu.num_sms = get_or<int>(g, "num_sms", cfg.gpu.num_sms, "gpu");
    cfg.gpu.max_threads_per_sm = get_or<int>(g, "max_threads_per_sm", cfg.gpu.max_threads_per_sm, "gpu");
    cfg.gpu.max_blocks_per_sm = get_or<int>(g, "max_blocks_per_sm", cfg.gpu.max_blocks_per_sm, "gpu");
  }
  if (!doc.contains("workloads") || !doc.at("workloads").is_array()) throw ConfigError("config: workloads must be a list");
  for (std::size_t i = 0; i < doc.at("workloads").size(); ++i) {
    cfg.workloads.push_back(parse_workload(doc.at("workloads")[i], "workloads[" + std::to_string(i) + "]", base_dir));
  }
  if (doc.contains("traces")) {
    const auto& ts = doc.at("traces");
    if (!ts.is_object()) throw ConfigError("traces: expected an object keyed by workload name");
    for (const auto& [name, t] : ts.items()) {
      const std::string where = "traces." + name;
      check_keys(t, {"file", "load", "seed"}, where);
      TraceSpec spec;
      if (t.contains("file")) spec.file = resolve(get<std::string>(t, "file", where), base_dir);
      if (t.contains("load")) spec.load = get<double>(t, "load", where);
      if (t.contains("seed")) spec.seed = get<std::uint64_t>(t, "seed", where);
      cfg.traces[name] = spec;
    }
  }
  if (doc.contains("scheduler")) {
    const auto& s = doc.at("scheduler");
    check_keys(s, {"policies", "threshold_ms", "quantum_ms"}, "scheduler");
    if (s.contains("policies")) {
      cfg.policies.clear();
      for (const auto& p : get<std::vector<std::string>>(s, "policies", "scheduler")) {
        const auto kind = sched::parse_policy(p);
        if (!kind) throw ConfigError("scheduler: unknown policy '" + p + "'");
        cfg.policies.push_back(*kind);
      }
    }
    if (s.contains("threshold_ms")) cfg.threshold = from_ms(get<double>(s, "threshold_ms", "scheduler"));
    if (s.contains("quantum_ms")) cfg.quantum = from_ms(get<double>(s, "quantum_ms", "scheduler"));
  }
  cfg.seed = get_or<std::uint64_t>(doc, "seed", 0, "config");
  if (doc.contains("duration_s")) {
    cfg.duration = Duration{static_cast<std::int64_t>(std::llround(get<double>(doc, "duration_s", "config") * 1e9))};
  }
  cfg.profile_runs = get_or<int>(doc, "profile_runs", cfg.profile_runs, "config");
  if (doc.contains("outputs")) {
    const auto& o = doc.at("outputs");
    check_keys(o, {"dir", "event_log"}, "outputs");
    if (o.contains("dir")) cfg.out_dir = resolve(get<std::string>(o, "dir", "outputs"), base_dir);
    cfg.event_log = get_or<bool>(o, "event_log", false, "outputs");
  } else {
    cfg.out_dir = resolve(cfg.out_dir, base_dir);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), fs::path(path).parent_path().string().empty()
                                     ? "."
                                     : fs::path(path).parent_path().string());
}

std::string to_json(const ExperimentConfig& cfg) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["gpu"] = {{"num_sms", cfg.gpu.num_sms},
                {"max_threads_per_sm", cfg.gpu.max_threads_per_sm},
                {"max_blocks_per_sm", cfg.gpu.max_blocks_per_sm}};
  json ws = json::array();
  for (const auto& w : cfg.workloads) {
    json ks = json::array();
    for (const auto& k : w.kernels) {
      ks.push_back({{"name", k.name},
                    {"block_us", to_us(k.cost.block_duration)},
                    {"blocks", k.cost.total_blocks},
                    {"threads_per_block", k.cost.threads_per_block},
                    {"grid", {k.grid.x, k.grid.y, k.grid.z}},
                    {"launch_overhead_us", to_us(k.cost.launch_overhead)},
                    {"iteration_overhead_us", to_us(k.cost.ptb_iteration_overhead)},
                    {"inter_block_dependent", k.inter_block_dependent}});
    }
    ws.push_back({{"name", w.name},
                  {"kind", workloads::workload_kind_name(w.kind)},
                  {"priority", priority_text(w.priority)},
                  {"kernels", ks}});
  }
  doc["workloads"] = ws;
  json ts = json::object();
  for (const auto& [name, t] : cfg.traces) {
    json e = json::object();
    if (t.file) e["file"] = *t.file;
    if (t.load) e["load"] = *t.load;
    if (t.seed) e["seed"] = *t.seed;
    ts[name] = e;
  }
  doc["traces"] = ts;
  json ps = json::array();
  for (const auto p : cfg.policies) ps.push_back(sched::policy_name(p));
  doc["scheduler"] = {{"policies", ps}, {"threshold_ms", to_ms(cfg.threshold)}, {"quantum_ms", to_ms(cfg.quantum)}};
  doc["seed"] = cfg.seed;
  doc["duration_s"] = static_cast<double>(cfg.duration.count()) / 1e9;
  doc["profile_runs"] = cfg.profile_runs;
  doc["outputs"] = {{"dir", cfg.out_dir}, {"event_log", cfg.event_log}};
  return doc.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
  auto canonical = json::parse(to_json(cfg));
  canonical.erase("outputs");  // where results go does not change them
  const auto text = canonical.dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("config hash: SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

}  // namespace tally::config
