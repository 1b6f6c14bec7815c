#include "tally/workloads.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace tally::workloads {

using namespace std::chrono_literals;

KernelSpec KernelSpec::linear(std::string name, Duration block_duration, std::int64_t blocks,
                              int threads_per_block) {
  KernelSpec k;
  k.name = std::move(name);
  k.cost = KernelCostModel::uniform(block_duration, blocks, threads_per_block);
  k.grid = ir::Dim3{blocks, 1, 1};
  return k;
}

double KernelSpec::work_ns() const {
  return static_cast<double>(cost.total_blocks) * static_cast<double>(cost.block_duration.count());
}

const char* workload_kind_name(WorkloadKind k) {
  return k == WorkloadKind::Inference ? "inference" : "training";
}

void WorkloadSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("workload: name is empty");
  if (kernels.empty()) throw std::invalid_argument("workload " + name + ": kernel sequence is empty");
  for (const auto& k : kernels) {
    if (k.name.empty()) throw std::invalid_argument("workload " + name + ": kernel without a name");
    k.cost.validate();
    if (!ir::is_valid(k.grid) || k.grid.total() != k.cost.total_blocks) {
      throw std::invalid_argument("workload " + name + ": kernel " + k.name +
                                  " grid does not match total_blocks");
    }
  }
}

double WorkloadSpec::work_ns() const {
  double w = 0;
  for (const auto& k : kernels) w += k.work_ns();
  return w;
}

Duration isolated_sequence_latency(const WorkloadSpec& w, const sim::GpuSpec& gpu) {
  Duration total{0};
  for (const auto& k : w.kernels) {
    sim::Gpu g(gpu, 0, false);
    sim::SimLaunch l;
    l.cost = k.cost;
    const auto h = g.submit(l, Duration{0});
    while (const auto t = g.next_event_time()) g.run_until(*t);
    total += *g.finish_time(h);
  }
  return total;
}

std::vector<Duration> generate_arrivals(double load, Duration request_latency, Duration duration,
                                        std::uint64_t seed) {
  if (!(load > 0.0 && load < 1.0)) throw std::invalid_argument("arrivals: load must lie in (0, 1)");
  if (request_latency <= Duration{0}) throw std::invalid_argument("arrivals: request latency must be > 0");
  const double mean_gap = static_cast<double>(request_latency.count()) / load;
  std::mt19937_64 rng(seed);
  std::vector<Duration> out;
  double t = 0;
  while (true) {
    // inverse-CDF sampling keeps the sequence identical across standard libraries
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    t += -std::log1p(-u) * mean_gap;
    if (t >= static_cast<double>(duration.count())) break;
    out.emplace_back(static_cast<std::int64_t>(std::llround(t)));
  }
  return out;
}

std::vector<Duration> parse_trace(std::istream& in) {
  std::vector<Duration> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string_view text(line.data() + first, last - first + 1);
    double ms = 0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), ms);
    if (ec != std::errc{} || p != text.data() + text.size() || !std::isfinite(ms) || ms < 0) {
      throw std::invalid_argument("trace line " + std::to_string(lineno) + ": '" + std::string(text) +
                                  "' is not a non-negative millisecond timestamp");
    }
    const Duration t{static_cast<std::int64_t>(std::llround(ms * 1e6))};
    if (!out.empty() && t < out.back()) {
      throw std::invalid_argument("trace line " + std::to_string(lineno) + ": timestamps decrease");
    }
    out.push_back(t);
  }
  return out;
}

std::vector<Duration> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("trace: cannot open " + path);
  return parse_trace(in);
}

std::vector<Duration> rescale_trace(const std::vector<Duration>& ts, double factor) {
  if (!(factor > 0)) throw std::invalid_argument("trace: rescale factor must be > 0");
  std::vector<Duration> out;
  out.reserve(ts.size());
  for (const auto t : ts) {
    out.emplace_back(static_cast<std::int64_t>(std::llround(static_cast<double>(t.count()) * factor)));
  }
  return out;
}

double rescale_factor_for_load(const std::vector<Duration>& ts, Duration request_latency,
                               double target_load) {
  if (ts.size() < 2) throw std::invalid_argument("trace: need at least two timestamps to rescale");
  if (!(target_load > 0 && target_load < 1)) throw std::invalid_argument("trace: load must lie in (0, 1)");
  const double span = static_cast<double>((ts.back() - ts.front()).count());
  if (span <= 0) throw std::invalid_argument("trace: timestamps span no time");
  const double busy = static_cast<double>(ts.size()) * static_cast<double>(request_latency.count());
  return busy / (span * target_load);
}

Duration percentile_nearest_rank(std::vector<Duration> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty list");
  if (!(p > 0 && p <= 100)) throw std::invalid_argument("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

Metrics raw_metrics(const RunRecord& run) {
  const Duration warmup{static_cast<std::int64_t>(static_cast<double>(run.duration.count()) * kWarmupFraction)};
  const double window_s = static_cast<double>((run.duration - warmup).count()) * 1e-9;
  if (window_s <= 0) throw std::invalid_argument("metrics: empty measurement window");
  Metrics m;
  for (const auto& t : run.tasks) {
    TaskMetrics tm;
    tm.name = t.name;
    tm.priority = t.priority;
    tm.kind = t.kind;
    if (t.kind == WorkloadKind::Inference) {
      std::vector<Duration> censored;  // unfinished requests count with cutoff - arrival
      for (const auto& r : t.requests) {
        if (r.arrival < warmup || r.arrival >= run.duration) continue;
        ++tm.arrivals_in_window;
        if (r.completion && *r.completion <= run.duration) {
          ++tm.completed_in_window;
          tm.latencies.push_back(*r.completion - r.arrival);
        } else {
          ++tm.in_flight_at_cutoff;
          censored.push_back(run.duration - r.arrival);
        }
      }
      if (tm.arrivals_in_window > 0) {
        censored.insert(censored.end(), tm.latencies.begin(), tm.latencies.end());
        tm.p99 = percentile_nearest_rank(std::move(censored), 99.0);
      }
      tm.throughput = static_cast<double>(tm.completed_in_window) / window_s;
    } else {
      double work = 0;
      for (const auto& k : t.kernels_done) {
        if (k.time > warmup && k.time <= run.duration) work += k.work_ns;
      }
      tm.throughput = t.iteration_work_ns > 0 ? work / t.iteration_work_ns / window_s : 0;
    }
    m.tasks.push_back(std::move(tm));
  }
  return m;
}

Metrics compute_metrics(const RunRecord& run, const std::map<std::string, double>& standalone) {
  for (const auto& t : run.tasks) {
    const bool any = std::any_of(t.requests.begin(), t.requests.end(),
                                 [](const RequestRecord& r) { return r.completion.has_value(); });
    if (t.kind == WorkloadKind::Inference && !any) {
      throw std::invalid_argument("metrics: task " + t.name + " completed no requests");
    }
  }
  Metrics m = raw_metrics(run);
  m.system_throughput = 0;
  for (auto& t : m.tasks) {
    const auto it = standalone.find(t.name);
    if (it == standalone.end() || !(it->second > 0)) {
      throw std::invalid_argument("metrics: no standalone throughput for task " + t.name);
    }
    t.normalized_throughput = t.throughput / it->second;
    m.system_throughput += t.normalized_throughput;
  }
  return m;
}

namespace suite {

sim::GpuSpec desk_gpu() { return sim::GpuSpec{4, 2048, 2}; }

WorkloadSpec bert_like() {
  WorkloadSpec w;
  w.name = "bert-like";
  w.kind = WorkloadKind::Inference;
  w.priority = Priority::High;
  for (int i = 0; i < 40; ++i) {
    w.kernels.push_back(KernelSpec::linear("bert_k" + std::to_string(i), 93'250ns, 8));
  }
  return w;
}

WorkloadSpec resnet_like() {
  WorkloadSpec w;
  w.name = "resnet-like";
  w.kind = WorkloadKind::Inference;
  w.priority = Priority::High;
  for (int i = 0; i < 48; ++i) {
    if (i % 3 == 0) {
      w.kernels.push_back(KernelSpec::linear("resnet_k" + std::to_string(i), 20us, 16));
    } else {
      w.kernels.push_back(KernelSpec::linear("resnet_k" + std::to_string(i), 40us, 8, 256));
    }
  }
  return w;
}

WorkloadSpec training_long(int variant) {
  WorkloadSpec w;
  w.name = variant == 0 ? "train-long" : "train-long-" + std::to_string(variant);
  const std::string p = "tl" + std::to_string(variant) + "_";
  // kernel lengths on the desk GPU: 20 ms, 0.75 ms, 32 ms, 0.1 ms, 40 ms, 0.08 ms
  w.kernels.push_back(KernelSpec::linear(p + "attn_fwd", 25us, 6400));
  w.kernels.push_back(KernelSpec::linear(p + "embed", 25us, 240));
  w.kernels.push_back(KernelSpec::linear(p + "mlp_fwd", 25us, 10240));
  w.kernels.push_back(KernelSpec::linear(p + "norm", 12500ns, 64, 256));
  w.kernels.push_back(KernelSpec::linear(p + "mlp_bwd", 25us, 12800));
  w.kernels.push_back(KernelSpec::linear(p + "optimizer", 10us, 64));
  return w;
}

WorkloadSpec training_short(int variant) {
  WorkloadSpec w;
  w.name = variant == 0 ? "train-short" : "train-short-" + std::to_string(variant);
  const std::string p = "ts" + std::to_string(variant) + "_";
  for (int i = 0; i < 30; ++i) {
    switch (i % 3) {
      case 0: w.kernels.push_back(KernelSpec::linear(p + "k" + std::to_string(i), 20us, 16)); break;
      case 1: w.kernels.push_back(KernelSpec::linear(p + "k" + std::to_string(i), 30us, 24)); break;
      default: w.kernels.push_back(KernelSpec::linear(p + "k" + std::to_string(i), 15us, 32, 64)); break;
    }
  }
  return w;
}

WorkloadSpec training_cooperative() {
  WorkloadSpec w = training_long(0);
  w.name = "train-coop";
  for (auto& k : w.kernels) k.name = "coop_" + k.name;
  // grid-synchronizing kernel: one co-resident wave of 8 blocks, 10 ms
  auto sync = KernelSpec::linear("coop_grid_reduce", 10ms, 8);
  sync.inter_block_dependent = true;
  w.kernels.insert(w.kernels.begin() + 2, sync);
  return w;
}

std::vector<std::string> names() {
  return {"bert-like", "resnet-like", "train-long", "train-short", "train-coop"};
}

std::optional<WorkloadSpec> by_name(const std::string& name) {
  if (name == "bert-like") return bert_like();
  if (name == "resnet-like") return resnet_like();
  if (name == "train-coop") return training_cooperative();
  for (const std::string base : {"train-long", "train-short"}) {
    if (name == base) return base == "train-long" ? training_long(0) : training_short(0);
    if (name.starts_with(base + "-")) {
      int v = 0;
      const auto rest = std::string_view(name).substr(base.size() + 1);
      const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
      if (ec == std::errc{} && ptr == rest.data() + rest.size() && v > 0) {
        return base == "train-long" ? training_long(v) : training_short(v);
      }
    }
  }
  return std::nullopt;
}

}  // namespace suite

}  // namespace tally::workloads
