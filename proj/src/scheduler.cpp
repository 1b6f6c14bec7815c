#include "tally/scheduler.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <deque>
#include <stdexcept>

namespace tally::sched {

using sim::KernelHandle;
using sim::LaunchStatus;
using sim::Priority;
using workloads::WorkloadKind;

const char* policy_name(PolicyKind p) {
  switch (p) {
    case PolicyKind::Tally: return "tally";
    case PolicyKind::Eager: return "eager";
    case PolicyKind::KernelPriority: return "kernel-priority";
    case PolicyKind::TimeSliced: return "time-sliced";
  }
  return "?";
}

std::optional<PolicyKind> parse_policy(std::string_view text) {
  for (const auto p : {PolicyKind::Tally, PolicyKind::Eager, PolicyKind::KernelPriority,
                       PolicyKind::TimeSliced}) {
    if (text == policy_name(p)) return p;
  }
  return std::nullopt;
}

void SchedulerConfig::validate() const {
  if (turnaround_threshold <= Duration{0}) {
    throw std::invalid_argument("scheduler: turnaround threshold must be > 0");
  }
  if (policy == PolicyKind::TimeSliced && quantum <= Duration{0}) {
    throw std::invalid_argument("scheduler: time-slice quantum must be > 0");
  }
}

profiler::ProfileKey profile_key(const workloads::KernelSpec& k) {
  return {k.name, k.grid, ir::Dim3{k.cost.threads_per_block, 1, 1}};
}

namespace {

struct Task {
  const TaskScript* script = nullptr;
  int id = 0;
  workloads::TaskLog log;
  std::size_t next_arrival = 0;
  std::deque<std::size_t> waiting;  // request indices, the front one in service
  std::size_t next_kernel = 0;
  std::optional<KernelHandle> inflight;
  bool preempt_requested = false;  // signal or hold sent for the in-flight launch
  bool resume_requested = false;   // resume sent, not yet processed by the simulator

  bool inference() const { return script->spec.kind == WorkloadKind::Inference; }
  bool high() const { return script->spec.priority == Priority::High; }
  bool has_ready_kernel() const { return !inflight && (!inference() || !waiting.empty()); }
  bool active() const { return inflight.has_value() || (inference() && !waiting.empty()); }
  const workloads::KernelSpec& kernel() const { return script->spec.kernels[next_kernel]; }
};

class Run {
 public:
  Run(const SchedulerConfig& cfg, const std::vector<TaskScript>& scripts, const sim::GpuSpec& spec,
      profiler::Profiler& prof, const RunOptions& opt)
      : cfg_(cfg), opt_(opt), prof_(prof), gpu_(spec, opt.placement_seed, false) {
    cfg_.validate();
    if (scripts.empty()) throw std::invalid_argument("run: no tasks");
    if (opt.duration <= Duration{0}) throw std::invalid_argument("run: duration must be > 0");
    if (!(prof.gpu() == spec)) throw std::invalid_argument("run: profiler measures a different GPU");
    for (std::size_t i = 0; i < scripts.size(); ++i) {
      const auto& s = scripts[i];
      s.spec.validate();
      if (!std::is_sorted(s.arrivals.begin(), s.arrivals.end())) {
        throw std::invalid_argument("run: arrivals of " + s.spec.name + " are not sorted");
      }
      Task t;
      t.script = &s;
      t.id = static_cast<int>(i);
      t.log.task = t.id;
      t.log.name = s.spec.name;
      t.log.kind = s.spec.kind;
      t.log.priority = s.spec.priority;
      t.log.iteration_work_ns = s.spec.work_ns();
      tasks_.push_back(std::move(t));
    }
    for (auto& t : tasks_) {
      if (t.high()) {
        if (hp_) throw std::invalid_argument("run: more than one high-priority task");
        hp_ = &t;
      } else {
        be_.push_back(&t);
      }
    }
    const bool needs_hp = cfg_.policy == PolicyKind::Tally || cfg_.policy == PolicyKind::KernelPriority;
    if (needs_hp && !hp_) throw std::invalid_argument("run: policy needs one high-priority task");
  }

  RunOutput execute() {
    tick(Duration{0});
    while (true) {
      const auto t_arr = next_arrival();
      const auto t_gpu = gpu_.next_event_time();
      std::optional<Duration> t = t_arr;
      if (t_gpu && (!t || *t_gpu < *t)) t = t_gpu;
      if (!t || *t > opt_.duration) break;
      admit_arrivals(*t);
      tick(*t);
      const auto events = gpu_.run_until(*t);
      if (opt_.on_events && !events.empty()) opt_.on_events(events);
      for (auto& task : tasks_) task.resume_requested = false;
      for (const auto& e : events) {
        if (e.kind == sim::EventKind::KernelFinished) on_kernel_finished(e);
      }
      tick(*t);
    }
    RunOutput out;
    out.record.duration = opt_.duration;
    for (auto& t : tasks_) out.record.tasks.push_back(std::move(t.log));
    out.stats = stats_;
    return out;
  }

 private:
  std::optional<Duration> next_arrival() const {
    std::optional<Duration> best;
    for (const auto& t : tasks_) {
      if (t.next_arrival < t.script->arrivals.size()) {
        const auto a = t.script->arrivals[t.next_arrival];
        if (!best || a < *best) best = a;
      }
    }
    return best;
  }

  void admit_arrivals(Duration now) {
    for (auto& t : tasks_) {
      const auto& arr = t.script->arrivals;
      while (t.next_arrival < arr.size() && arr[t.next_arrival] <= now) {
        t.waiting.push_back(t.log.requests.size());
        t.log.requests.push_back({arr[t.next_arrival], std::nullopt});
        ++t.next_arrival;
      }
    }
  }

  void on_kernel_finished(const sim::SimEvent& e) {
    auto& t = tasks_.at(static_cast<std::size_t>(e.task));
    if (!t.inflight || *t.inflight != e.kernel || gpu_.status(e.kernel) != LaunchStatus::Finished) return;
    t.log.kernels_done.push_back({e.time, t.kernel().work_ns()});
    t.inflight.reset();
    t.preempt_requested = false;
    if (++t.next_kernel == t.script->spec.kernels.size()) {
      t.next_kernel = 0;
      if (t.inference()) {
        t.log.requests[t.waiting.front()].completion = e.time;
        t.waiting.pop_front();
      }
    }
  }

  void submit(Task& t, Priority priority, sim::LaunchShape shape, Duration now) {
    sim::SimLaunch l;
    l.task = t.id;
    l.priority = priority;
    l.shape = std::move(shape);
    l.cost = t.kernel().cost;
    t.inflight = gpu_.submit(l, now);
    t.preempt_requested = false;
    ++stats_.submissions;
  }

  void submit_original(Task& t, Priority priority, Duration now) {
    submit(t, priority, sim::OriginalShape{}, now);
  }

  void tick(Duration now) {
    switch (cfg_.policy) {
      case PolicyKind::Tally: tick_tally(now); break;
      case PolicyKind::Eager: tick_eager(now); break;
      case PolicyKind::KernelPriority: tick_kernel_priority(now); break;
      case PolicyKind::TimeSliced: tick_time_sliced(now); break;
    }
  }

  /// Visits best-effort tasks round-robin, starting after the last one served.
  template <class F>
  void for_each_be_round_robin(F&& f) {
    const std::size_t n = be_.size();
    std::optional<std::size_t> last;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = (rr_ + k) % n;
      if (f(*be_[i])) last = i;
    }
    if (last) rr_ = (*last + 1) % n;
  }

  void preempt_best_effort(Duration now) {
    for (auto* t : be_) {
      if (!t->inflight || t->preempt_requested || t->resume_requested) continue;
      const auto h = *t->inflight;
      const auto status = gpu_.status(h);
      if (status == LaunchStatus::Finished || status == LaunchStatus::Parked) continue;
      const auto& shape = gpu_.launch(h).shape;
      if (std::holds_alternative<sim::PtbShape>(shape)) {
        gpu_.signal_preempt(h, now);
        ++stats_.preempt_signals;
        t->preempt_requested = true;
      } else if (std::holds_alternative<sim::SlicedShape>(shape)) {
        gpu_.hold(h, now);
        ++stats_.holds;
        t->preempt_requested = true;
      }
      // original (exempt) launches run to completion
    }
  }

  void tick_tally(Duration now) {
    if (hp_->has_ready_kernel()) submit_original(*hp_, Priority::High, now);
    if (hp_->active()) {
      preempt_best_effort(now);
      return;
    }
    for_each_be_round_robin([&](Task& t) {
      if (t.inflight) {
        if (t.resume_requested || gpu_.status(*t.inflight) != LaunchStatus::Parked) return false;
        gpu_.resume(*t.inflight, now);
        t.preempt_requested = false;
        t.resume_requested = true;
        ++stats_.resumes;
        return true;
      }
      if (!t.has_ready_kernel()) return false;
      const auto& k = t.kernel();
      const auto choice = prof_.choose(profile_key(k), k.cost, cfg_.turnaround_threshold,
                                       k.inter_block_dependent);
      submit(t, Priority::BestEffort, profiler::to_shape(choice, k.grid), now);
      return true;
    });
  }

  void tick_eager(Duration now) {
    for (auto& t : tasks_) {
      if (t.has_ready_kernel()) submit_original(t, Priority::BestEffort, now);
    }
  }

  void tick_kernel_priority(Duration now) {
    if (hp_->has_ready_kernel()) {
      const bool be_running = std::any_of(be_.begin(), be_.end(), [](const Task* t) { return t->inflight; });
      if (!be_running) submit_original(*hp_, Priority::High, now);
    }
    if (hp_->active()) return;
    for_each_be_round_robin([&](Task& t) {
      if (!t.has_ready_kernel()) return false;
      submit_original(t, Priority::BestEffort, now);
      return true;
    });
  }

  void tick_time_sliced(Duration now) {
    if (owner_ && tasks_[*owner_].inflight) return;
    if (owner_ && tasks_[*owner_].has_ready_kernel() && now < turn_start_ + cfg_.quantum) {
      submit_original(tasks_[*owner_], Priority::BestEffort, now);
      return;
    }
    const std::size_t n = tasks_.size();
    const std::size_t start = owner_ ? *owner_ + 1 : 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = (start + k) % n;
      if (!tasks_[i].has_ready_kernel()) continue;
      owner_ = i;
      turn_start_ = now;
      submit_original(tasks_[i], Priority::BestEffort, now);
      return;
    }
    owner_.reset();
  }

  SchedulerConfig cfg_;
  const RunOptions& opt_;
  profiler::Profiler& prof_;
  sim::Gpu gpu_;
  std::vector<Task> tasks_;
  Task* hp_ = nullptr;
  std::vector<Task*> be_;
  std::size_t rr_ = 0;
  std::optional<std::size_t> owner_;
  Duration turn_start_{0};
  RunStats stats_;
};

}  // namespace

RunOutput run_policy(const SchedulerConfig& config, const std::vector<TaskScript>& tasks,
                     const sim::GpuSpec& gpu, profiler::Profiler& profiler, const RunOptions& options) {
  Run run(config, tasks, gpu, profiler, options);
  auto out = run.execute();
  spdlog::debug("{} run: {} submissions, {} signals, {} holds, {} resumes", policy_name(config.policy),
                out.stats.submissions, out.stats.preempt_signals, out.stats.holds, out.stats.resumes);
  return out;
}

}  // namespace tally::sched
