#include "tally/gpu_sim.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace tally::sim {

int GpuSpec::blocks_per_sm_for(int threads_per_block) const {
  if (threads_per_block < 1) return 0;
  return std::min(max_blocks_per_sm, max_threads_per_sm / threads_per_block);
}

void GpuSpec::validate() const {
  if (num_sms < 1 || max_threads_per_sm < 1 || max_blocks_per_sm < 1) {
    throw std::invalid_argument("gpu: num_sms, max_threads_per_sm and max_blocks_per_sm must be >= 1");
  }
}

Duration default_iteration_overhead(Duration block_duration) {
  return block_duration * 2 / 100 + 1us;
}

KernelCostModel KernelCostModel::uniform(Duration block_duration, std::int64_t total_blocks,
                                         int threads_per_block) {
  KernelCostModel c;
  c.block_duration = block_duration;
  c.ptb_iteration_overhead = default_iteration_overhead(block_duration);
  c.threads_per_block = threads_per_block;
  c.total_blocks = total_blocks;
  return c;
}

void KernelCostModel::validate() const {
  if (block_duration < 0ns || launch_overhead < 0ns || ptb_iteration_overhead < 0ns) {
    throw std::invalid_argument("cost model: durations must be >= 0");
  }
  if (total_blocks < 1) throw std::invalid_argument("cost model: total_blocks must be >= 1");
  if (threads_per_block < 1) throw std::invalid_argument("cost model: threads_per_block must be >= 1");
}

const char* priority_name(Priority p) {
  return p == Priority::High ? "high" : "best_effort";
}

const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::LaunchIssued: return "LaunchIssued";
    case EventKind::BlockStarted: return "BlockStarted";
    case EventKind::BlockFinished: return "BlockFinished";
    case EventKind::KernelFinished: return "KernelFinished";
    case EventKind::PreemptSignaled: return "PreemptSignaled";
    case EventKind::WorkerParked: return "WorkerParked";
  }
  return "?";
}

void write_event_rows(std::ostream& os, std::span<const SimEvent> events) {
  for (const auto& e : events) {
    os << e.time.count() << ',' << event_kind_name(e.kind) << ',' << e.task << ',' << e.kernel
       << ',' << e.block << '\n';
  }
}

std::string events_to_csv(std::span<const SimEvent> events) {
  std::ostringstream os;
  os << kEventCsvHeader;
  write_event_rows(os, events);
  return os.str();
}

bool Gpu::QLater::operator()(const QEvent& a, const QEvent& b) const {
  if (a.time != b.time) return a.time > b.time;
  if (a.cls != b.cls) return a.cls > b.cls;
  return a.seq > b.seq;
}

Gpu::Gpu(GpuSpec spec, std::uint64_t placement_seed, bool keep_log)
    : spec_(spec), keep_log_(keep_log), placement_rng_(placement_seed) {
  spec_.validate();
  sms_.resize(static_cast<std::size_t>(spec_.num_sms));
}

Gpu::State& Gpu::state(KernelHandle h) {
  if (h < 0 || static_cast<std::size_t>(h) >= launches_.size()) {
    throw std::out_of_range("unknown kernel handle " + std::to_string(h));
  }
  return launches_[static_cast<std::size_t>(h)];
}

const Gpu::State& Gpu::state(KernelHandle h) const {
  return const_cast<Gpu*>(this)->state(h);
}

void Gpu::push(Duration t, int cls, QType type, KernelHandle h, int sm, std::int64_t block,
               std::int64_t worker, std::uint64_t token) {
  queue_.push(QEvent{t, cls, seq_++, type, h, sm, block, worker, token});
}

void Gpu::emit(EventKind kind, const State& s, KernelHandle h, std::int64_t block) {
  const SimEvent e{now_, kind, s.spec.task, h, block};
  batch_.push_back(e);
  if (keep_log_) log_.push_back(e);
}

KernelHandle Gpu::submit(const SimLaunch& launch, Duration at) {
  if (at < now_) throw std::invalid_argument("submit: time is in the past");
  launch.cost.validate();
  if (spec_.blocks_per_sm_for(launch.cost.threads_per_block) < 1) {
    throw std::invalid_argument("submit: threads_per_block " +
                                std::to_string(launch.cost.threads_per_block) +
                                " exceeds the GPU's per-SM thread limit");
  }
  State s;
  s.spec = launch;
  if (const auto* sl = std::get_if<SlicedShape>(&launch.shape)) {
    if (sl->slice_blocks.empty()) throw std::invalid_argument("submit: sliced launch has no slices");
    std::int64_t sum = 0;
    for (const auto b : sl->slice_blocks) {
      if (b < 1) throw std::invalid_argument("submit: empty slice");
      sum += b;
    }
    if (sum != launch.cost.total_blocks) {
      throw std::invalid_argument("submit: slice block counts do not sum to total_blocks");
    }
  } else if (const auto* p = std::get_if<PtbShape>(&launch.shape)) {
    if (p->workers < 1) throw std::invalid_argument("submit: PTB worker count must be >= 1");
    if (p->start_counter < 0 || p->start_counter >= launch.cost.total_blocks) {
      throw std::invalid_argument("submit: PTB start counter out of range");
    }
    s.counter = p->start_counter;
  }
  const auto h = static_cast<KernelHandle>(launches_.size());
  launches_.push_back(std::move(s));
  schedule_issue(h, at + launch.cost.launch_overhead);
  return h;
}

void Gpu::signal_preempt(KernelHandle h, Duration at) {
  if (!std::holds_alternative<PtbShape>(state(h).spec.shape)) {
    throw std::invalid_argument("signal_preempt: kernel " + std::to_string(h) + " is not a PTB launch");
  }
  if (at < now_) throw std::invalid_argument("signal_preempt: time is in the past");
  push(at, 0, QType::Signal, h);
}

void Gpu::hold(KernelHandle h, Duration at) {
  if (std::holds_alternative<PtbShape>(state(h).spec.shape)) {
    throw std::invalid_argument("hold: kernel " + std::to_string(h) + " is a PTB launch; use signal_preempt");
  }
  if (at < now_) throw std::invalid_argument("hold: time is in the past");
  push(at, 0, QType::Hold, h);
}

void Gpu::resume(KernelHandle h, Duration at) {
  if (std::holds_alternative<OriginalShape>(state(h).spec.shape)) {
    throw std::invalid_argument("resume: original launches cannot be parked");
  }
  if (at < now_) throw std::invalid_argument("resume: time is in the past");
  push(at, 0, QType::Resume, h);
}

std::optional<Duration> Gpu::next_event_time() const {
  if (queue_.empty()) return std::nullopt;
  return queue_.top().time;
}

std::span<const SimEvent> Gpu::run_until(Duration t) {
  batch_.clear();
  while (!queue_.empty() && queue_.top().time <= t) {
    now_ = queue_.top().time;
    while (!queue_.empty() && queue_.top().time == now_) {
      const QEvent e = queue_.top();
      queue_.pop();
      handle(e);
    }
    dispatch();
  }
  now_ = std::max(now_, t);
  return batch_;
}

void Gpu::handle(const QEvent& e) {
  switch (e.type) {
    case QType::Signal: on_signal(e.h); break;
    case QType::Hold: on_hold(e.h); break;
    case QType::Resume: on_resume(e.h); break;
    case QType::Issue:
      if (e.token == state(e.h).issue_token) on_issue(e.h);
      break;
    case QType::BlockDone: on_block_done(e); break;
  }
}

void Gpu::schedule_issue(KernelHandle h, Duration at) {
  auto& s = state(h);
  s.status = LaunchStatus::Pending;
  push(at, 1, QType::Issue, h, -1, -1, -1, ++s.issue_token);
}

void Gpu::on_issue(KernelHandle h) {
  auto& s = state(h);
  s.status = LaunchStatus::Running;
  s.dispatch_order = dispatch_counter_++;
  std::int64_t tag = -1;
  if (std::holds_alternative<OriginalShape>(s.spec.shape)) {
    s.unplaced = s.spec.cost.total_blocks;
  } else if (const auto* sl = std::get_if<SlicedShape>(&s.spec.shape)) {
    s.unplaced = sl->slice_blocks[s.slice];
    tag = static_cast<std::int64_t>(s.slice);
  } else {
    const auto& p = std::get<PtbShape>(s.spec.shape);
    s.unplaced = std::min(p.workers, s.spec.cost.total_blocks - s.counter);
    s.next_worker = 0;
  }
  emit(EventKind::LaunchIssued, s, h, tag);
  waiting_.push_back(h);
}

void Gpu::release_preemption(State& s) {
  for (auto& r : s.preemptions) {
    if (!r.released) r.released = now_;
  }
}

void Gpu::on_block_done(const QEvent& e) {
  auto& s = state(e.h);
  const auto& cost = s.spec.cost;
  emit(EventKind::BlockFinished, s, e.h, e.block);
  ++s.finished_blocks;

  if (std::holds_alternative<PtbShape>(s.spec.shape)) {
    if (s.flag) {
      emit(EventKind::WorkerParked, s, e.h, e.worker);
      free_slot(e.sm, cost.threads_per_block);
      --s.running;
    } else if (s.counter < cost.total_blocks) {
      const auto task = s.counter++;
      emit(EventKind::BlockStarted, s, e.h, task);
      push(now_ + cost.block_duration + cost.ptb_iteration_overhead, 1, QType::BlockDone, e.h, e.sm,
           task, e.worker);
    } else {
      free_slot(e.sm, cost.threads_per_block);
      --s.running;
    }
    if (s.running == 0 && s.unplaced == 0) {
      if (s.counter >= cost.total_blocks) {
        s.status = LaunchStatus::Finished;
        s.finished_at = now_;
        emit(EventKind::KernelFinished, s, e.h, -1);
      } else {
        s.status = LaunchStatus::Parked;
      }
      release_preemption(s);
    }
    return;
  }

  free_slot(e.sm, cost.threads_per_block);
  --s.running;
  if (s.running > 0 || s.unplaced > 0) return;

  if (std::holds_alternative<OriginalShape>(s.spec.shape)) {
    s.status = LaunchStatus::Finished;
    s.finished_at = now_;
    emit(EventKind::KernelFinished, s, e.h, -1);
    release_preemption(s);
    return;
  }
  const auto& sl = std::get<SlicedShape>(s.spec.shape);
  emit(EventKind::KernelFinished, s, e.h, static_cast<std::int64_t>(s.slice));
  ++s.slice;
  if (s.slice == sl.slice_blocks.size()) {
    s.status = LaunchStatus::Finished;
    s.finished_at = now_;
    release_preemption(s);
  } else if (s.held) {
    s.status = LaunchStatus::Parked;
    release_preemption(s);
  } else {
    schedule_issue(e.h, now_ + cost.launch_overhead);
  }
}

void Gpu::on_signal(KernelHandle h) {
  auto& s = state(h);
  if (s.status == LaunchStatus::Finished || s.status == LaunchStatus::Parked || s.flag) return;
  s.flag = true;
  emit(EventKind::PreemptSignaled, s, h, -1);
  s.preemptions.push_back({now_, std::nullopt});
  if (s.status == LaunchStatus::Pending) {
    ++s.issue_token;  // the launch never reaches the GPU
    s.status = LaunchStatus::Parked;
    release_preemption(s);
    return;
  }
  s.unplaced = 0;  // workers not yet resident would read the flag and leave at once
  if (s.running == 0) {
    s.status = LaunchStatus::Parked;
    release_preemption(s);
  }
}

void Gpu::on_hold(KernelHandle h) {
  auto& s = state(h);
  if (s.status == LaunchStatus::Finished || s.status == LaunchStatus::Parked || s.held) return;
  emit(EventKind::PreemptSignaled, s, h, -1);
  s.preemptions.push_back({now_, std::nullopt});
  if (std::holds_alternative<OriginalShape>(s.spec.shape)) return;
  s.held = true;
  if (s.status == LaunchStatus::Pending) {
    ++s.issue_token;
    s.status = LaunchStatus::Parked;
    release_preemption(s);
  }
}

void Gpu::on_resume(KernelHandle h) {
  auto& s = state(h);
  if (s.status != LaunchStatus::Parked) {
    throw std::logic_error("resume: kernel " + std::to_string(h) + " is not parked");
  }
  s.flag = false;
  s.held = false;
  schedule_issue(h, now_ + s.spec.cost.launch_overhead);
}

int Gpu::pick_sm(int threads) {
  const int n = spec_.num_sms;
  const int start = n > 1 ? static_cast<int>(placement_rng_() % static_cast<std::uint64_t>(n)) : 0;
  int best = -1;
  for (int j = 0; j < n; ++j) {
    const int i = (start + j) % n;
    const auto& sm = sms_[static_cast<std::size_t>(i)];
    if (sm.blocks >= spec_.max_blocks_per_sm || sm.threads + threads > spec_.max_threads_per_sm) continue;
    if (best < 0 || sm.blocks < sms_[static_cast<std::size_t>(best)].blocks) best = i;
  }
  return best;
}

void Gpu::free_slot(int sm, int threads) {
  auto& s = sms_.at(static_cast<std::size_t>(sm));
  --s.blocks;
  s.threads -= threads;
}

bool Gpu::place_one(KernelHandle h) {
  auto& s = state(h);
  const auto& cost = s.spec.cost;
  const bool ptb = std::holds_alternative<PtbShape>(s.spec.shape);
  if (ptb && s.counter >= cost.total_blocks) {
    s.unplaced = 0;
    return false;
  }
  const int sm = pick_sm(cost.threads_per_block);
  if (sm < 0) return false;
  auto& slot = sms_[static_cast<std::size_t>(sm)];
  ++slot.blocks;
  slot.threads += cost.threads_per_block;
  --s.unplaced;
  ++s.running;
  if (ptb) {
    const auto task = s.counter++;
    emit(EventKind::BlockStarted, s, h, task);
    push(now_ + cost.block_duration + cost.ptb_iteration_overhead, 1, QType::BlockDone, h, sm, task,
         s.next_worker++);
  } else {
    const auto block = s.next_block++;
    emit(EventKind::BlockStarted, s, h, block);
    push(now_ + cost.block_duration, 1, QType::BlockDone, h, sm, block);
  }
  return true;
}

void Gpu::dispatch() {
  if (waiting_.empty()) return;
  std::stable_sort(waiting_.begin(), waiting_.end(), [&](KernelHandle a, KernelHandle b) {
    const auto& sa = state(a);
    const auto& sb = state(b);
    if (sa.spec.priority != sb.spec.priority) return sa.spec.priority == Priority::High;
    return sa.dispatch_order < sb.dispatch_order;
  });
  bool blocked_high = false;
  bool blocked_best_effort = false;
  for (const auto h : waiting_) {
    auto& s = state(h);
    const bool high = s.spec.priority == Priority::High;
    if (blocked_high || (!high && blocked_best_effort)) break;
    while (s.unplaced > 0 && place_one(h)) {
    }
    if (s.unplaced > 0) {
      // head-of-line: later launches of the same class wait; nothing best-effort
      // starts while a high-priority launch still has blocks to place
      if (high) blocked_high = true;
      else blocked_best_effort = true;
    }
  }
  std::erase_if(waiting_, [&](KernelHandle h) { return state(h).unplaced == 0; });
}

LaunchStatus Gpu::status(KernelHandle h) const { return state(h).status; }
std::int64_t Gpu::blocks_finished(KernelHandle h) const { return state(h).finished_blocks; }
std::int64_t Gpu::task_counter(KernelHandle h) const { return state(h).counter; }
std::optional<Duration> Gpu::finish_time(KernelHandle h) const { return state(h).finished_at; }
const SimLaunch& Gpu::launch(KernelHandle h) const { return state(h).spec; }
const std::vector<PreemptRecord>& Gpu::preemptions(KernelHandle h) const {
  return state(h).preemptions;
}

Duration Gpu::measured_turnaround(KernelHandle h, Duration signal_time) const {
  for (const auto& r : state(h).preemptions) {
    if (r.signaled == signal_time) {
      if (!r.released) throw std::logic_error("measured_turnaround: preemption not yet released");
      return *r.released - r.signaled;
    }
  }
  throw std::logic_error("measured_turnaround: no preemption recorded at that time");
}

}  // namespace tally::sim
