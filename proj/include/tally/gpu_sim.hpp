#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace tally::sim {

using Duration = std::chrono::nanoseconds;
using namespace std::chrono_literals;

struct GpuSpec {
  int num_sms = 4;
  int max_threads_per_sm = 2048;
  int max_blocks_per_sm = 2;

  /// Resident blocks one SM can hold for a kernel with this block size (0 = does not fit).
  int blocks_per_sm_for(int threads_per_block) const;
  void validate() const;
  friend bool operator==(const GpuSpec&, const GpuSpec&) = default;
};

inline constexpr Duration kDefaultLaunchOverhead = 5us;

/// 2% of the block duration plus 1 us.
Duration default_iteration_overhead(Duration block_duration);

struct KernelCostModel {
  Duration block_duration{0};
  Duration launch_overhead = kDefaultLaunchOverhead;
  Duration ptb_iteration_overhead{1us};
  int threads_per_block = 128;
  std::int64_t total_blocks = 1;

  /// Cost model with the default launch and iteration overheads.
  static KernelCostModel uniform(Duration block_duration, std::int64_t total_blocks,
                                 int threads_per_block = 128);
  void validate() const;
  friend bool operator==(const KernelCostModel&, const KernelCostModel&) = default;
};

enum class Priority { High, BestEffort };
const char* priority_name(Priority p);

struct OriginalShape {
  friend bool operator==(const OriginalShape&, const OriginalShape&) = default;
};
struct SlicedShape {
  std::vector<std::int64_t> slice_blocks;  // block count of each sub-kernel, in issue order
  friend bool operator==(const SlicedShape&, const SlicedShape&) = default;
};
struct PtbShape {
  std::int64_t workers = 1;
  std::int64_t start_counter = 0;
  friend bool operator==(const PtbShape&, const PtbShape&) = default;
};
using LaunchShape = std::variant<OriginalShape, SlicedShape, PtbShape>;

struct SimLaunch {
  int task = 0;
  Priority priority = Priority::BestEffort;
  LaunchShape shape = OriginalShape{};
  KernelCostModel cost;
};

using KernelHandle = std::int64_t;

enum class EventKind {
  LaunchIssued,
  BlockStarted,
  BlockFinished,
  KernelFinished,
  PreemptSignaled,
  WorkerParked,
};
const char* event_kind_name(EventKind k);

/// `block` is the original block index for BlockStarted/BlockFinished, the slice index
/// for LaunchIssued/KernelFinished of a sliced launch, the worker id for WorkerParked,
/// and -1 otherwise.
struct SimEvent {
  Duration time{0};
  EventKind kind = EventKind::LaunchIssued;
  int task = 0;
  KernelHandle kernel = 0;
  std::int64_t block = -1;
  friend bool operator==(const SimEvent&, const SimEvent&) = default;
};

inline constexpr const char* kEventCsvHeader = "time_ns,kind,task,kernel,block\n";
std::string events_to_csv(std::span<const SimEvent> events);
/// Rows without the header, for streaming long logs.
void write_event_rows(std::ostream& os, std::span<const SimEvent> events);

enum class LaunchStatus {
  Pending,   // waiting for its launch overhead to elapse
  Running,
  Parked,    // preempted PTB with every worker parked, or held sliced launch between slices
  Finished,
};

struct PreemptRecord {
  Duration signaled{0};
  std::optional<Duration> released;
};

/// Discrete-event model of one GPU. Events at equal times are ordered by class
/// (control requests before internal progress) and then by insertion sequence, so a
/// run is a pure function of the GPU spec, the placement seed and the calls made.
class Gpu {
 public:
  explicit Gpu(GpuSpec spec, std::uint64_t placement_seed = 0, bool keep_log = true);

  const GpuSpec& spec() const { return spec_; }
  Duration now() const { return now_; }

  KernelHandle submit(const SimLaunch& launch, Duration at);

  /// Sets the preemption flag of a PTB launch; each worker parks at its next iteration
  /// boundary. Throws std::invalid_argument for other shapes.
  void signal_preempt(KernelHandle h, Duration at);

  /// Asks a sliced launch to stop issuing sub-kernels after the one in flight. On an
  /// original launch it only records the request; the kernel runs to completion.
  void hold(KernelHandle h, Duration at);

  /// Relaunches a parked PTB launch from its persisted counter, or continues a held
  /// sliced launch with its next sub-kernel. The launch must be Parked when the
  /// request is processed.
  void resume(KernelHandle h, Duration at);

  /// Processes every event with time <= t and returns the events emitted by this call.
  std::span<const SimEvent> run_until(Duration t);
  std::optional<Duration> next_event_time() const;

  const std::vector<SimEvent>& log() const { return log_; }

  LaunchStatus status(KernelHandle h) const;
  std::int64_t blocks_finished(KernelHandle h) const;
  std::int64_t task_counter(KernelHandle h) const;
  std::optional<Duration> finish_time(KernelHandle h) const;
  const SimLaunch& launch(KernelHandle h) const;
  const std::vector<PreemptRecord>& preemptions(KernelHandle h) const;

  /// Release time minus signal time for the preemption request made at signal_time.
  /// PTB: last worker parked; sliced: in-flight sub-kernel finished; original: kernel
  /// finished. Throws std::logic_error when no such request was recorded or released.
  Duration measured_turnaround(KernelHandle h, Duration signal_time) const;

  int resident_blocks(int sm) const { return sms_.at(static_cast<std::size_t>(sm)).blocks; }

 private:
  enum class QType { Signal, Hold, Resume, Issue, BlockDone };
  struct QEvent {
    Duration time;
    int cls;
    std::uint64_t seq;
    QType type;
    KernelHandle h;
    int sm;
    std::int64_t block;
    std::int64_t worker;
    std::uint64_t token;
  };
  struct QLater {
    bool operator()(const QEvent& a, const QEvent& b) const;
  };
  struct Sm {
    int blocks = 0;
    int threads = 0;
  };
  struct State {
    SimLaunch spec;
    LaunchStatus status = LaunchStatus::Pending;
    std::uint64_t issue_token = 0;
    std::uint64_t dispatch_order = 0;
    std::int64_t unplaced = 0;
    std::int64_t next_block = 0;
    std::int64_t running = 0;
    std::int64_t finished_blocks = 0;
    std::size_t slice = 0;
    bool held = false;
    std::int64_t counter = 0;
    bool flag = false;
    std::int64_t next_worker = 0;
    std::optional<Duration> finished_at;
    std::vector<PreemptRecord> preemptions;
  };

  void push(Duration t, int cls, QType type, KernelHandle h, int sm = -1, std::int64_t block = -1,
            std::int64_t worker = -1, std::uint64_t token = 0);
  void emit(EventKind kind, const State& s, KernelHandle h, std::int64_t block);
  State& state(KernelHandle h);
  const State& state(KernelHandle h) const;

  void handle(const QEvent& e);
  void on_issue(KernelHandle h);
  void on_block_done(const QEvent& e);
  void on_signal(KernelHandle h);
  void on_hold(KernelHandle h);
  void on_resume(KernelHandle h);
  void release_preemption(State& s);
  void dispatch();
  bool place_one(KernelHandle h);
  int pick_sm(int threads);
  void free_slot(int sm, int threads);
  void schedule_issue(KernelHandle h, Duration at);

  GpuSpec spec_;
  bool keep_log_;
  std::mt19937_64 placement_rng_;
  Duration now_{0};
  std::uint64_t seq_ = 0;
  std::uint64_t dispatch_counter_ = 0;
  std::priority_queue<QEvent, std::vector<QEvent>, QLater> queue_;
  std::vector<State> launches_;
  std::vector<KernelHandle> waiting_;  // launches with unplaced blocks, in dispatch order
  std::vector<Sm> sms_;
  std::vector<SimEvent> log_;
  std::vector<SimEvent> batch_;
};

}  // namespace tally::sim
