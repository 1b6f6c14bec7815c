#include "tally/interpreter.hpp"

#include <random>
#include <string>
#include <unordered_map>

namespace tally::ir {

std::string_view status_name(ExecStatus s) noexcept {
  switch (s) {
    case ExecStatus::Completed: return "Completed";
    case ExecStatus::DivergentBarrier: return "DivergentBarrier";
    case ExecStatus::StepLimitExceeded: return "StepLimitExceeded";
    case ExecStatus::MemoryFault: return "MemoryFault";
  }
  return "?";
}

namespace {

std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  // rejection sampling keeps the permutation identical across standard libraries
  const std::uint64_t limit = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= limit) return r % n;
  }
}

struct Src {
  bool is_reg = false;
  Word value = 0;  // register index or resolved immediate
};

struct Decoded {
  Opcode op = Opcode::Ret;
  std::uint32_t dst = 0;
  Src a;
  Src b;
  SpecialReg special{};
  std::uint32_t target = 0;
};

std::vector<Decoded> decode(const KernelDef& k, const std::vector<Word>& args) {
  std::unordered_map<std::string, Word> param_values;
  for (std::size_t i = 0; i < k.params.size(); ++i) param_values[k.params[i]] = args[i];
  const auto labels = label_table(k);

  auto src = [&](const Operand& o) {
    Src s;
    if (const auto* r = std::get_if<Reg>(&o)) {
      s.is_reg = true;
      s.value = r->index;
    } else if (const auto* i = std::get_if<Imm>(&o)) {
      s.value = i->value;
    } else {
      s.value = param_values.at(std::get<ParamRef>(o).name);
    }
    return s;
  };

  std::vector<Decoded> out;
  out.reserve(k.body.size());
  for (const auto& inst : k.body) {
    Decoded d;
    d.op = inst.op;
    d.dst = inst.dst.index;
    d.a = src(inst.a);
    d.b = src(inst.b);
    d.special = inst.special;
    if (inst.op == Opcode::Branch || inst.op == Opcode::Jump) {
      d.target = static_cast<std::uint32_t>(labels.at(inst.target));
    }
    out.push_back(d);
  }
  return out;
}

Word wrap_add(Word a, Word b) {
  return static_cast<Word>(static_cast<std::uint64_t>(a) + static_cast<std::uint64_t>(b));
}
Word wrap_sub(Word a, Word b) {
  return static_cast<Word>(static_cast<std::uint64_t>(a) - static_cast<std::uint64_t>(b));
}
Word wrap_mul(Word a, Word b) {
  return static_cast<Word>(static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b));
}
Word safe_div(Word a, Word b) {
  if (b == 0) return 0;
  if (b == -1) return wrap_sub(0, a);
  return a / b;
}
Word safe_mod(Word a, Word b) {
  if (b == 0 || b == -1) return 0;
  return a % b;
}

enum class ThreadState : std::uint8_t { Running, AtBarrier, Returned };

class BlockRunner {
 public:
  BlockRunner(const KernelDef& k, const std::vector<Decoded>& code, std::vector<Word>& memory,
              const std::optional<HostTrigger>& trigger, std::uint64_t step_limit)
      : kernel_(k),
        code_(code),
        memory_(memory),
        trigger_(trigger),
        step_limit_(step_limit),
        threads_(k.block.total()),
        regs_(static_cast<std::size_t>(threads_) * k.register_count),
        pc_(threads_),
        state_(threads_),
        shared_(k.shared_words) {}

  std::uint64_t steps() const { return steps_; }
  const std::string& detail() const { return detail_; }

  void apply_trigger() {
    if (!trigger_ || trigger_fired_) return;
    const auto& t = *trigger_;
    if (!in_global(t.watch_addr) || !in_global(t.target_addr)) return;
    if (memory_[t.watch_addr] >= t.threshold) {
      memory_[t.target_addr] = t.value;
      trigger_fired_ = true;
    }
  }

  ExecStatus run_block(Word linear_block) {
    block_idx_ = delinearize(linear_block, kernel_.grid);
    std::fill(regs_.begin(), regs_.end(), 0);
    std::fill(shared_.begin(), shared_.end(), 0);
    std::fill(pc_.begin(), pc_.end(), 0);
    std::fill(state_.begin(), state_.end(), ThreadState::Running);

    for (;;) {
      for (Word t = 0; t < threads_; ++t) {
        if (state_[t] != ThreadState::Running) continue;
        if (const auto s = run_thread(t); s != ExecStatus::Completed) return s;
      }
      Word waiting = 0;
      Word returned = 0;
      for (Word t = 0; t < threads_; ++t) {
        if (state_[t] == ThreadState::AtBarrier) ++waiting;
        if (state_[t] == ThreadState::Returned) ++returned;
      }
      if (returned == threads_) return ExecStatus::Completed;
      if (returned > 0) {
        detail_ = "block " + std::to_string(linear_block) + ": " + std::to_string(waiting) +
                  " thread(s) wait at a barrier after " + std::to_string(returned) +
                  " returned";
        return ExecStatus::DivergentBarrier;
      }
      const std::uint32_t site = pc_[0];
      for (Word t = 1; t < threads_; ++t) {
        if (pc_[t] != site) {
          detail_ = "block " + std::to_string(linear_block) +
                    ": threads wait at different barriers (instructions " + std::to_string(site) +
                    " and " + std::to_string(pc_[t]) + ")";
          return ExecStatus::DivergentBarrier;
        }
      }
      for (Word t = 0; t < threads_; ++t) {
        state_[t] = ThreadState::Running;
        ++pc_[t];
      }
    }
  }

 private:
  bool in_global(Word addr) const {
    return addr >= 0 && addr < static_cast<Word>(memory_.size());
  }

  ExecStatus fault(Word t, const char* what, Word addr) {
    detail_ = std::string(what) + " address " + std::to_string(addr) + " out of range (thread " +
              std::to_string(t) + ", instruction " + std::to_string(pc_[t]) + ")";
    return ExecStatus::MemoryFault;
  }

  ExecStatus run_thread(Word t) {
    Word* r = regs_.data() + static_cast<std::size_t>(t) * kernel_.register_count;
    const Dim3 tidx = delinearize(t, kernel_.block);
    auto val = [r](const Src& s) { return s.is_reg ? r[s.value] : s.value; };
    std::uint32_t pc = pc_[t];

    for (;;) {
      if (steps_ >= step_limit_) {
        pc_[t] = pc;
        detail_ = "step limit " + std::to_string(step_limit_) + " reached";
        return ExecStatus::StepLimitExceeded;
      }
      ++steps_;
      const Decoded& d = code_[pc];
      switch (d.op) {
        case Opcode::Const:
        case Opcode::Mov: r[d.dst] = val(d.a); break;
        case Opcode::Add: r[d.dst] = wrap_add(val(d.a), val(d.b)); break;
        case Opcode::Sub: r[d.dst] = wrap_sub(val(d.a), val(d.b)); break;
        case Opcode::Mul: r[d.dst] = wrap_mul(val(d.a), val(d.b)); break;
        case Opcode::Div: r[d.dst] = safe_div(val(d.a), val(d.b)); break;
        case Opcode::Mod: r[d.dst] = safe_mod(val(d.a), val(d.b)); break;
        case Opcode::CmpLt: r[d.dst] = val(d.a) < val(d.b); break;
        case Opcode::CmpLe: r[d.dst] = val(d.a) <= val(d.b); break;
        case Opcode::CmpEq: r[d.dst] = val(d.a) == val(d.b); break;
        case Opcode::CmpNe: r[d.dst] = val(d.a) != val(d.b); break;
        case Opcode::ReadSpecial: {
          const int ax = d.special.axis;
          switch (d.special.kind) {
            case SpecialKind::BlockIdx: r[d.dst] = block_idx_[ax]; break;
            case SpecialKind::ThreadIdx: r[d.dst] = tidx[ax]; break;
            case SpecialKind::GridDim: r[d.dst] = kernel_.grid[ax]; break;
            case SpecialKind::BlockDim: r[d.dst] = kernel_.block[ax]; break;
          }
          break;
        }
        case Opcode::LoadGlobal: {
          const Word addr = val(d.a);
          if (!in_global(addr)) return pc_[t] = pc, fault(t, "global load", addr);
          r[d.dst] = memory_[addr];
          break;
        }
        case Opcode::StoreGlobal: {
          const Word addr = val(d.a);
          if (!in_global(addr)) return pc_[t] = pc, fault(t, "global store", addr);
          memory_[addr] = val(d.b);
          apply_trigger();
          break;
        }
        case Opcode::AtomicAddGlobal: {
          const Word addr = val(d.a);
          if (!in_global(addr)) return pc_[t] = pc, fault(t, "atomic", addr);
          const Word prior = memory_[addr];
          memory_[addr] = wrap_add(prior, val(d.b));
          r[d.dst] = prior;
          apply_trigger();
          break;
        }
        case Opcode::LoadShared: {
          const Word addr = val(d.a);
          if (addr < 0 || addr >= static_cast<Word>(shared_.size())) {
            return pc_[t] = pc, fault(t, "shared load", addr);
          }
          r[d.dst] = shared_[addr];
          break;
        }
        case Opcode::StoreShared: {
          const Word addr = val(d.a);
          if (addr < 0 || addr >= static_cast<Word>(shared_.size())) {
            return pc_[t] = pc, fault(t, "shared store", addr);
          }
          shared_[addr] = val(d.b);
          break;
        }
        case Opcode::BarSync:
          pc_[t] = pc;
          state_[t] = ThreadState::AtBarrier;
          return ExecStatus::Completed;
        case Opcode::Branch:
          if (val(d.a) != 0) {
            pc = d.target;
            continue;
          }
          break;
        case Opcode::Jump:
          pc = d.target;
          continue;
        case Opcode::Ret:
          pc_[t] = pc;
          state_[t] = ThreadState::Returned;
          return ExecStatus::Completed;
      }
      ++pc;
    }
  }

  const KernelDef& kernel_;
  const std::vector<Decoded>& code_;
  std::vector<Word>& memory_;
  const std::optional<HostTrigger>& trigger_;
  bool trigger_fired_ = false;
  std::uint64_t step_limit_;
  std::uint64_t steps_ = 0;
  Word threads_;
  std::vector<Word> regs_;
  std::vector<std::uint32_t> pc_;
  std::vector<ThreadState> state_;
  std::vector<Word> shared_;
  Dim3 block_idx_;
  std::string detail_;
};

}  // namespace

std::vector<Word> block_order(Word block_count, std::uint64_t schedule_seed) {
  std::vector<Word> order(static_cast<std::size_t>(block_count));
  for (Word i = 0; i < block_count; ++i) order[i] = i;
  std::mt19937_64 rng(schedule_seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[bounded(rng, i)]);
  }
  return order;
}

ExecResult interpret(const LaunchSpec& launch, std::uint64_t schedule_seed,
                     std::uint64_t step_limit) {
  const KernelDef& k = launch.kernel;
  validate(k);
  if (launch.args.size() != k.params.size()) {
    throw std::invalid_argument("launch supplies " + std::to_string(launch.args.size()) +
                                " argument(s) for " + std::to_string(k.params.size()) +
                                " param(s)");
  }

  const auto code = decode(k, launch.args);
  ExecResult result;
  result.final_memory = launch.global_memory;
  BlockRunner runner(k, code, result.final_memory, launch.trigger, step_limit);
  runner.apply_trigger();

  for (const Word b : block_order(k.grid.total(), schedule_seed)) {
    const auto status = runner.run_block(b);
    if (status != ExecStatus::Completed) {
      result.status = status;
      result.final_memory.clear();
      result.steps_executed = runner.steps();
      result.detail = runner.detail();
      return result;
    }
  }
  result.steps_executed = runner.steps();
  return result;
}

}  // namespace tally::ir
