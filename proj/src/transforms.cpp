#include "tally/transforms.hpp"

#include <charconv>
#include <numeric>

namespace tally::transforms {

using namespace ir::build;
using ir::Instruction;
using ir::Opcode;
using ir::ParamRef;
using ir::SpecialKind;

Fraction Fraction::parse(const std::string& text) {
  Fraction f;
  const auto bad = [&] { return std::invalid_argument("bad fraction '" + text + "'"); };
  const auto slash = text.find('/');
  auto to_int = [&](std::string_view s) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) throw bad();
    return v;
  };
  if (slash != std::string::npos) {
    f.num = to_int(std::string_view(text).substr(0, slash));
    f.den = to_int(std::string_view(text).substr(slash + 1));
  } else if (const auto dot = text.find('.'); dot != std::string::npos) {
    const auto frac = std::string_view(text).substr(dot + 1);
    if (frac.size() > 12) throw bad();
    const auto whole = std::string_view(text).substr(0, dot);
    f.den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) f.den *= 10;
    f.num = (whole.empty() ? 0 : to_int(whole)) * f.den + (frac.empty() ? 0 : to_int(frac));
  } else {
    f.num = to_int(text);
    f.den = 1;
  }
  if (f.den <= 0 || f.num <= 0 || f.num > f.den) {
    throw std::invalid_argument("fraction '" + text + "' must lie in (0, 1]");
  }
  const auto g = std::gcd(f.num, f.den);
  f.num /= g;
  f.den /= g;
  return f;
}

std::string Fraction::str() const {
  if (den == 1) return std::to_string(num);
  return std::to_string(num) + "/" + std::to_string(den);
}

namespace {

void refuse_cooperative(const KernelDef& k, const char* pass) {
  if (k.inter_block_dependent) {
    throw TransformRefused(std::string(pass) + ": kernel '" + k.name +
                           "' is inter_block_dependent; block-level transformations do not apply");
  }
}

void refuse_param_clash(const KernelDef& k, const char* pass, const std::string& name) {
  for (const auto& p : k.params) {
    if (p == name) {
      throw TransformRefused(std::string(pass) + ": kernel already has param '" + name + "'");
    }
  }
}

void refuse_label_prefix(const KernelDef& k, const char* pass, std::string_view prefix) {
  for (const auto& inst : k.body) {
    if (inst.label.starts_with(prefix)) {
      throw TransformRefused(std::string(pass) + ": label '" + inst.label +
                             "' collides with the pass's reserved prefix");
    }
  }
}

Instruction carry_label(const Instruction& from, Instruction to) {
  to.label = from.label;
  return to;
}

}  // namespace

KernelDef add_block_offset(const KernelDef& k) {
  refuse_cooperative(k, "add_block_offset");
  for (const char* p : kOffsetParams) refuse_param_clash(k, "add_block_offset", p);

  KernelDef out = k;
  out.body.clear();
  for (const char* p : kOffsetParams) out.params.emplace_back(p);
  for (const auto& inst : k.body) {
    if (inst.op == Opcode::ReadSpecial && inst.special.kind == SpecialKind::BlockIdx) {
      out.body.push_back(inst);
      out.body.push_back(binary(Opcode::Add, inst.dst.index, inst.dst,
                                ParamRef{kOffsetParams[inst.special.axis]}));
    } else if (inst.op == Opcode::ReadSpecial && inst.special.kind == SpecialKind::GridDim) {
      out.body.push_back(carry_label(inst, const_(inst.dst.index, k.grid[inst.special.axis])));
    } else {
      out.body.push_back(inst);
    }
  }
  return out;
}

int slicing_axis(const Dim3& grid) {
  int axis = 0;
  for (int a = 1; a < 3; ++a) {
    if (grid[a] > grid[axis]) axis = a;
  }
  return axis;
}

std::vector<Word> slice_extents(Word axis_len, Fraction fraction) {
  if (axis_len < 1) throw std::invalid_argument("slice_extents: axis length must be >= 1");
  // round half up of fraction * axis_len in exact integer arithmetic
  const Word rounded = (2 * fraction.num * axis_len + fraction.den) / (2 * fraction.den);
  const Word extent = std::max<Word>(1, std::min(rounded, axis_len));
  const Word count = axis_len / extent;
  std::vector<Word> out(static_cast<std::size_t>(count), extent);
  out.back() = axis_len - (count - 1) * extent;
  return out;
}

std::vector<Word> slice_block_counts(const Dim3& grid, Fraction fraction) {
  const int axis = slicing_axis(grid);
  const Word others = grid.total() / grid[axis];
  std::vector<Word> counts;
  for (const Word e : slice_extents(grid[axis], fraction)) counts.push_back(e * others);
  return counts;
}

SlicedPlan slice_kernel(const KernelDef& k, Fraction fraction) {
  refuse_cooperative(k, "slice_kernel");
  SlicedPlan plan;
  plan.base_kernel = add_block_offset(k);
  const int axis = slicing_axis(k.grid);
  Word offset = 0;
  for (const Word e : slice_extents(k.grid[axis], fraction)) {
    SubLaunch s;
    s.block_offset = Dim3{0, 0, 0};
    s.block_offset.at(axis) = offset;
    s.sub_grid = k.grid;
    s.sub_grid.at(axis) = e;
    plan.sub_launches.push_back(s);
    offset += e;
  }
  return plan;
}

ir::LaunchSpec sub_launch(const SlicedPlan& plan, std::size_t i, std::vector<Word> args,
                          std::vector<Word> memory) {
  const auto& s = plan.sub_launches.at(i);
  ir::LaunchSpec launch;
  launch.kernel = plan.base_kernel;
  launch.kernel.grid = s.sub_grid;
  launch.args = std::move(args);
  launch.args.push_back(s.block_offset.x);
  launch.args.push_back(s.block_offset.y);
  launch.args.push_back(s.block_offset.z);
  launch.global_memory = std::move(memory);
  return launch;
}

ir::ExecResult run_sliced(const SlicedPlan& plan, const std::vector<Word>& args,
                          std::vector<Word> memory, std::uint64_t schedule_seed) {
  ir::ExecResult total;
  for (std::size_t i = 0; i < plan.sub_launches.size(); ++i) {
    auto r = ir::interpret(sub_launch(plan, i, args, std::move(memory)), schedule_seed + i);
    total.steps_executed += r.steps_executed;
    if (r.status != ir::ExecStatus::Completed) {
      r.steps_executed = total.steps_executed;
      return r;
    }
    memory = std::move(r.final_memory);
  }
  total.final_memory = std::move(memory);
  return total;
}

KernelDef unify_synchronization(const KernelDef& k) {
  refuse_label_prefix(k, "unify_synchronization", "__usync");

  const std::uint32_t n = k.register_count;
  const std::uint32_t returned = n;
  const std::uint32_t resume = n + 1;
  const std::uint32_t tmp = n + 2;
  const std::uint32_t count = n + 3;
  const Word counter_slot = k.shared_words;
  const Word threads = k.block.total();

  KernelDef out = k;
  out.register_count = n + 4;
  out.shared_words = k.shared_words + 1;
  out.body.clear();

  Word sites = 0;
  for (const auto& inst : k.body) {
    if (inst.op == Opcode::Ret) {
      out.body.push_back(carry_label(inst, const_(returned, 1)));
      out.body.push_back(load_shared(tmp, ir::Imm{counter_slot}));
      out.body.push_back(binary(Opcode::Add, tmp, ir::Reg{tmp}, ir::Imm{1}));
      out.body.push_back(store_shared(ir::Imm{counter_slot}, ir::Reg{tmp}));
      out.body.push_back(jump(kUnifiedSyncLabel));
    } else if (inst.op == Opcode::BarSync) {
      const Word s = sites++;
      out.body.push_back(carry_label(inst, const_(resume, s)));
      out.body.push_back(jump(kUnifiedSyncLabel));
      out.body.push_back(labeled("__usync_r" + std::to_string(s), mov(resume, ir::Reg{resume})));
    } else {
      out.body.push_back(inst);
    }
  }

  // barrier, read the returned count, barrier again so nobody changes it before all read
  out.body.push_back(labeled(kUnifiedSyncLabel, bar_sync()));
  out.body.push_back(load_shared(count, ir::Imm{counter_slot}));
  out.body.push_back(bar_sync());
  out.body.push_back(binary(Opcode::CmpEq, tmp, ir::Reg{count}, ir::Imm{threads}));
  out.body.push_back(branch(tmp, kUnifiedExitLabel));
  out.body.push_back(branch(returned, kUnifiedSyncLabel));
  for (Word s = 0; s + 1 < sites; ++s) {
    out.body.push_back(binary(Opcode::CmpEq, tmp, ir::Reg{resume}, ir::Imm{s}));
    out.body.push_back(branch(tmp, "__usync_r" + std::to_string(s)));
  }
  out.body.push_back(jump(sites > 0 ? "__usync_r" + std::to_string(sites - 1)
                                    : std::string(kUnifiedSyncLabel)));
  out.body.push_back(labeled(kUnifiedExitLabel, ret()));
  return out;
}

bool has_unified_synchronization(const KernelDef& k) {
  std::size_t u = k.body.size();
  for (std::size_t i = 0; i < k.body.size(); ++i) {
    if (k.body[i].label == kUnifiedSyncLabel) {
      u = i;
      break;
    }
  }
  if (u == k.body.size()) return false;
  for (std::size_t i = 0; i < u; ++i) {
    if (k.body[i].op == Opcode::Ret) return false;
  }
  return true;
}

PtbKernelDef make_preemptible(const KernelDef& k, const Dim3& worker_grid,
                              PreconditionCheck check) {
  refuse_cooperative(k, "make_preemptible");
  if (!ir::is_valid(worker_grid)) throw std::invalid_argument("make_preemptible: worker grid must be >= 1");
  if (check == PreconditionCheck::Enforce && !has_unified_synchronization(k)) {
    throw TransformRefused(
        "make_preemptible: kernel '" + k.name +
        "' has a RET outside a unified synchronization block; run unify_synchronization first");
  }
  refuse_label_prefix(k, "make_preemptible", "__ptb");
  for (const char* p : {kPtbCounterParam, kPtbFlagParam, kPtbTotalParam}) {
    refuse_param_clash(k, "make_preemptible", p);
  }
  for (const char* p : kPtbGridParams) refuse_param_clash(k, "make_preemptible", p);

  const std::uint32_t n = k.register_count;
  const std::uint32_t idx = n;
  const std::uint32_t tmp = n + 1;
  const std::uint32_t flag = n + 2;
  const std::uint32_t bidx[3] = {n + 3, n + 4, n + 5};
  const std::uint32_t zi = n + 6;
  const Word slot = k.shared_words;

  PtbKernelDef out;
  out.worker_grid = worker_grid;
  out.original_grid = k.grid;
  KernelDef& w = out.kernel;
  w = k;
  w.grid = worker_grid;
  w.register_count = n + 7;
  w.shared_words = k.shared_words + 1;
  w.params.emplace_back(kPtbCounterParam);
  w.params.emplace_back(kPtbFlagParam);
  w.params.emplace_back(kPtbTotalParam);
  for (const char* p : kPtbGridParams) w.params.emplace_back(p);
  w.body.clear();
  auto& b = w.body;

  // iteration start: restore the fresh-block state of the original kernel
  b.push_back(labeled("__ptb_loop", const_(n > 0 ? 0 : tmp, 0)));
  for (std::uint32_t r = 1; r < n; ++r) b.push_back(const_(r, 0));
  b.push_back(read_special(tmp, SpecialKind::ThreadIdx, 0));
  b.push_back(read_special(flag, SpecialKind::ThreadIdx, 1));
  b.push_back(binary(Opcode::Add, tmp, ir::Reg{tmp}, ir::Reg{flag}));
  b.push_back(read_special(flag, SpecialKind::ThreadIdx, 2));
  b.push_back(binary(Opcode::Add, tmp, ir::Reg{tmp}, ir::Reg{flag}));
  b.push_back(branch(tmp, "__ptb_wait"));
  if (k.shared_words > 0) {
    b.push_back(const_(zi, 0));
    b.push_back(jump("__ptb_zero_check"));
    b.push_back(labeled("__ptb_zero_body", store_shared(ir::Reg{zi}, ir::Imm{0})));
    b.push_back(binary(Opcode::Add, zi, ir::Reg{zi}, ir::Imm{1}));
    b.push_back(labeled("__ptb_zero_check",
                        binary(Opcode::CmpLt, tmp, ir::Reg{zi}, ir::Imm{k.shared_words})));
    b.push_back(branch(tmp, "__ptb_zero_body"));
  }
  // thread (0,0,0): flag check, then claim one task index
  b.push_back(load_global(flag, ParamRef{kPtbFlagParam}));
  b.push_back(mov(idx, ParamRef{kPtbTotalParam}));
  b.push_back(branch(flag, "__ptb_publish"));
  b.push_back(atomic_add_global(idx, ParamRef{kPtbCounterParam}, ir::Imm{1}));
  b.push_back(labeled("__ptb_publish", store_shared(ir::Imm{slot}, ir::Reg{idx})));
  b.push_back(labeled("__ptb_wait", bar_sync()));
  b.push_back(load_shared(idx, ir::Imm{slot}));
  b.push_back(binary(Opcode::CmpLt, tmp, ir::Reg{idx}, ParamRef{kPtbTotalParam}));
  b.push_back(binary(Opcode::CmpEq, tmp, ir::Reg{tmp}, ir::Imm{0}));
  b.push_back(branch(tmp, "__ptb_exit"));
  b.push_back(binary(Opcode::Mod, bidx[0], ir::Reg{idx}, ParamRef{kPtbGridParams[0]}));
  b.push_back(binary(Opcode::Div, tmp, ir::Reg{idx}, ParamRef{kPtbGridParams[0]}));
  b.push_back(binary(Opcode::Mod, bidx[1], ir::Reg{tmp}, ParamRef{kPtbGridParams[1]}));
  b.push_back(binary(Opcode::Div, bidx[2], ir::Reg{tmp}, ParamRef{kPtbGridParams[1]}));

  for (const auto& inst : k.body) {
    if (inst.op == Opcode::ReadSpecial && inst.special.kind == SpecialKind::BlockIdx) {
      b.push_back(carry_label(inst, mov(inst.dst.index, ir::Reg{bidx[inst.special.axis]})));
    } else if (inst.op == Opcode::ReadSpecial && inst.special.kind == SpecialKind::GridDim) {
      b.push_back(carry_label(inst, mov(inst.dst.index, ParamRef{kPtbGridParams[inst.special.axis]})));
    } else if (inst.op == Opcode::Ret) {
      b.push_back(carry_label(inst, jump("__ptb_end")));
    } else {
      b.push_back(inst);
    }
  }

  b.push_back(labeled("__ptb_end", bar_sync()));
  b.push_back(jump("__ptb_loop"));
  b.push_back(labeled("__ptb_exit", ret()));
  return out;
}

PtbControl append_control(const KernelDef& original, Word memory_words) {
  PtbControl c;
  c.task_counter_addr = memory_words;
  c.preempt_flag_addr = memory_words + 1;
  c.total_blocks = original.grid.total();
  c.original_grid = original.grid;
  return c;
}

ir::LaunchSpec ptb_launch(const PtbKernelDef& ptb, const PtbControl& control,
                          std::vector<Word> args, std::vector<Word> memory) {
  if (control.task_counter_addr == control.preempt_flag_addr) {
    throw std::invalid_argument("ptb_launch: counter and flag must be distinct words");
  }
  for (const Word a : {control.task_counter_addr, control.preempt_flag_addr}) {
    if (a < 0 || a >= static_cast<Word>(memory.size())) {
      throw std::invalid_argument("ptb_launch: control word outside global memory");
    }
  }
  ir::LaunchSpec launch;
  launch.kernel = ptb.kernel;
  launch.args = std::move(args);
  launch.args.push_back(control.task_counter_addr);
  launch.args.push_back(control.preempt_flag_addr);
  launch.args.push_back(control.total_blocks);
  launch.args.push_back(control.original_grid.x);
  launch.args.push_back(control.original_grid.y);
  launch.args.push_back(control.original_grid.z);
  launch.global_memory = std::move(memory);
  return launch;
}

}  // namespace tally::transforms
