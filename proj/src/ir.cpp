#include "tally/ir.hpp"

#include <unordered_set>

namespace tally::ir {

bool is_valid(const Dim3& d) noexcept { return d.x >= 1 && d.y >= 1 && d.z >= 1; }

Word linearize(const Dim3& idx, const Dim3& dims) {
  for (int a = 0; a < 3; ++a) {
    if (idx[a] < 0 || idx[a] >= dims[a]) throw std::out_of_range("linearize: index outside dims");
  }
  return idx.x + idx.y * dims.x + idx.z * dims.x * dims.y;
}

Dim3 delinearize(Word task_index, const Dim3& dims) {
  if (task_index < 0 || task_index >= dims.total()) {
    throw std::out_of_range("delinearize: task index outside dims");
  }
  Dim3 out;
  out.x = task_index % dims.x;
  const Word rest = task_index / dims.x;
  out.y = rest % dims.y;
  out.z = rest / dims.y;
  return out;
}

std::string_view opcode_name(Opcode op) noexcept {
  switch (op) {
    case Opcode::Const: return "CONST";
    case Opcode::Mov: return "MOV";
    case Opcode::Add: return "ADD";
    case Opcode::Sub: return "SUB";
    case Opcode::Mul: return "MUL";
    case Opcode::Div: return "DIV";
    case Opcode::Mod: return "MOD";
    case Opcode::CmpLt: return "CMP_LT";
    case Opcode::CmpLe: return "CMP_LE";
    case Opcode::CmpEq: return "CMP_EQ";
    case Opcode::CmpNe: return "CMP_NE";
    case Opcode::ReadSpecial: return "READ_SPECIAL";
    case Opcode::LoadGlobal: return "LOAD_GLOBAL";
    case Opcode::StoreGlobal: return "STORE_GLOBAL";
    case Opcode::AtomicAddGlobal: return "ATOMIC_ADD_GLOBAL";
    case Opcode::LoadShared: return "LOAD_SHARED";
    case Opcode::StoreShared: return "STORE_SHARED";
    case Opcode::BarSync: return "BAR_SYNC";
    case Opcode::Branch: return "BRANCH";
    case Opcode::Jump: return "JUMP";
    case Opcode::Ret: return "RET";
  }
  return "?";
}

bool writes_dst(Opcode op) noexcept {
  switch (op) {
    case Opcode::StoreGlobal:
    case Opcode::StoreShared:
    case Opcode::BarSync:
    case Opcode::Branch:
    case Opcode::Jump:
    case Opcode::Ret:
      return false;
    default:
      return true;
  }
}

bool is_binary(Opcode op) noexcept {
  switch (op) {
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Mul:
    case Opcode::Div:
    case Opcode::Mod:
    case Opcode::CmpLt:
    case Opcode::CmpLe:
    case Opcode::CmpEq:
    case Opcode::CmpNe:
      return true;
    default:
      return false;
  }
}

namespace build {
Instruction const_(std::uint32_t dst, Word value) {
  Instruction i;
  i.op = Opcode::Const;
  i.dst = Reg{dst};
  i.a = Imm{value};
  return i;
}
Instruction mov(std::uint32_t dst, Operand src) {
  Instruction i;
  i.op = Opcode::Mov;
  i.dst = Reg{dst};
  i.a = std::move(src);
  return i;
}
Instruction binary(Opcode op, std::uint32_t dst, Operand a, Operand b) {
  Instruction i;
  i.op = op;
  i.dst = Reg{dst};
  i.a = std::move(a);
  i.b = std::move(b);
  return i;
}
Instruction read_special(std::uint32_t dst, SpecialKind kind, int axis) {
  Instruction i;
  i.op = Opcode::ReadSpecial;
  i.dst = Reg{dst};
  i.special = SpecialReg{kind, axis};
  return i;
}
Instruction load_global(std::uint32_t dst, Operand addr) {
  Instruction i;
  i.op = Opcode::LoadGlobal;
  i.dst = Reg{dst};
  i.a = std::move(addr);
  return i;
}
Instruction store_global(Operand addr, Operand value) {
  Instruction i;
  i.op = Opcode::StoreGlobal;
  i.a = std::move(addr);
  i.b = std::move(value);
  return i;
}
Instruction atomic_add_global(std::uint32_t dst, Operand addr, Operand value) {
  Instruction i;
  i.op = Opcode::AtomicAddGlobal;
  i.dst = Reg{dst};
  i.a = std::move(addr);
  i.b = std::move(value);
  return i;
}
Instruction load_shared(std::uint32_t dst, Operand addr) {
  Instruction i;
  i.op = Opcode::LoadShared;
  i.dst = Reg{dst};
  i.a = std::move(addr);
  return i;
}
Instruction store_shared(Operand addr, Operand value) {
  Instruction i;
  i.op = Opcode::StoreShared;
  i.a = std::move(addr);
  i.b = std::move(value);
  return i;
}
Instruction bar_sync() {
  Instruction i;
  i.op = Opcode::BarSync;
  return i;
}
Instruction branch(std::uint32_t cond, std::string target) {
  Instruction i;
  i.op = Opcode::Branch;
  i.a = Reg{cond};
  i.target = std::move(target);
  return i;
}
Instruction jump(std::string target) {
  Instruction i;
  i.op = Opcode::Jump;
  i.target = std::move(target);
  return i;
}
Instruction ret() { return Instruction{}; }
Instruction labeled(std::string label, Instruction inst) {
  inst.label = std::move(label);
  return inst;
}
}  // namespace build

ParseError::ParseError(int line, int column, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) +
                         ": " + message),
      line_(line),
      column_(column) {}

std::unordered_map<std::string, std::size_t> label_table(const KernelDef& k) {
  std::unordered_map<std::string, std::size_t> labels;
  for (std::size_t i = 0; i < k.body.size(); ++i) {
    const auto& l = k.body[i].label;
    if (l.empty()) continue;
    if (!labels.emplace(l, i).second) throw ValidationError("duplicate label '" + l + "'");
  }
  return labels;
}

namespace {

void check_operand(const KernelDef& k, const std::unordered_set<std::string>& params,
                   const Operand& o, std::size_t at) {
  if (const auto* r = std::get_if<Reg>(&o)) {
    if (r->index >= k.register_count) {
      throw ValidationError("instruction " + std::to_string(at) + ": register r" +
                            std::to_string(r->index) + " exceeds regs " +
                            std::to_string(k.register_count));
    }
  } else if (const auto* p = std::get_if<ParamRef>(&o)) {
    if (!params.contains(p->name)) {
      throw ValidationError("instruction " + std::to_string(at) + ": unknown param '" + p->name +
                            "'");
    }
  }
}

}  // namespace

void validate(const KernelDef& k) {
  if (k.name.empty()) throw ValidationError("kernel has no name");
  if (!is_valid(k.grid)) throw ValidationError("grid dimensions must be >= 1");
  if (!is_valid(k.block)) throw ValidationError("block dimensions must be >= 1");
  if (k.shared_words < 0) throw ValidationError("shared size must be >= 0");
  if (k.body.empty()) throw ValidationError("kernel body is empty");

  std::unordered_set<std::string> params;
  for (const auto& p : k.params) {
    if (!params.insert(p).second) throw ValidationError("duplicate param '" + p + "'");
  }
  const auto labels = label_table(k);

  for (std::size_t i = 0; i < k.body.size(); ++i) {
    const auto& inst = k.body[i];
    if (writes_dst(inst.op)) check_operand(k, params, inst.dst, i);
    switch (inst.op) {
      case Opcode::Const:
        if (!std::holds_alternative<Imm>(inst.a)) {
          throw ValidationError("instruction " + std::to_string(i) + ": CONST needs an immediate");
        }
        break;
      case Opcode::Branch:
        if (!std::holds_alternative<Reg>(inst.a)) {
          throw ValidationError("instruction " + std::to_string(i) +
                                ": BRANCH condition must be a register");
        }
        check_operand(k, params, inst.a, i);
        [[fallthrough]];
      case Opcode::Jump:
        if (!labels.contains(inst.target)) {
          throw ValidationError("unresolved label '" + inst.target + "'");
        }
        break;
      case Opcode::ReadSpecial:
        if (inst.special.axis < 0 || inst.special.axis > 2) {
          throw ValidationError("instruction " + std::to_string(i) + ": bad special axis");
        }
        break;
      default:
        break;
    }
    if (inst.op != Opcode::Branch) {
      if (inst.op != Opcode::Const) check_operand(k, params, inst.a, i);
      check_operand(k, params, inst.b, i);
    }
  }
  const auto last = k.body.back().op;
  if (last != Opcode::Ret && last != Opcode::Jump) {
    throw ValidationError("control can fall off the end of the body (last instruction must be "
                          "RET or JUMP)");
  }
}

std::string to_string(const SpecialReg& s) {
  static constexpr const char* kKinds[] = {"blockIdx", "threadIdx", "gridDim", "blockDim"};
  static constexpr const char* kAxes[] = {"x", "y", "z"};
  return std::string(kKinds[static_cast<int>(s.kind)]) + "." + kAxes[s.axis];
}

}  // namespace tally::ir
