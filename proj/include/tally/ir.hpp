#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace tally::ir {

/// Machine word of the mini IR. All arithmetic wraps modulo 2^64.
using Word = std::int64_t;

struct Dim3 {
  Word x = 1;
  Word y = 1;
  Word z = 1;

  constexpr Word total() const noexcept { return x * y * z; }
  constexpr Word operator[](int axis) const noexcept { return axis == 0 ? x : axis == 1 ? y : z; }
  Word& at(int axis) noexcept { return axis == 0 ? x : axis == 1 ? y : z; }

  friend constexpr bool operator==(const Dim3&, const Dim3&) = default;
};

bool is_valid(const Dim3& d) noexcept;

/// idx.x + idx.y*dims.x + idx.z*dims.x*dims.y. Throws std::out_of_range unless idx < dims.
Word linearize(const Dim3& idx, const Dim3& dims);
/// Inverse of linearize. Throws std::out_of_range unless 0 <= task_index < dims.total().
Dim3 delinearize(Word task_index, const Dim3& dims);

enum class SpecialKind : std::uint8_t { BlockIdx, ThreadIdx, GridDim, BlockDim };

struct SpecialReg {
  SpecialKind kind = SpecialKind::ThreadIdx;
  int axis = 0;  // 0 = x, 1 = y, 2 = z

  friend bool operator==(const SpecialReg&, const SpecialReg&) = default;
};

enum class Opcode : std::uint8_t {
  Const,
  Mov,
  Add,
  Sub,
  Mul,
  Div,
  Mod,
  CmpLt,
  CmpLe,
  CmpEq,
  CmpNe,
  ReadSpecial,
  LoadGlobal,
  StoreGlobal,
  AtomicAddGlobal,
  LoadShared,
  StoreShared,
  BarSync,
  Branch,
  Jump,
  Ret,
};

std::string_view opcode_name(Opcode op) noexcept;

struct Reg {
  std::uint32_t index = 0;
  friend bool operator==(const Reg&, const Reg&) = default;
};
struct Imm {
  Word value = 0;
  friend bool operator==(const Imm&, const Imm&) = default;
};
/// Reads the named kernel parameter (written `%name` in text).
struct ParamRef {
  std::string name;
  friend bool operator==(const ParamRef&, const ParamRef&) = default;
};

using Operand = std::variant<Reg, Imm, ParamRef>;

/// Operand layout per opcode:
///   CONST/MOV dst a;  arith/CMP dst a b;  READ_SPECIAL dst special;
///   LOAD_* dst a(addr);  STORE_* a(addr) b(value);  ATOMIC_ADD_GLOBAL dst a(addr) b(value);
///   BRANCH a(cond reg) target;  JUMP target;  BAR_SYNC, RET nothing.
struct Instruction {
  std::string label;  // empty when unlabeled
  Opcode op = Opcode::Ret;
  Reg dst{};
  Operand a = Imm{};
  Operand b = Imm{};
  SpecialReg special{};
  std::string target;

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct KernelDef {
  std::string name;
  std::vector<std::string> params;
  Dim3 grid;
  Dim3 block;
  std::uint32_t register_count = 0;
  Word shared_words = 0;
  std::vector<Instruction> body;
  bool inter_block_dependent = false;

  friend bool operator==(const KernelDef&, const KernelDef&) = default;
};

// Instruction builders, mostly for transforms and tests.
namespace build {
Instruction const_(std::uint32_t dst, Word value);
Instruction mov(std::uint32_t dst, Operand src);
Instruction binary(Opcode op, std::uint32_t dst, Operand a, Operand b);
Instruction read_special(std::uint32_t dst, SpecialKind kind, int axis);
Instruction load_global(std::uint32_t dst, Operand addr);
Instruction store_global(Operand addr, Operand value);
Instruction atomic_add_global(std::uint32_t dst, Operand addr, Operand value);
Instruction load_shared(std::uint32_t dst, Operand addr);
Instruction store_shared(Operand addr, Operand value);
Instruction bar_sync();
Instruction branch(std::uint32_t cond, std::string target);
Instruction jump(std::string target);
Instruction ret();
Instruction labeled(std::string label, Instruction inst);
}  // namespace build

bool writes_dst(Opcode op) noexcept;
bool is_binary(Opcode op) noexcept;

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, int column, const std::string& message);
  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  int line_;
  int column_;
};

/// Structural problems in a KernelDef (bad register, unresolved label, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Label name -> instruction index. Throws ValidationError on duplicates.
std::unordered_map<std::string, std::size_t> label_table(const KernelDef& k);

/// Checks every KernelDef invariant; throws ValidationError describing the first violation.
void validate(const KernelDef& k);

KernelDef parse_kernel(std::string_view text);
std::string emit_kernel(const KernelDef& k);

std::string to_string(const SpecialReg& s);

}  // namespace tally::ir
