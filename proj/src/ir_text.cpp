// Line-based textual form of the kernel IR.
//
//   kernel <name>
//   grid <x> <y> <z>
//   block <x> <y> <z>
//   regs <n>
//   shared <n>
//   param <name>            (repeated, in order)
//   flag inter_block_dependent
//   [label:] OPCODE operand*
//
// Registers are r<k>, immediates are decimal, params are %name, specials are
// blockIdx.x style. '#' starts a comment.

#include <cctype>
#include <charconv>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "tally/ir.hpp"

namespace tally::ir {

namespace {

struct Token {
  std::string_view text;
  int column;
};

std::vector<Token> tokenize(std::string_view line) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size() || line[i] == '#') break;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r' &&
           line[i] != '#') {
      ++i;
    }
    out.push_back({line.substr(start, i - start), static_cast<int>(start) + 1});
  }
  return out;
}

bool is_identifier(std::string_view s) {
  if (s.empty()) return false;
  const auto head = static_cast<unsigned char>(s[0]);
  if (!(std::isalpha(head) || head == '_')) return false;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (!(std::isalnum(u) || c == '_' || c == '.')) return false;
  }
  return true;
}

const std::unordered_map<std::string_view, Opcode>& opcode_table() {
  static const std::unordered_map<std::string_view, Opcode> table = [] {
    std::unordered_map<std::string_view, Opcode> t;
    for (int op = 0; op <= static_cast<int>(Opcode::Ret); ++op) {
      t.emplace(opcode_name(static_cast<Opcode>(op)), static_cast<Opcode>(op));
    }
    return t;
  }();
  return table;
}

class LineParser {
 public:
  LineParser(int line, std::vector<Token> tokens) : line_(line), tokens_(std::move(tokens)) {}

  [[noreturn]] void fail(const Token& t, const std::string& msg) const {
    throw ParseError(line_, t.column, msg);
  }
  [[noreturn]] void fail_end(const std::string& msg) const {
    const int col = tokens_.empty() ? 1
                                    : tokens_.back().column +
                                          static_cast<int>(tokens_.back().text.size());
    throw ParseError(line_, col, msg);
  }

  const Token& next(const char* what) {
    if (pos_ >= tokens_.size()) fail_end(std::string("expected ") + what);
    return tokens_[pos_++];
  }

  void expect_end() const {
    if (pos_ < tokens_.size()) fail(tokens_[pos_], "unexpected trailing operand");
  }

  Word integer(const char* what) {
    const auto& t = next(what);
    return parse_int(t, what);
  }

  Word parse_int(const Token& t, const char* what) const {
    Word v = 0;
    const char* b = t.text.data();
    const char* e = b + t.text.size();
    if (b != e && *b == '+') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc{} || p != e || b == e) {
      fail(t, std::string("expected ") + what + ", got '" + std::string(t.text) + "'");
    }
    return v;
  }

  std::uint32_t reg(const char* what) {
    const auto& t = next(what);
    return parse_reg(t);
  }

  std::uint32_t parse_reg(const Token& t) const {
    if (t.text.size() < 2 || t.text[0] != 'r') {
      fail(t, "expected register, got '" + std::string(t.text) + "'");
    }
    std::uint32_t v = 0;
    auto [p, ec] = std::from_chars(t.text.data() + 1, t.text.data() + t.text.size(), v);
    if (ec != std::errc{} || p != t.text.data() + t.text.size()) {
      fail(t, "bad register '" + std::string(t.text) + "'");
    }
    return v;
  }

  Operand operand(const char* what) {
    const auto& t = next(what);
    if (t.text[0] == 'r') return Reg{parse_reg(t)};
    if (t.text[0] == '%') {
      const auto name = t.text.substr(1);
      if (!is_identifier(name)) fail(t, "bad param reference '" + std::string(t.text) + "'");
      return ParamRef{std::string(name)};
    }
    return Imm{parse_int(t, what)};
  }

  SpecialReg special() {
    const auto& t = next("special register");
    const auto dot = t.text.find('.');
    if (dot == std::string_view::npos || dot + 2 != t.text.size()) {
      fail(t, "bad special register '" + std::string(t.text) + "'");
    }
    const auto kind = t.text.substr(0, dot);
    SpecialReg s;
    if (kind == "blockIdx") s.kind = SpecialKind::BlockIdx;
    else if (kind == "threadIdx") s.kind = SpecialKind::ThreadIdx;
    else if (kind == "gridDim") s.kind = SpecialKind::GridDim;
    else if (kind == "blockDim") s.kind = SpecialKind::BlockDim;
    else fail(t, "unknown special register '" + std::string(t.text) + "'");
    const char ax = t.text[dot + 1];
    if (ax < 'x' || ax > 'z') fail(t, "bad special axis '" + std::string(t.text) + "'");
    s.axis = ax - 'x';
    return s;
  }

  std::string label_ref() {
    const auto& t = next("label");
    if (!is_identifier(t.text)) fail(t, "bad label '" + std::string(t.text) + "'");
    return std::string(t.text);
  }

  bool done() const { return pos_ >= tokens_.size(); }
  const Token& peek() const { return tokens_[pos_]; }
  void skip() { ++pos_; }
  int line() const { return line_; }

 private:
  int line_;
  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
};

Dim3 parse_dim3(LineParser& p) {
  Dim3 d;
  d.x = p.integer("x extent");
  d.y = p.integer("y extent");
  d.z = p.integer("z extent");
  return d;
}

Instruction parse_instruction(LineParser& p, Opcode op) {
  using namespace build;
  switch (op) {
    case Opcode::Const: {
      const auto d = p.reg("destination register");
      return const_(d, p.integer("immediate"));
    }
    case Opcode::Mov: {
      const auto d = p.reg("destination register");
      return mov(d, p.operand("source operand"));
    }
    case Opcode::ReadSpecial: {
      const auto d = p.reg("destination register");
      const auto s = p.special();
      return read_special(d, s.kind, s.axis);
    }
    case Opcode::LoadGlobal:
    case Opcode::LoadShared: {
      const auto d = p.reg("destination register");
      auto addr = p.operand("address operand");
      return op == Opcode::LoadGlobal ? load_global(d, std::move(addr))
                                      : load_shared(d, std::move(addr));
    }
    case Opcode::StoreGlobal:
    case Opcode::StoreShared: {
      auto addr = p.operand("address operand");
      auto value = p.operand("value operand");
      return op == Opcode::StoreGlobal ? store_global(std::move(addr), std::move(value))
                                       : store_shared(std::move(addr), std::move(value));
    }
    case Opcode::AtomicAddGlobal: {
      const auto d = p.reg("destination register");
      auto addr = p.operand("address operand");
      return atomic_add_global(d, std::move(addr), p.operand("value operand"));
    }
    case Opcode::BarSync: return bar_sync();
    case Opcode::Ret: return ret();
    case Opcode::Branch: {
      const auto c = p.reg("condition register");
      return branch(c, p.label_ref());
    }
    case Opcode::Jump: return jump(p.label_ref());
    default: {
      const auto d = p.reg("destination register");
      auto a = p.operand("first operand");
      return binary(op, d, std::move(a), p.operand("second operand"));
    }
  }
}

struct Pending {
  std::string name;
  int line;
  int column;
};

}  // namespace

KernelDef parse_kernel(std::string_view text) {
  KernelDef k;
  bool saw_kernel = false;
  std::optional<Pending> pending_label;
  std::vector<int> inst_line;
  std::vector<Pending> target_refs;  // one per branch/jump, matched in order

  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    const auto line = text.substr(start, nl == std::string_view::npos ? text.size() - start
                                                                        : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    LineParser p(line_no, tokenize(line));
    if (p.done()) continue;

    std::optional<Pending> label;
    if (p.peek().text.back() == ':') {
      const auto& t = p.peek();
      const auto name = t.text.substr(0, t.text.size() - 1);
      if (!is_identifier(name)) p.fail(t, "bad label '" + std::string(name) + "'");
      label = Pending{std::string(name), line_no, t.column};
      p.skip();
      if (p.done()) {
        if (pending_label) p.fail(t, "two labels on one instruction");
        pending_label = label;
        continue;
      }
    }

    const Token head = p.peek();
    p.skip();
    const auto word = head.text;
    if (!label && !pending_label && std::islower(static_cast<unsigned char>(word[0]))) {
      if (word == "kernel") {
        const auto& t = p.next("kernel name");
        if (!is_identifier(t.text)) p.fail(t, "bad kernel name");
        k.name = std::string(t.text);
        saw_kernel = true;
      } else if (word == "grid") {
        k.grid = parse_dim3(p);
      } else if (word == "block") {
        k.block = parse_dim3(p);
      } else if (word == "regs") {
        const auto& t = p.next("register count");
        const Word n = p.parse_int(t, "register count");
        if (n < 0 || n > (Word{1} << 20)) p.fail(t, "register count out of range");
        k.register_count = static_cast<std::uint32_t>(n);
      } else if (word == "shared") {
        const auto& t = p.next("shared size");
        const Word n = p.parse_int(t, "shared size");
        if (n < 0) p.fail(t, "shared size must be >= 0");
        k.shared_words = n;
      } else if (word == "param") {
        const auto& t = p.next("param name");
        if (!is_identifier(t.text)) p.fail(t, "bad param name '" + std::string(t.text) + "'");
        k.params.emplace_back(t.text);
      } else if (word == "flag") {
        const auto& t = p.next("flag name");
        if (t.text != "inter_block_dependent") p.fail(t, "unknown flag '" + std::string(t.text) + "'");
        k.inter_block_dependent = true;
      } else {
        p.fail(head, "unknown directive '" + std::string(word) + "'");
      }
      p.expect_end();
      continue;
    }

    const auto& ops = opcode_table();
    const auto it = ops.find(word);
    if (it == ops.end()) p.fail(head, "unknown opcode '" + std::string(word) + "'");
    Instruction inst = parse_instruction(p, it->second);
    p.expect_end();
    if (label && pending_label) p.fail(head, "two labels on one instruction");
    if (pending_label) {
      label = pending_label;
      pending_label.reset();
    }
    if (label) {
      for (std::size_t i = 0; i < k.body.size(); ++i) {
        if (k.body[i].label == label->name) {
          throw ParseError(label->line, label->column, "duplicate label '" + label->name + "'");
        }
      }
      inst.label = label->name;
    }
    if (inst.op == Opcode::Branch || inst.op == Opcode::Jump) {
      // column of the target token is the last token on the line
      const auto toks = tokenize(line);
      target_refs.push_back({inst.target, line_no, toks.back().column});
    }
    k.body.push_back(std::move(inst));
    inst_line.push_back(line_no);
  }

  if (pending_label) {
    throw ParseError(pending_label->line, pending_label->column,
                     "label '" + pending_label->name + "' does not precede an instruction");
  }
  if (!saw_kernel) throw ParseError(1, 1, "missing 'kernel <name>' header");

  std::unordered_map<std::string, std::size_t> labels;
  for (std::size_t i = 0; i < k.body.size(); ++i) {
    if (!k.body[i].label.empty()) labels.emplace(k.body[i].label, i);
  }
  for (const auto& ref : target_refs) {
    if (!labels.contains(ref.name)) {
      throw ParseError(ref.line, ref.column, "unresolved label '" + ref.name + "'");
    }
  }

  try {
    validate(k);
  } catch (const ValidationError& e) {
    throw ParseError(inst_line.empty() ? line_no : inst_line.back(), 1, e.what());
  }
  return k;
}

namespace {

void emit_operand(std::ostringstream& os, const Operand& o) {
  if (const auto* r = std::get_if<Reg>(&o)) {
    os << 'r' << r->index;
  } else if (const auto* i = std::get_if<Imm>(&o)) {
    os << i->value;
  } else {
    os << '%' << std::get<ParamRef>(o).name;
  }
}

}  // namespace

std::string emit_kernel(const KernelDef& k) {
  std::ostringstream os;
  os << "kernel " << k.name << '\n';
  os << "grid " << k.grid.x << ' ' << k.grid.y << ' ' << k.grid.z << '\n';
  os << "block " << k.block.x << ' ' << k.block.y << ' ' << k.block.z << '\n';
  os << "regs " << k.register_count << '\n';
  os << "shared " << k.shared_words << '\n';
  for (const auto& p : k.params) os << "param " << p << '\n';
  if (k.inter_block_dependent) os << "flag inter_block_dependent\n";

  for (const auto& inst : k.body) {
    if (!inst.label.empty()) os << inst.label << ": ";
    os << opcode_name(inst.op);
    switch (inst.op) {
      case Opcode::BarSync:
      case Opcode::Ret:
        break;
      case Opcode::Jump:
        os << ' ' << inst.target;
        break;
      case Opcode::Branch:
        os << ' ';
        emit_operand(os, inst.a);
        os << ' ' << inst.target;
        break;
      case Opcode::ReadSpecial:
        os << " r" << inst.dst.index << ' ' << to_string(inst.special);
        break;
      case Opcode::Const:
      case Opcode::Mov:
      case Opcode::LoadGlobal:
      case Opcode::LoadShared:
        os << " r" << inst.dst.index << ' ';
        emit_operand(os, inst.a);
        break;
      case Opcode::StoreGlobal:
      case Opcode::StoreShared:
        os << ' ';
        emit_operand(os, inst.a);
        os << ' ';
        emit_operand(os, inst.b);
        break;
      default:
        os << " r" << inst.dst.index << ' ';
        emit_operand(os, inst.a);
        os << ' ';
        emit_operand(os, inst.b);
        break;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace tally::ir
