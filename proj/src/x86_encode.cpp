#include <cassert>
#include <cstdio>
#include <stdexcept>

#include "erimforge/x86.hpp"
#include "x86_internal.hpp"

namespace erim::x86 {

using detail::kRexB;
using detail::kRexR;
using detail::kRexW;
using detail::kRexX;

const char* mn_name(Mn m) {
  switch (m) {
    case Mn::Nop: return "nop";
    case Mn::Int3: return "int3";
    case Mn::Ret: return "ret";
    case Mn::Syscall: return "syscall";
    case Mn::Wrpkru: return "wrpkru";
    case Mn::Xrstor: return "xrstor";
    case Mn::Mov: return "mov";
    case Mn::Add: return "add";
    case Mn::Sub: return "sub";
    case Mn::Xor: return "xor";
    case Mn::Cmp: return "cmp";
    case Mn::Bt: return "bt";
    case Mn::Push: return "push";
    case Mn::Pop: return "pop";
    case Mn::Jmp: return "jmp";
    case Mn::Je: return "je";
    case Mn::Jne: return "jne";
    case Mn::Jnc: return "jnc";
    case Mn::Call: return "call";
  }
  return "?";
}

std::vector<std::uint8_t> encode(const Instr& in) {
  std::vector<std::uint8_t> out;
  out.reserve(in.length ? in.length : 8);
  if (in.rex) out.push_back(in.rex);
  for (int i = 0; i < in.opcode_len; ++i) out.push_back(in.opcode[i]);
  if (in.has_modrm) out.push_back(in.modrm);
  if (in.has_sib) out.push_back(in.sib);
  for (int i = 0; i < in.disp_bytes; ++i)
    out.push_back(static_cast<std::uint8_t>(
        static_cast<std::uint32_t>(in.disp) >> (8 * i)));
  for (int i = 0; i < in.imm_bytes; ++i)
    out.push_back(static_cast<std::uint8_t>(
        static_cast<std::uint64_t>(in.imm) >> (8 * i)));
  assert(!in.length || in.length == out.size());
  return out;
}

bool is_rel_branch(const Instr& in) {
  switch (in.mn) {
    case Mn::Jmp:
    case Mn::Je:
    case Mn::Jne:
    case Mn::Jnc:
    case Mn::Call:
      return !in.has_modrm && in.disp_bytes > 0;
    default:
      return false;
  }
}

bool is_cond_branch(const Instr& in) {
  return in.mn == Mn::Je || in.mn == Mn::Jne || in.mn == Mn::Jnc;
}

std::uint64_t rel_target(const Instr& in, std::uint64_t pos) {
  return pos + in.length + static_cast<std::int64_t>(in.disp);
}

std::uint32_t regs_referenced(const Instr& in) {
  std::uint32_t mask = 0;
  auto add_reg = [&mask](Reg r) { mask |= 1u << reg_id(r); };
  auto add_op = [&](const Operand& o) {
    if (o.k == Operand::K::Reg) add_reg(o.reg);
    if (o.k == Operand::K::Mem) {
      if (o.mem.base) add_reg(*o.mem.base);
      if (o.mem.index) add_reg(*o.mem.index);
    }
  };
  add_op(in.dst);
  add_op(in.src);
  switch (in.mn) {
    case Mn::Push:
    case Mn::Pop:
    case Mn::Call:
    case Mn::Ret:
      add_reg(Reg::rsp);
      break;
    case Mn::Syscall:
      add_reg(Reg::rax);
      add_reg(Reg::rdi);
      add_reg(Reg::rsi);
      add_reg(Reg::rdx);
      add_reg(Reg::r10);
      break;
    case Mn::Wrpkru:
      add_reg(Reg::rax);
      add_reg(Reg::rcx);
      add_reg(Reg::rdx);
      break;
    case Mn::Xrstor:
      add_reg(Reg::rax);
      add_reg(Reg::rdx);
      break;
    default:
      break;
  }
  return mask;
}

namespace {

const char* reg_name(Reg r, Width w, bool high8) {
  static const char* r64[] = {"rax", "rcx", "rdx", "rbx", "rsp", "rbp",
                              "rsi", "rdi", "r8",  "r9",  "r10", "r11",
                              "r12", "r13", "r14", "r15"};
  static const char* r32[] = {"eax", "ecx", "edx",  "ebx",  "esp",  "ebp",
                              "esi", "edi", "r8d",  "r9d",  "r10d", "r11d",
                              "r12d", "r13d", "r14d", "r15d"};
  static const char* r8lo[] = {"al", "cl", "dl", "bl"};
  static const char* r8hi[] = {"ah", "ch", "dh", "bh"};
  const int i = reg_id(r);
  if (w == Width::B8) return high8 ? r8hi[i & 3] : r8lo[i & 3];
  if (w == Width::B32) return r32[i];
  return r64[i];
}

void format_operand(std::string& s, const Operand& o, Width w) {
  char buf[32];
  switch (o.k) {
    case Operand::K::None:
      break;
    case Operand::K::Reg:
      s += reg_name(o.reg, w, o.high8);
      break;
    case Operand::K::Imm:
      snprintf(buf, sizeof buf, "0x%llx",
               static_cast<unsigned long long>(o.imm));
      s += buf;
      break;
    case Operand::K::Mem: {
      s += '[';
      bool first = true;
      if (o.mem.rip_rel) {
        s += "rip";
        first = false;
      }
      if (o.mem.base) {
        s += reg_name(*o.mem.base, Width::B64, false);
        first = false;
      }
      if (o.mem.index) {
        if (!first) s += '+';
        s += reg_name(*o.mem.index, Width::B64, false);
        snprintf(buf, sizeof buf, "*%d", o.mem.scale);
        s += buf;
        first = false;
      }
      if (o.mem.disp || first) {
        snprintf(buf, sizeof buf, "%s0x%x", o.mem.disp < 0 ? "-" : first ? "" : "+",
                 o.mem.disp < 0 ? -static_cast<unsigned>(o.mem.disp)
                                : static_cast<unsigned>(o.mem.disp));
        s += buf;
      }
      s += ']';
      break;
    }
  }
}

}  // namespace

std::string to_string(const Instr& in) {
  std::string s = mn_name(in.mn);
  if (is_rel_branch(in)) {
    char buf[32];
    snprintf(buf, sizeof buf, " %s0x%x", in.disp < 0 ? "-" : "+",
             in.disp < 0 ? -static_cast<unsigned>(in.disp)
                         : static_cast<unsigned>(in.disp));
    s += buf;
    return s;
  }
  if (in.dst.k != Operand::K::None) {
    s += ' ';
    format_operand(s, in.dst, in.width);
  }
  if (in.src.k != Operand::K::None) {
    s += ", ";
    format_operand(s, in.src, in.width);
  }
  return s;
}

namespace build {

namespace {

Instr base(Mn mn, Width w) {
  Instr in;
  in.mn = mn;
  in.width = w;
  return in;
}

void op1(Instr& in, std::uint8_t o) {
  in.opcode[0] = o;
  in.opcode_len = 1;
}

void op2(Instr& in, std::uint8_t a, std::uint8_t b) {
  in.opcode[0] = a;
  in.opcode[1] = b;
  in.opcode_len = 2;
}

void set_rex_w(Instr& in, Width w) {
  if (w == Width::B64) in.rex |= 0x40 | kRexW;
}

// Encodes reg-field plus a register or memory r/m operand into
// modrm/sib/disp and the REX extension bits.
void encode_modrm(Instr& in, int regfield, const Operand& rm) {
  if (regfield >= 8) in.rex |= 0x40 | kRexR;
  in.has_modrm = true;
  const int regbits = (regfield & 7) << 3;

  if (rm.k == Operand::K::Reg) {
    const int id = reg_id(rm.reg);
    if (id >= 8) in.rex |= 0x40 | kRexB;
    in.modrm = std::uint8_t(0xc0 | regbits | (id & 7));
    return;
  }

  assert(rm.k == Operand::K::Mem);
  const MemRef& m = rm.mem;
  if (m.rip_rel) {
    assert(!m.base && !m.index);
    in.modrm = std::uint8_t(regbits | 0x05);
    in.disp_bytes = 4;
    in.disp = m.disp;
    return;
  }
  if (m.index && *m.index == Reg::rsp)
    throw std::invalid_argument("rsp cannot be an index register");
  if (m.scale != 1 && m.scale != 2 && m.scale != 4 && m.scale != 8)
    throw std::invalid_argument("scale must be 1/2/4/8");

  const bool base_low_rsp = m.base && (reg_id(*m.base) & 7) == 4;
  const bool need_sib = m.index.has_value() || !m.base || base_low_rsp;

  // Displacement size: honor a requested size when it is at least the
  // minimum the form needs; rewrite plans rely on forcing disp32.
  const bool base_low_rbp = m.base && (reg_id(*m.base) & 7) == 5;
  std::uint8_t minimum;
  if (!m.base)
    minimum = 4;
  else if (m.disp == 0 && !base_low_rbp)
    minimum = 0;
  else if (m.disp >= -128 && m.disp <= 127)
    minimum = 1;
  else
    minimum = 4;
  std::uint8_t db = std::max(minimum, m.disp_bytes);
  if (db == 2 || db == 3) db = 4;
  if (!m.base) db = 4;  // SIB base=101 with mod 00 always carries disp32

  int mod;
  if (!m.base)
    mod = 0;
  else if (db == 0)
    mod = 0;
  else if (db == 1)
    mod = 1;
  else
    mod = 2;

  if (need_sib) {
    in.has_sib = true;
    int scalebits;
    switch (m.scale) {
      case 1: scalebits = 0; break;
      case 2: scalebits = 1; break;
      case 4: scalebits = 2; break;
      default: scalebits = 3; break;
    }
    int idxbits = 4;
    if (m.index) {
      const int id = reg_id(*m.index);
      if (id >= 8) in.rex |= 0x40 | kRexX;
      idxbits = id & 7;
    }
    int basebits = 5;
    if (m.base) {
      const int id = reg_id(*m.base);
      if (id >= 8) in.rex |= 0x40 | kRexB;
      basebits = id & 7;
    }
    in.modrm = std::uint8_t((mod << 6) | regbits | 0x04);
    in.sib = std::uint8_t((scalebits << 6) | (idxbits << 3) | basebits);
  } else {
    const int id = reg_id(*m.base);
    if (id >= 8) in.rex |= 0x40 | kRexB;
    in.modrm = std::uint8_t((mod << 6) | regbits | (id & 7));
  }
  in.disp_bytes = db;
  in.disp = m.disp;
}

Instr finish(Instr in) {
  detail::layout(in);
  return in;
}

struct AluOps {
  std::uint8_t mr, rm, ai;  // r/m,r ; r,r/m ; acc,imm
  int digit;                // group-1 /digit
};

AluOps alu_ops(Mn op) {
  switch (op) {
    case Mn::Add: return {0x01, 0x03, 0x05, 0};
    case Mn::Sub: return {0x29, 0x2b, 0x2d, 5};
    case Mn::Xor: return {0x31, 0x33, 0x35, 6};
    case Mn::Cmp: return {0x39, 0x3b, 0x3d, 7};
    default: throw std::invalid_argument("not an alu op");
  }
}

}  // namespace

Instr nop() {
  Instr in = base(Mn::Nop, Width::B32);
  op1(in, 0x90);
  return finish(in);
}

Instr int3() {
  Instr in = base(Mn::Int3, Width::B32);
  op1(in, 0xcc);
  return finish(in);
}

Instr ret() {
  Instr in = base(Mn::Ret, Width::B64);
  op1(in, 0xc3);
  return finish(in);
}

Instr syscall_() {
  Instr in = base(Mn::Syscall, Width::B32);
  op2(in, 0x0f, 0x05);
  return finish(in);
}

Instr wrpkru() {
  Instr in = base(Mn::Wrpkru, Width::B32);
  op2(in, 0x0f, 0x01);
  in.has_modrm = true;
  in.modrm = 0xef;
  in = finish(in);
  in.extents.opcode_end = in.extents.modrm_end;
  in.extents.modrm_begin = in.extents.modrm_end;
  return in;
}

Instr xrstor(const MemRef& m) {
  Instr in = base(Mn::Xrstor, Width::B32);
  op2(in, 0x0f, 0xae);
  Operand rm = Operand::m(m);
  encode_modrm(in, 5, rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = rm;
  return finish(in);
}

Instr mov_rr(Reg d, Reg s, Width w) {
  Instr in = base(Mn::Mov, w);
  set_rex_w(in, w);
  op1(in, 0x89);
  in.dst = Operand::r(d);
  in.src = Operand::r(s);
  encode_modrm(in, reg_id(s), in.dst);
  return finish(in);
}

Instr mov_ri(Reg d, std::uint64_t v, Width w) {
  Instr in = base(Mn::Mov, w);
  set_rex_w(in, w);
  const int id = reg_id(d);
  if (id >= 8) in.rex |= 0x40 | kRexB;
  op1(in, std::uint8_t(0xb8 | (id & 7)));
  in.dst = Operand::r(d);
  if (w == Width::B64) {
    in.imm_bytes = 8;
    in.imm = static_cast<std::int64_t>(v);
  } else {
    in.imm_bytes = 4;
    in.imm = static_cast<std::int32_t>(static_cast<std::uint32_t>(v));
  }
  in.src = Operand::i(in.imm);
  return finish(in);
}

Instr mov_ri_s32(Reg d, std::int32_t v) {
  Instr in = base(Mn::Mov, Width::B64);
  set_rex_w(in, Width::B64);
  op1(in, 0xc7);
  in.dst = Operand::r(d);
  encode_modrm(in, 0, in.dst);
  in.imm_bytes = 4;
  in.imm = v;
  in.src = Operand::i(in.imm);
  return finish(in);
}

Instr mov_low8(Reg d, std::uint8_t v) {
  if (reg_id(d) > 3) throw std::invalid_argument("low8 needs rax..rbx");
  Instr in = base(Mn::Mov, Width::B8);
  op1(in, std::uint8_t(0xb0 | reg_id(d)));
  in.dst = Operand::r(d);
  in.imm_bytes = 1;
  in.imm = v;
  in.src = Operand::i(v);
  return finish(in);
}

Instr mov_high8(Reg d, std::uint8_t v) {
  if (reg_id(d) > 3) throw std::invalid_argument("high8 needs rax..rbx");
  Instr in = base(Mn::Mov, Width::B8);
  op1(in, std::uint8_t(0xb4 | reg_id(d)));
  Operand o = Operand::r(d);
  o.high8 = true;
  in.dst = o;
  in.imm_bytes = 1;
  in.imm = v;
  in.src = Operand::i(v);
  return finish(in);
}

Instr mov_rm(Reg d, const MemRef& m, Width w) {
  Instr in = base(Mn::Mov, w);
  set_rex_w(in, w);
  op1(in, 0x8b);
  Operand rm = Operand::m(m);
  encode_modrm(in, reg_id(d), rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = Operand::r(d);
  in.src = rm;
  return finish(in);
}

Instr mov_mr(const MemRef& m, Reg s, Width w) {
  Instr in = base(Mn::Mov, w);
  set_rex_w(in, w);
  op1(in, 0x89);
  Operand rm = Operand::m(m);
  encode_modrm(in, reg_id(s), rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = rm;
  in.src = Operand::r(s);
  return finish(in);
}

Instr mov_mi(const MemRef& m, std::uint32_t v, Width w) {
  Instr in = base(Mn::Mov, w);
  set_rex_w(in, w);
  op1(in, 0xc7);
  Operand rm = Operand::m(m);
  encode_modrm(in, 0, rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = rm;
  in.imm_bytes = 4;
  in.imm = static_cast<std::int32_t>(v);
  in.src = Operand::i(in.imm);
  return finish(in);
}

Instr alu_rr(Mn op, Reg d, Reg s, Width w) {
  Instr in = base(op, w);
  set_rex_w(in, w);
  op1(in, alu_ops(op).mr);
  in.dst = Operand::r(d);
  in.src = Operand::r(s);
  encode_modrm(in, reg_id(s), in.dst);
  return finish(in);
}

Instr alu_ri(Mn op, Reg d, std::uint32_t v, Width w) {
  Instr in = base(op, w);
  set_rex_w(in, w);
  const AluOps ops = alu_ops(op);
  in.dst = Operand::r(d);
  if (d == Reg::rax) {
    op1(in, ops.ai);
  } else {
    op1(in, 0x81);
    encode_modrm(in, ops.digit, in.dst);
  }
  in.imm_bytes = 4;
  in.imm = static_cast<std::int32_t>(v);
  in.src = Operand::i(in.imm);
  return finish(in);
}

Instr alu_rm(Mn op, Reg d, const MemRef& m, Width w) {
  Instr in = base(op, w);
  set_rex_w(in, w);
  op1(in, alu_ops(op).rm);
  Operand rm = Operand::m(m);
  encode_modrm(in, reg_id(d), rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = Operand::r(d);
  in.src = rm;
  return finish(in);
}

Instr alu_mr(Mn op, const MemRef& m, Reg s, Width w) {
  Instr in = base(op, w);
  set_rex_w(in, w);
  op1(in, alu_ops(op).mr);
  Operand rm = Operand::m(m);
  encode_modrm(in, reg_id(s), rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = rm;
  in.src = Operand::r(s);
  return finish(in);
}

Instr alu_mi(Mn op, const MemRef& m, std::uint32_t v, Width w) {
  Instr in = base(op, w);
  set_rex_w(in, w);
  op1(in, 0x81);
  Operand rm = Operand::m(m);
  encode_modrm(in, alu_ops(op).digit, rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = rm;
  in.imm_bytes = 4;
  in.imm = static_cast<std::int32_t>(v);
  in.src = Operand::i(in.imm);
  return finish(in);
}

Instr bt_ri(Reg r, std::uint8_t bit, Width w) {
  Instr in = base(Mn::Bt, w);
  set_rex_w(in, w);
  op2(in, 0x0f, 0xba);
  in.dst = Operand::r(r);
  encode_modrm(in, 4, in.dst);
  in.imm_bytes = 1;
  in.imm = bit;
  in.src = Operand::i(bit);
  return finish(in);
}

Instr bt_mi(const MemRef& m, std::uint8_t bit, Width w) {
  Instr in = base(Mn::Bt, w);
  set_rex_w(in, w);
  op2(in, 0x0f, 0xba);
  Operand rm = Operand::m(m);
  encode_modrm(in, 4, rm);
  rm.mem.disp_bytes = in.disp_bytes;
  in.dst = rm;
  in.imm_bytes = 1;
  in.imm = bit;
  in.src = Operand::i(bit);
  return finish(in);
}

Instr push(Reg r) {
  Instr in = base(Mn::Push, Width::B64);
  const int id = reg_id(r);
  if (id >= 8) in.rex |= 0x40 | kRexB;
  op1(in, std::uint8_t(0x50 | (id & 7)));
  in.dst = Operand::r(r);
  return finish(in);
}

Instr pop(Reg r) {
  Instr in = base(Mn::Pop, Width::B64);
  const int id = reg_id(r);
  if (id >= 8) in.rex |= 0x40 | kRexB;
  op1(in, std::uint8_t(0x58 | (id & 7)));
  in.dst = Operand::r(r);
  return finish(in);
}

namespace {

Instr rel8(Mn mn, std::uint8_t opc, std::int8_t rel) {
  Instr in = base(mn, Width::B64);
  op1(in, opc);
  in.disp_bytes = 1;
  in.disp = rel;
  return finish(in);
}

Instr rel32(Mn mn, std::int32_t rel, std::uint8_t o1, std::int16_t o2 = -1) {
  Instr in = base(mn, Width::B64);
  if (o2 >= 0)
    op2(in, o1, std::uint8_t(o2));
  else
    op1(in, o1);
  in.disp_bytes = 4;
  in.disp = rel;
  return finish(in);
}

}  // namespace

Instr jmp_rel8(std::int8_t rel) { return rel8(Mn::Jmp, 0xeb, rel); }
Instr je_rel8(std::int8_t rel) { return rel8(Mn::Je, 0x74, rel); }
Instr jne_rel8(std::int8_t rel) { return rel8(Mn::Jne, 0x75, rel); }
Instr jnc_rel8(std::int8_t rel) { return rel8(Mn::Jnc, 0x73, rel); }
Instr jmp_rel32(std::int32_t rel) { return rel32(Mn::Jmp, rel, 0xe9); }
Instr je_rel32(std::int32_t rel) { return rel32(Mn::Je, rel, 0x0f, 0x84); }
Instr jne_rel32(std::int32_t rel) { return rel32(Mn::Jne, rel, 0x0f, 0x85); }
Instr jnc_rel32(std::int32_t rel) { return rel32(Mn::Jnc, rel, 0x0f, 0x83); }
Instr call_rel32(std::int32_t rel) { return rel32(Mn::Call, rel, 0xe8); }

namespace {

Instr group5(Mn mn, int digit, const Operand& rm) {
  Instr in = base(mn, Width::B64);
  op1(in, 0xff);
  encode_modrm(in, digit, rm);
  Operand fixed = rm;
  if (fixed.k == Operand::K::Mem) fixed.mem.disp_bytes = in.disp_bytes;
  in.dst = fixed;
  return finish(in);
}

}  // namespace

Instr call_reg(Reg r) { return group5(Mn::Call, 2, Operand::r(r)); }
Instr call_mem(const MemRef& m) { return group5(Mn::Call, 2, Operand::m(m)); }
Instr jmp_reg(Reg r) { return group5(Mn::Jmp, 4, Operand::r(r)); }
Instr jmp_mem(const MemRef& m) { return group5(Mn::Jmp, 4, Operand::m(m)); }

}  // namespace build

}  // namespace erim::x86
