#include <cassert>

#include "erimforge/x86.hpp"
#include "x86_internal.hpp"

namespace erim::x86 {

namespace {

using detail::kRexB;
using detail::kRexR;
using detail::kRexW;
using detail::kRexX;
using detail::layout;

struct Reader {
  std::span<const std::uint8_t> code;
  std::size_t pos;
  bool truncated = false;

  std::uint8_t take() {
    if (pos >= code.size()) {
      truncated = true;
      return 0;
    }
    return code[pos++];
  }
  std::int32_t take32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(take()) << (8 * i);
    return static_cast<std::int32_t>(v);
  }
  std::int64_t take64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(take()) << (8 * i);
    return static_cast<std::int64_t>(v);
  }
};

Reg reg_of(int low3, bool ext) { return static_cast<Reg>(low3 | (ext ? 8 : 0)); }

// Parses ModRM (+SIB +disp) into either a register or memory operand.
// Returns the reg-field value (with REX.R applied) through reg_out.
bool parse_modrm(Reader& rd, Instr& in, Operand& rm_out, int& reg_out) {
  const std::uint8_t modrm = rd.take();
  in.has_modrm = true;
  in.modrm = modrm;
  const int mod = modrm >> 6;
  const int reg = (modrm >> 3) & 7;
  const int rm = modrm & 7;
  reg_out = reg | ((in.rex & kRexR) ? 8 : 0);

  if (mod == 3) {
    rm_out = Operand::r(reg_of(rm, in.rex & kRexB));
    return true;
  }

  MemRef m;
  if (rm == 4) {
    const std::uint8_t sib = rd.take();
    in.has_sib = true;
    in.sib = sib;
    m.scale = std::uint8_t(1u << (sib >> 6));
    const int idx = ((sib >> 3) & 7) | ((in.rex & kRexX) ? 8 : 0);
    if (idx != 4) m.index = static_cast<Reg>(idx);  // 100 without REX.X: none
    const int base = sib & 7;
    if (base == 5 && mod == 0) {
      m.disp_bytes = 4;  // no base, disp32
    } else {
      m.base = reg_of(base, in.rex & kRexB);
    }
  } else if (rm == 5 && mod == 0) {
    m.rip_rel = true;
    m.disp_bytes = 4;
  } else {
    m.base = reg_of(rm, in.rex & kRexB);
  }
  if (mod == 1)
    m.disp_bytes = 1;
  else if (mod == 2)
    m.disp_bytes = 4;

  if (m.disp_bytes == 1)
    m.disp = static_cast<std::int8_t>(rd.take());
  else if (m.disp_bytes == 4)
    m.disp = rd.take32();
  in.disp_bytes = m.disp_bytes;
  in.disp = m.disp;
  rm_out = Operand::m(m);
  return true;
}

DecodeResult fail(Reader& rd) {
  DecodeResult r;
  r.status = rd.truncated ? DecodeStatus::Truncated : DecodeStatus::NotInSubset;
  return r;
}

DecodeResult not_in_subset() {
  DecodeResult r;
  r.status = DecodeStatus::NotInSubset;
  return r;
}

DecodeResult finish(Reader& rd, Instr in) {
  if (rd.truncated) {
    DecodeResult r;
    r.status = DecodeStatus::Truncated;
    return r;
  }
  layout(in);
  assert(in.length == rd.pos);
  DecodeResult r;
  r.status = DecodeStatus::Ok;
  r.instr = in;
  return r;
}

}  // namespace

DecodeResult decode(std::span<const std::uint8_t> code, std::size_t at) {
  Reader rd{code.subspan(std::min(at, code.size())), 0};
  Instr in;

  std::uint8_t b = rd.take();
  if (rd.truncated) return fail(rd);
  if ((b & 0xf0) == 0x40) {
    in.rex = b;
    b = rd.take();
    if (rd.truncated) return fail(rd);
  }
  const bool w = in.rex & kRexW;
  const Width ww = w ? Width::B64 : Width::B32;

  auto op1 = [&](std::uint8_t o) {
    in.opcode[0] = o;
    in.opcode_len = 1;
  };
  auto op2 = [&](std::uint8_t a, std::uint8_t o) {
    in.opcode[0] = a;
    in.opcode[1] = o;
    in.opcode_len = 2;
  };

  // Single-byte, no-operand forms reject a REX prefix: the subset has no use
  // for it there and rewriting must not bless bytes it cannot reproduce.
  switch (b) {
    case 0x90:
      if (in.rex) return not_in_subset();
      in.mn = Mn::Nop;
      op1(b);
      return finish(rd, in);
    case 0xcc:
      if (in.rex) return not_in_subset();
      in.mn = Mn::Int3;
      op1(b);
      return finish(rd, in);
    case 0xc3:
      if (in.rex) return not_in_subset();
      in.mn = Mn::Ret;
      in.width = Width::B64;
      op1(b);
      return finish(rd, in);
    default:
      break;
  }

  // ALU /r and accumulator-immediate families.
  {
    Mn mn{};
    bool alu = true;
    switch (b & 0xf8) {
      case 0x00: mn = Mn::Add; break;
      case 0x28: mn = Mn::Sub; break;
      case 0x30: mn = Mn::Xor; break;
      case 0x38: mn = Mn::Cmp; break;
      default: alu = false; break;
    }
    if (alu) {
      const int low = b & 7;
      in.mn = mn;
      in.width = ww;
      op1(b);
      Operand rm;
      int reg;
      switch (low) {
        case 0x1:  // op r/m, r
          parse_modrm(rd, in, rm, reg);
          in.dst = rm;
          in.src = Operand::r(static_cast<Reg>(reg));
          return finish(rd, in);
        case 0x3:  // op r, r/m
          parse_modrm(rd, in, rm, reg);
          in.dst = Operand::r(static_cast<Reg>(reg));
          in.src = rm;
          return finish(rd, in);
        case 0x5:  // op eax/rax, imm32
          in.dst = Operand::r(Reg::rax);
          in.imm_bytes = 4;
          in.imm = rd.take32();
          in.src = Operand::i(in.imm);
          return finish(rd, in);
        default:
          return not_in_subset();  // 8-bit ALU forms are out
      }
    }
  }

  switch (b) {
    case 0x81:
    case 0x83: {
      Operand rm;
      int digit;
      op1(b);
      parse_modrm(rd, in, rm, digit);
      switch (digit & 7) {
        case 0: in.mn = Mn::Add; break;
        case 5: in.mn = Mn::Sub; break;
        case 6: in.mn = Mn::Xor; break;
        case 7: in.mn = Mn::Cmp; break;
        default: return fail(rd);
      }
      in.width = ww;
      in.dst = rm;
      if (b == 0x81) {
        in.imm_bytes = 4;
        in.imm = rd.take32();
      } else {
        in.imm_bytes = 1;
        in.imm = static_cast<std::int8_t>(rd.take());
      }
      in.src = Operand::i(in.imm);
      return finish(rd, in);
    }

    case 0x89:
    case 0x8b: {
      Operand rm;
      int reg;
      op1(b);
      parse_modrm(rd, in, rm, reg);
      in.mn = Mn::Mov;
      in.width = ww;
      if (b == 0x89) {
        in.dst = rm;
        in.src = Operand::r(static_cast<Reg>(reg));
      } else {
        in.dst = Operand::r(static_cast<Reg>(reg));
        in.src = rm;
      }
      return finish(rd, in);
    }

    case 0xc7: {
      Operand rm;
      int digit;
      op1(b);
      parse_modrm(rd, in, rm, digit);
      if ((digit & 7) != 0) return fail(rd);
      in.mn = Mn::Mov;
      in.width = ww;
      in.dst = rm;
      in.imm_bytes = 4;
      in.imm = rd.take32();
      in.src = Operand::i(in.imm);
      return finish(rd, in);
    }

    case 0xe8:
    case 0xe9:
      if (in.rex) return not_in_subset();
      in.mn = b == 0xe8 ? Mn::Call : Mn::Jmp;
      in.width = Width::B64;
      op1(b);
      in.disp_bytes = 4;
      in.disp = rd.take32();
      return finish(rd, in);

    case 0xeb:
    case 0x74:
    case 0x75:
    case 0x73: {
      if (in.rex) return not_in_subset();
      switch (b) {
        case 0xeb: in.mn = Mn::Jmp; break;
        case 0x74: in.mn = Mn::Je; break;
        case 0x75: in.mn = Mn::Jne; break;
        case 0x73: in.mn = Mn::Jnc; break;
      }
      in.width = Width::B64;
      op1(b);
      in.disp_bytes = 1;
      in.disp = static_cast<std::int8_t>(rd.take());
      return finish(rd, in);
    }

    case 0xff: {
      Operand rm;
      int digit;
      op1(b);
      parse_modrm(rd, in, rm, digit);
      const int d = digit & 7;
      if (d == 2)
        in.mn = Mn::Call;
      else if (d == 4)
        in.mn = Mn::Jmp;
      else
        return fail(rd);
      in.width = Width::B64;
      in.dst = rm;
      return finish(rd, in);
    }

    default:
      break;
  }

  if (b >= 0x50 && b <= 0x57) {
    if (in.rex & (kRexW | kRexR | kRexX)) return not_in_subset();
    in.mn = Mn::Push;
    in.width = Width::B64;
    op1(b);
    in.dst = Operand::r(reg_of(b - 0x50, in.rex & kRexB));
    return finish(rd, in);
  }
  if (b >= 0x58 && b <= 0x5f) {
    if (in.rex & (kRexW | kRexR | kRexX)) return not_in_subset();
    in.mn = Mn::Pop;
    in.width = Width::B64;
    op1(b);
    in.dst = Operand::r(reg_of(b - 0x58, in.rex & kRexB));
    return finish(rd, in);
  }
  if (b >= 0xb0 && b <= 0xb7) {
    if (in.rex) return not_in_subset();  // spl/r8b etc. are out
    in.mn = Mn::Mov;
    in.width = Width::B8;
    op1(b);
    const int r = b - 0xb0;
    Operand d = Operand::r(static_cast<Reg>(r & 3));
    d.high8 = r >= 4;
    in.dst = d;
    in.imm_bytes = 1;
    in.imm = rd.take();  // zero-extended byte value
    in.src = Operand::i(in.imm);
    return finish(rd, in);
  }
  if (b >= 0xb8 && b <= 0xbf) {
    if (in.rex & (kRexR | kRexX)) return not_in_subset();
    in.mn = Mn::Mov;
    in.width = ww;
    op1(b);
    in.dst = Operand::r(reg_of(b - 0xb8, in.rex & kRexB));
    if (w) {
      in.imm_bytes = 8;
      in.imm = rd.take64();
    } else {
      in.imm_bytes = 4;
      in.imm = rd.take32();
    }
    in.src = Operand::i(in.imm);
    return finish(rd, in);
  }

  if (b != 0x0f) return fail(rd);

  const std::uint8_t b2 = rd.take();
  if (rd.truncated) return fail(rd);
  switch (b2) {
    case 0x05:
      if (in.rex) return not_in_subset();
      in.mn = Mn::Syscall;
      op2(b, b2);
      return finish(rd, in);

    case 0x01: {
      if (in.rex) return not_in_subset();
      const std::uint8_t b3 = rd.take();
      if (rd.truncated) return fail(rd);
      if (b3 != 0xef) return not_in_subset();
      in.mn = Mn::Wrpkru;
      // The whole 3-byte encoding reads as one opcode.
      in.opcode[0] = b;
      in.opcode[1] = b2;
      in.opcode_len = 2;
      in.has_modrm = true;
      in.modrm = b3;
      Instr out = in;
      layout(out);
      // Collapse the ModRM byte into the opcode extent: 0f 01 ef acts as a
      // single opcode and the overlap classifier treats it that way.
      out.extents.opcode_end = out.extents.modrm_end;
      out.extents.modrm_begin = out.extents.modrm_end;
      assert(out.length == rd.pos);
      DecodeResult r;
      r.status = DecodeStatus::Ok;
      r.instr = out;
      return r;
    }

    case 0xae: {
      Operand rm;
      int digit;
      op2(b, b2);
      parse_modrm(rd, in, rm, digit);
      if ((digit & 7) != 5 || rm.k != Operand::K::Mem) return fail(rd);
      in.mn = Mn::Xrstor;
      in.width = Width::B32;
      in.dst = rm;
      return finish(rd, in);
    }

    case 0xa3: {
      Operand rm;
      int reg;
      op2(b, b2);
      parse_modrm(rd, in, rm, reg);
      in.mn = Mn::Bt;
      in.width = ww;
      in.dst = rm;
      in.src = Operand::r(static_cast<Reg>(reg));
      return finish(rd, in);
    }

    case 0xba: {
      Operand rm;
      int digit;
      op2(b, b2);
      parse_modrm(rd, in, rm, digit);
      if ((digit & 7) != 4) return fail(rd);
      in.mn = Mn::Bt;
      in.width = ww;
      in.dst = rm;
      in.imm_bytes = 1;
      in.imm = rd.take();
      in.src = Operand::i(in.imm);
      return finish(rd, in);
    }

    case 0x84:
    case 0x85:
    case 0x83: {
      if (in.rex) return not_in_subset();
      switch (b2) {
        case 0x84: in.mn = Mn::Je; break;
        case 0x85: in.mn = Mn::Jne; break;
        case 0x83: in.mn = Mn::Jnc; break;
      }
      in.width = Width::B64;
      op2(b, b2);
      in.disp_bytes = 4;
      in.disp = rd.take32();
      return finish(rd, in);
    }

    default:
      return not_in_subset();
  }
}

}  // namespace erim::x86
