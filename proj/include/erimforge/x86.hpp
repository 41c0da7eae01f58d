#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace erim::x86 {

enum class Reg : std::uint8_t {
  rax = 0, rcx, rdx, rbx, rsp, rbp, rsi, rdi,
  r8, r9, r10, r11, r12, r13, r14, r15,
};

inline constexpr int reg_id(Reg r) { return static_cast<int>(r); }

enum class Mn : std::uint8_t {
  Nop, Int3, Ret, Syscall, Wrpkru, Xrstor,
  Mov, Add, Sub, Xor, Cmp, Bt,
  Push, Pop,
  Jmp, Je, Jne, Jnc, Call,
};

const char* mn_name(Mn m);

enum class Width : std::uint8_t { B8 = 1, B32 = 4, B64 = 8 };

struct MemRef {
  bool rip_rel = false;
  std::optional<Reg> base;
  std::optional<Reg> index;   // never rsp
  std::uint8_t scale = 1;     // 1, 2, 4, 8
  std::int32_t disp = 0;
  std::uint8_t disp_bytes = 0;  // encoded displacement size: 0, 1 or 4

  bool operator==(const MemRef&) const = default;
};

struct Operand {
  enum class K : std::uint8_t { None, Reg, Imm, Mem } k = K::None;
  Reg reg{};
  bool high8 = false;  // ah/ch/dh/bh; only with 8-bit width and reg rax..rbx
  std::int64_t imm = 0;
  MemRef mem{};

  static Operand none() { return {}; }
  static Operand r(Reg reg) {
    Operand o;
    o.k = K::Reg;
    o.reg = reg;
    return o;
  }
  static Operand i(std::int64_t v) {
    Operand o;
    o.k = K::Imm;
    o.imm = v;
    return o;
  }
  static Operand m(MemRef m) {
    Operand o;
    o.k = K::Mem;
    o.mem = m;
    return o;
  }
  bool operator==(const Operand&) const = default;
};

// Half-open byte ranges relative to the instruction start; begin == end means
// the field is absent. A REX prefix counts into the opcode range. The ranges
// are disjoint, contiguous and cover [0, length).
struct FieldExtents {
  std::uint8_t opcode_begin = 0, opcode_end = 0;
  std::uint8_t modrm_begin = 0, modrm_end = 0;
  std::uint8_t sib_begin = 0, sib_end = 0;
  std::uint8_t disp_begin = 0, disp_end = 0;
  std::uint8_t imm_begin = 0, imm_end = 0;

  bool operator==(const FieldExtents&) const = default;
};

struct Instr {
  Mn mn{};
  Width width = Width::B32;  // operand width; B64 for push/pop/call/ret
  Operand dst, src;

  // Encoding determinants. encode() serializes exactly these, so
  // encode(decode(bytes)) reproduces the input bit for bit.
  std::uint8_t rex = 0;  // 0 => absent
  std::array<std::uint8_t, 2> opcode{};
  std::uint8_t opcode_len = 0;
  bool has_modrm = false;
  std::uint8_t modrm = 0;
  bool has_sib = false;
  std::uint8_t sib = 0;
  std::uint8_t disp_bytes = 0;  // memory disp or branch rel, 0/1/4
  std::int32_t disp = 0;
  std::uint8_t imm_bytes = 0;  // 0/1/4/8
  std::int64_t imm = 0;        // sign-extended as decoded
  std::uint8_t length = 0;
  FieldExtents extents{};
};

enum class DecodeStatus : std::uint8_t { Ok, NotInSubset, Truncated };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::NotInSubset;
  Instr instr{};
};

// Decodes one instruction at code[at...]. Truncated means the buffer ended
// inside an instruction that could still be completed by more bytes;
// NotInSubset is everything the subset does not model.
DecodeResult decode(std::span<const std::uint8_t> code, std::size_t at = 0);

std::vector<std::uint8_t> encode(const Instr& in);

// True for jmp/je/jne/jnc/call with a rel8/rel32 displacement.
bool is_rel_branch(const Instr& in);
bool is_cond_branch(const Instr& in);

// Branch target for a rel branch placed at offset pos.
std::uint64_t rel_target(const Instr& in, std::uint64_t pos);

// Bitmask of registers the instruction references, including implicit ones
// (stack pointer for push/pop/call/ret, rax family for short-form ALU,
// eax/ecx/edx for wrpkru, eax for xrstor, syscall's argument registers).
std::uint32_t regs_referenced(const Instr& in);

std::string to_string(const Instr& in);

// Canonical constructors. All produce encodings that decode() accepts.
namespace build {

Instr nop();
Instr int3();
Instr ret();
Instr syscall_();
Instr wrpkru();
Instr xrstor(const MemRef& m);

Instr mov_rr(Reg d, Reg s, Width w);
Instr mov_ri(Reg d, std::uint64_t v, Width w);  // b8+r; imm64 when w is B64
Instr mov_ri_s32(Reg d, std::int32_t v);        // c7 /0, sign-extended to 64
Instr mov_low8(Reg d, std::uint8_t v);   // al/cl/dl/bl; d in rax..rbx
Instr mov_high8(Reg d, std::uint8_t v);  // ah/ch/dh/bh; d in rax..rbx
Instr mov_rm(Reg d, const MemRef& m, Width w);
Instr mov_mr(const MemRef& m, Reg s, Width w);
Instr mov_mi(const MemRef& m, std::uint32_t v, Width w);

Instr alu_rr(Mn op, Reg d, Reg s, Width w);            // add/sub/xor/cmp
Instr alu_ri(Mn op, Reg d, std::uint32_t v, Width w);  // short form for rax
Instr alu_rm(Mn op, Reg d, const MemRef& m, Width w);
Instr alu_mr(Mn op, const MemRef& m, Reg s, Width w);
Instr alu_mi(Mn op, const MemRef& m, std::uint32_t v, Width w);

Instr bt_ri(Reg r, std::uint8_t bit, Width w = Width::B32);
Instr bt_mi(const MemRef& m, std::uint8_t bit, Width w = Width::B32);

Instr push(Reg r);
Instr pop(Reg r);

Instr jmp_rel8(std::int8_t rel);
Instr jmp_rel32(std::int32_t rel);
Instr je_rel8(std::int8_t rel);
Instr je_rel32(std::int32_t rel);
Instr jne_rel8(std::int8_t rel);
Instr jne_rel32(std::int32_t rel);
Instr jnc_rel8(std::int8_t rel);
Instr jnc_rel32(std::int32_t rel);
Instr call_rel32(std::int32_t rel);
Instr call_reg(Reg r);
Instr call_mem(const MemRef& m);
Instr jmp_reg(Reg r);
Instr jmp_mem(const MemRef& m);

}  // namespace build

}  // namespace erim::x86
