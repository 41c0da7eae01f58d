#include <doctest.h>

#include <vector>

#include "erimforge/bytescan.hpp"
#include "erimforge/x86.hpp"

using namespace erim;
using namespace erim::x86;

namespace {

DecodeResult dec(std::vector<std::uint8_t> bytes, std::size_t at = 0) {
  return decode(std::span<const std::uint8_t>(bytes), at);
}

void check_roundtrip(const Instr& built) {
  const auto bytes = encode(built);
  const auto again = decode(std::span<const std::uint8_t>(bytes));
  REQUIRE(again.status == DecodeStatus::Ok);
  CHECK(encode(again.instr) == bytes);
  CHECK(again.instr.length == bytes.size());
  CHECK(again.instr.mn == built.mn);
}

void check_extents(const Instr& in) {
  const FieldExtents& e = in.extents;
  // Disjoint, contiguous, covering [0, length).
  CHECK(e.opcode_begin == 0);
  CHECK(e.opcode_end >= e.opcode_begin);
  CHECK(e.modrm_begin == e.opcode_end);
  CHECK(e.sib_begin == e.modrm_end);
  CHECK(e.disp_begin == e.sib_end);
  CHECK(e.imm_begin == e.disp_end);
  CHECK(e.imm_end == in.length);
}

}  // namespace

TEST_CASE("wrpkru decodes as a 3-byte opcode") {
  auto r = dec({0x0f, 0x01, 0xef});
  REQUIRE(r.status == DecodeStatus::Ok);
  CHECK(r.instr.mn == Mn::Wrpkru);
  CHECK(r.instr.length == 3);
  CHECK(r.instr.extents.opcode_begin == 0);
  CHECK(r.instr.extents.opcode_end == 3);
  CHECK(encode(r.instr) == std::vector<std::uint8_t>{0x0f, 0x01, 0xef});
}

TEST_CASE("nop decodes to one byte") {
  auto r = dec({0x90});
  REQUIRE(r.status == DecodeStatus::Ok);
  CHECK(r.instr.mn == Mn::Nop);
  CHECK(r.instr.length == 1);
  CHECK(encode(build::nop()) == std::vector<std::uint8_t>{0x90});
}

TEST_CASE("short-form add eax with pattern-carrying immediate") {
  auto r = dec({0x05, 0x0f, 0x01, 0xef, 0x00});
  REQUIRE(r.status == DecodeStatus::Ok);
  CHECK(r.instr.mn == Mn::Add);
  CHECK(r.instr.dst.reg == Reg::rax);
  CHECK(r.instr.imm == 0x00ef010f);
  CHECK(r.instr.extents.imm_begin == 1);
  CHECK(r.instr.extents.imm_end == 5);
}

TEST_CASE("add ebx imm32 picks the group-1 form and stays pattern-free") {
  auto in = build::alu_ri(Mn::Add, Reg::rbx, 0x01000000, Width::B32);
  const auto bytes = encode(in);
  CHECK(bytes == std::vector<std::uint8_t>{0x81, 0xc3, 0x00, 0x00, 0x00, 0x01});
  CHECK(scan(std::span<const std::uint8_t>(bytes)).empty());
}

TEST_CASE("xrstor memory forms decode and reencode") {
  auto r = dec({0x0f, 0xae, 0x28});
  REQUIRE(r.status == DecodeStatus::Ok);
  CHECK(r.instr.mn == Mn::Xrstor);
  CHECK(r.instr.dst.k == Operand::K::Mem);
  CHECK(r.instr.dst.mem.base == Reg::rax);

  // mod 11 with reg field 5 is not an XRSTOR memory form.
  CHECK(dec({0x0f, 0xae, 0xe8}).status == DecodeStatus::NotInSubset);

  // REX.B extension.
  auto rx = dec({0x41, 0x0f, 0xae, 0x2b});
  REQUIRE(rx.status == DecodeStatus::Ok);
  CHECK(rx.instr.dst.mem.base == Reg::r11);
  CHECK(encode(rx.instr) == std::vector<std::uint8_t>{0x41, 0x0f, 0xae, 0x2b});
}

TEST_CASE("truncated buffers report Truncated") {
  CHECK(dec({}).status == DecodeStatus::Truncated);
  CHECK(dec({0x0f}).status == DecodeStatus::Truncated);
  CHECK(dec({0x81, 0xc3, 0x00}).status == DecodeStatus::Truncated);
  CHECK(dec({0x48}).status == DecodeStatus::Truncated);
  CHECK(dec({0xe8, 0x01, 0x02}).status == DecodeStatus::Truncated);
}

TEST_CASE("bytes outside the subset report NotInSubset") {
  CHECK(dec({0xf4}).status == DecodeStatus::NotInSubset);          // hlt
  CHECK(dec({0x66, 0x90}).status == DecodeStatus::NotInSubset);    // 66 prefix
  CHECK(dec({0x0f, 0x0b}).status == DecodeStatus::NotInSubset);    // ud2
  CHECK(dec({0xff, 0xf0}).status == DecodeStatus::NotInSubset);    // push r/m
  CHECK(dec({0x81, 0xcb, 0, 0, 0, 0}).status == DecodeStatus::NotInSubset);
  CHECK(dec({0x40, 0x90}).status == DecodeStatus::NotInSubset);    // rex nop
}

TEST_CASE("decode at an offset") {
  auto r = dec({0x90, 0x0f, 0x01, 0xef}, 1);
  REQUIRE(r.status == DecodeStatus::Ok);
  CHECK(r.instr.mn == Mn::Wrpkru);
}

TEST_CASE("builders round-trip bit-exactly") {
  const MemRef plain{.base = Reg::rdi};
  const MemRef disp8{.base = Reg::rbx, .disp = 0x10};
  const MemRef disp32{.base = Reg::rbx, .disp = 0x12345678};
  const MemRef forced{.base = Reg::rbx, .disp = 4, .disp_bytes = 4};
  const MemRef sib{.base = Reg::rdi, .index = Reg::rcx, .scale = 1,
                   .disp = 0x100};
  const MemRef sib8{.base = Reg::r12, .index = Reg::r9, .scale = 8,
                    .disp = -8};
  const MemRef noidx_r13{.base = Reg::r13};
  const MemRef absolute{.disp = 0x1000};
  const MemRef riprel{.rip_rel = true, .disp = -0x20};
  const MemRef idx_only{.index = Reg::rdx, .scale = 4, .disp = 0x40};

  std::vector<Instr> cases;
  for (Width w : {Width::B32, Width::B64}) {
    for (Mn op : {Mn::Add, Mn::Sub, Mn::Xor, Mn::Cmp}) {
      cases.push_back(build::alu_rr(op, Reg::rcx, Reg::rbp, w));
      cases.push_back(build::alu_rr(op, Reg::r8, Reg::r15, w));
      cases.push_back(build::alu_ri(op, Reg::rax, 0x11223344, w));
      cases.push_back(build::alu_ri(op, Reg::rsi, 0x7f, w));
      cases.push_back(build::alu_rm(op, Reg::rdx, sib, w));
      cases.push_back(build::alu_mr(op, disp32, Reg::r10, w));
      cases.push_back(build::alu_mi(op, disp8, 0x55, w));
    }
    cases.push_back(build::mov_rr(Reg::rbx, Reg::r14, w));
    cases.push_back(build::mov_rm(Reg::rax, riprel, w));
    cases.push_back(build::mov_mr(sib8, Reg::rcx, w));
    cases.push_back(build::mov_mi(absolute, 0xdeadbeef, w));
    cases.push_back(build::mov_rm(Reg::r9, noidx_r13, w));
    cases.push_back(build::mov_rm(Reg::rsp, idx_only, w));
    cases.push_back(build::bt_ri(Reg::rax, 9, w));
    cases.push_back(build::bt_mi(plain, 31, w));
  }
  cases.push_back(build::mov_ri(Reg::rcx, 0x11223344, Width::B32));
  cases.push_back(build::mov_ri(Reg::r11, 0x1122334455667788ull, Width::B64));
  cases.push_back(build::mov_ri_s32(Reg::rbx, -0x1000));
  cases.push_back(build::mov_ri_s32(Reg::r9, 0x7fff0001));
  cases.push_back(build::mov_rm(Reg::rax, forced, Width::B32));
  cases.push_back(build::mov_low8(Reg::rax, 0x0f));
  cases.push_back(build::mov_high8(Reg::rbx, 0x7e));
  cases.push_back(build::push(Reg::rbp));
  cases.push_back(build::push(Reg::r12));
  cases.push_back(build::pop(Reg::rdi));
  cases.push_back(build::pop(Reg::r15));
  cases.push_back(build::jmp_rel8(-2));
  cases.push_back(build::jmp_rel32(0x1000));
  cases.push_back(build::je_rel8(7));
  cases.push_back(build::je_rel32(-0x200));
  cases.push_back(build::jne_rel8(1));
  cases.push_back(build::jnc_rel8(7));
  cases.push_back(build::jnc_rel32(0x99));
  cases.push_back(build::call_rel32(0x40));
  cases.push_back(build::call_reg(Reg::rax));
  cases.push_back(build::call_reg(Reg::r13));
  cases.push_back(build::call_mem(riprel));
  cases.push_back(build::jmp_reg(Reg::rdx));
  cases.push_back(build::jmp_mem(sib));
  cases.push_back(build::ret());
  cases.push_back(build::nop());
  cases.push_back(build::int3());
  cases.push_back(build::syscall_());
  cases.push_back(build::wrpkru());
  cases.push_back(build::xrstor(plain));
  cases.push_back(build::xrstor(disp32));
  cases.push_back(build::xrstor(sib8));

  for (const Instr& in : cases) {
    CAPTURE(to_string(in));
    check_roundtrip(in);
    check_extents(in);
    auto decoded = decode(std::span<const std::uint8_t>(encode(in)));
    check_extents(decoded.instr);
  }
}

TEST_CASE("sign-extending register move freezes to c7 /0") {
  auto bytes = encode(build::mov_ri_s32(Reg::rbx, -0x1000));
  CHECK(bytes == std::vector<std::uint8_t>{0x48, 0xc7, 0xc3, 0x00, 0xf0,
                                           0xff, 0xff});
  auto dec = decode(std::span<const std::uint8_t>(bytes));
  REQUIRE(dec.status == DecodeStatus::Ok);
  CHECK(dec.instr.mn == Mn::Mov);
  CHECK(dec.instr.width == Width::B64);
  CHECK(dec.instr.imm == -0x1000);
}

TEST_CASE("forced disp32 keeps value but widens the encoding") {
  const MemRef forced{.base = Reg::rbx, .disp = 4, .disp_bytes = 4};
  auto wide = build::mov_rm(Reg::rax, forced, Width::B32);
  const MemRef natural{.base = Reg::rbx, .disp = 4};
  auto narrow = build::mov_rm(Reg::rax, natural, Width::B32);
  CHECK(wide.length == narrow.length + 3);
  CHECK(wide.disp == narrow.disp);
}

TEST_CASE("rel branch helpers") {
  auto j = build::je_rel8(7);
  CHECK(is_rel_branch(j));
  CHECK(is_cond_branch(j));
  CHECK(rel_target(j, 100) == 100 + 2 + 7);

  auto c = build::call_rel32(-16);
  CHECK(is_rel_branch(c));
  CHECK_FALSE(is_cond_branch(c));
  CHECK(rel_target(c, 100) == 100 + 5 - 16);

  CHECK_FALSE(is_rel_branch(build::call_reg(Reg::rax)));
  CHECK_FALSE(is_rel_branch(build::jmp_mem(MemRef{.base = Reg::rax})));
}

TEST_CASE("regs_referenced covers operands and implicits") {
  auto mask = [](std::initializer_list<Reg> regs) {
    std::uint32_t m = 0;
    for (Reg r : regs) m |= 1u << reg_id(r);
    return m;
  };

  CHECK(regs_referenced(build::mov_rr(Reg::rbx, Reg::rcx, Width::B32)) ==
        mask({Reg::rbx, Reg::rcx}));
  const MemRef sib{.base = Reg::rdi, .index = Reg::r9, .scale = 2};
  CHECK(regs_referenced(build::alu_rm(Mn::Add, Reg::rdx, sib, Width::B32)) ==
        mask({Reg::rdx, Reg::rdi, Reg::r9}));
  CHECK(regs_referenced(build::push(Reg::rbx)) == mask({Reg::rbx, Reg::rsp}));
  CHECK(regs_referenced(build::wrpkru()) ==
        mask({Reg::rax, Reg::rcx, Reg::rdx}));
  CHECK(regs_referenced(build::syscall_()) ==
        mask({Reg::rax, Reg::rdi, Reg::rsi, Reg::rdx, Reg::r10}));
  CHECK(regs_referenced(build::ret()) == mask({Reg::rsp}));
}
