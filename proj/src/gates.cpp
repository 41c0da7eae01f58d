#include "erimforge/gates.hpp"

#include "erimforge/x86.hpp"

namespace erim::gates {

namespace {

using x86::Instr;
using x86::Mn;
using x86::Reg;
using x86::Width;

void emit(std::vector<std::uint8_t>& out, const Instr& in) {
  auto b = x86::encode(in);
  out.insert(out.end(), b.begin(), b.end());
}

void emit_exit_stub(std::vector<std::uint8_t>& out) {
  emit(out, x86::build::mov_ri(Reg::rax, 60, Width::B32));
  emit(out, x86::build::syscall_());
}

}  // namespace

std::vector<std::uint8_t> compare_kill_guard(std::uint32_t disallow) {
  std::vector<std::uint8_t> out;
  emit(out, x86::build::alu_ri(Mn::Cmp, Reg::rax, disallow, Width::B32));
  emit(out, x86::build::je_rel8(kExitStubLength));
  emit_exit_stub(out);
  return out;
}

std::vector<std::uint8_t> bittest_kill_guard() {
  std::vector<std::uint8_t> out;
  emit(out, x86::build::bt_ri(Reg::rax, 9, Width::B32));
  emit(out, x86::build::jnc_rel8(kExitStubLength));
  emit_exit_stub(out);
  return out;
}

std::vector<std::uint8_t> enter_sequence(std::uint32_t allow) {
  std::vector<std::uint8_t> out;
  emit(out, x86::build::alu_rr(Mn::Xor, Reg::rcx, Reg::rcx, Width::B32));
  emit(out, x86::build::alu_rr(Mn::Xor, Reg::rdx, Reg::rdx, Width::B32));
  emit(out, x86::build::mov_ri(Reg::rax, allow, Width::B32));
  emit(out, x86::build::wrpkru());
  return out;
}

std::vector<std::uint8_t> exit_sequence(std::uint32_t disallow) {
  auto out = enter_sequence(disallow);
  auto guard = compare_kill_guard(disallow);
  out.insert(out.end(), guard.begin(), guard.end());
  return out;
}

std::vector<std::uint8_t> emit_call_gate(GateKind kind, std::uint32_t allow,
                                         std::uint32_t disallow) {
  return kind == GateKind::Enter ? enter_sequence(allow)
                                 : exit_sequence(disallow);
}

}  // namespace erim::gates
