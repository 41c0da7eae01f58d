#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "erimforge/gates.hpp"
#include "erimforge/pkru.hpp"
#include "erimforge/sim.hpp"
#include "erimforge/x86.hpp"
#include "support/asm_helpers.hpp"

using namespace erim;
using x86::Reg;
using x86::Width;
namespace b = x86::build;
using erim::testing::append;

namespace {

constexpr std::uint64_t kCode = 0x400000;
constexpr std::uint64_t kUData = 0x500000;
constexpr std::uint64_t kTData = 0x600000;
constexpr std::uint64_t kJit = 0x410000;
constexpr std::uint64_t kStackPage = 0x7FF000;
constexpr std::uint64_t kStackTop = 0x800000;

x86::MemRef at_reg(Reg r) {
  x86::MemRef m;
  m.base = r;
  return m;
}

void emit_exit(std::vector<std::uint8_t>& p, std::uint8_t code) {
  append(p, b::mov_ri(Reg::rax, 60, Width::B32));
  append(p, b::mov_ri(Reg::rdi, code, Width::B32));
  append(p, b::syscall_());
}

std::size_t count_event(const std::vector<TraceEvent>& v,
                        std::string_view name) {
  return static_cast<std::size_t>(
      std::count_if(v.begin(), v.end(), [&](const TraceEvent& t) {
        return t.event == name;
      }));
}

Machine machine_with_code(const std::vector<std::uint8_t>& code) {
  Machine m;
  REQUIRE(m.map_region(kCode, kSimPage, 0, true, false, true, code));
  REQUIRE(m.map_region(kStackPage, kSimPage, 0, true, true, false));
  return m;
}

}  // namespace

TEST_CASE("trust relation validation and component vectors") {
  DomainConfig cfg;
  cfg.domains = 3;
  cfg.trust = {{2, 1}, {1, 0}};
  std::string err;
  CHECK_FALSE(validate_domains(cfg, &err));
  CHECK(err.find("not transitive") != std::string::npos);

  cfg.trust.insert({2, 0});
  CHECK(validate_domains(cfg, &err));
  CHECK(pkru_for_component(cfg, 2) == 0x3F);
  CHECK(pkru_for_component(cfg, 1) == 0xF);
  CHECK(pkru_for_component(cfg, 0) == 0x3);

  DomainConfig bad;
  bad.domains = 17;
  CHECK_FALSE(validate_domains(bad));
  bad.domains = 2;
  bad.trust = {{0, 5}};
  CHECK_FALSE(validate_domains(bad));

  DomainConfig mutual;
  mutual.domains = 2;
  mutual.trust = {{0, 1}, {1, 0}};
  CHECK(validate_domains(mutual));
}

TEST_CASE("mapping constraints") {
  Machine m;
  CHECK_FALSE(m.map_region(kCode, kSimPage, 0, true, true, true));
  CHECK_FALSE(m.map_region(kCode + 1, kSimPage, 0, true, false, false));
  CHECK_FALSE(m.map_region(kCode, 0, 0, true, false, false));
  CHECK_FALSE(m.map_region(kCode, kSimPage, 16, true, false, false));
  std::vector<std::uint8_t> big(2 * kSimPage, 0);
  CHECK_FALSE(m.map_region(kCode, kSimPage, 0, true, false, false, big));
  CHECK(m.map_region(kCode, 2 * kSimPage, 0, true, false, true));
  CHECK_FALSE(m.map_region(kCode + kSimPage, kSimPage, 0, true, false,
                           false));
  CHECK(m.executable_at(kCode + kSimPage));
  CHECK_FALSE(m.executable_at(kCode + 2 * kSimPage));
}

TEST_CASE("untrusted access to trusted memory") {
  std::vector<std::uint8_t> code;
  append(code, b::mov_ri(Reg::rcx, kTData, Width::B64));
  append(code, b::mov_mi(at_reg(Reg::rcx), 0x2A, Width::B32));
  emit_exit(code, 0);

  SUBCASE("denied under untrusted pkru") {
    Machine m = machine_with_code(code);
    REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                         false));
    m.spawn_thread(kCode, kStackTop);
    m.run_machine(100);
    CHECK(m.exited);
    CHECK(m.exit_code == 139);
    CHECK(count_event(m.trace, "denied-store") == 1);
    CHECK(count_event(m.trace, "fault-denied") == 1);
    CHECK(m.violations.empty());
  }

  SUBCASE("granted pkru from untrusted code is a violation") {
    Machine m = machine_with_code(code);
    REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                         false));
    m.spawn_thread(kCode, kStackTop, pkru::kAllowTrusted);
    m.run_machine(100);
    CHECK(m.exited);
    CHECK(m.exit_code == 0);
    CHECK(count_event(m.violations, "mt-write-outside-t") == 1);
    std::uint8_t one[1] = {};
    REQUIRE(m.peek(kTData, one));
    CHECK(one[0] == 0x2A);
  }

  SUBCASE("registered trusted code is sanctioned") {
    Machine m = machine_with_code(code);
    REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                         false));
    m.add_trusted_code(kCode, kCode + kSimPage);
    m.spawn_thread(kCode, kStackTop, pkru::kAllowTrusted);
    m.run_machine(100);
    CHECK(m.exited);
    CHECK(m.exit_code == 0);
    CHECK(m.violations.empty());
  }
}

namespace {

// Layout: enter gate, trusted store, exit gate, exit(7). Returns the image
// and reports the designated entry and the exit gate's raise instruction.
std::vector<std::uint8_t> gate_image(std::uint64_t* entry,
                                     std::uint64_t* exit_wrpkru) {
  std::vector<std::uint8_t> code = gates::enter_sequence(pkru::kAllowTrusted);
  *entry = kCode + code.size();
  append(code, b::mov_ri(Reg::rcx, kTData, Width::B64));
  append(code, b::mov_mi(at_reg(Reg::rcx), 0x55, Width::B32));
  const std::vector<std::uint8_t> ex =
      gates::exit_sequence(pkru::kDisallowTrusted);
  *exit_wrpkru = kCode + code.size() + 9;  // xor, xor, mov eax precede it
  code.insert(code.end(), ex.begin(), ex.end());
  emit_exit(code, 7);
  return code;
}

Machine gate_machine(std::uint64_t* entry, std::uint64_t* exit_wrpkru) {
  std::uint64_t en = 0, ex = 0;
  std::vector<std::uint8_t> code = gate_image(&en, &ex);
  Machine m = machine_with_code(code);
  REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                       false));
  m.add_entry(en);
  m.add_trusted_code(en, kCode + code.size());
  if (entry) *entry = en;
  if (exit_wrpkru) *exit_wrpkru = ex;
  return m;
}

}  // namespace

TEST_CASE("call gate round trip") {
  Machine m = gate_machine(nullptr, nullptr);
  REQUIRE(m.startup_inspect());
  m.spawn_thread(kCode, kStackTop);
  m.run_machine(200);
  CHECK(m.exited);
  CHECK(m.exit_code == 7);
  CHECK(m.violations.empty());
  CHECK(count_event(m.trace, "pkru-write") == 2);
  std::uint8_t one[1] = {};
  REQUIRE(m.peek(kTData, one));
  CHECK(one[0] == 0x55);
}

TEST_CASE("exit gate guard kills a forged raise") {
  std::uint64_t exit_wrpkru = 0;
  Machine m = gate_machine(nullptr, &exit_wrpkru);
  const int id = m.spawn_thread(exit_wrpkru, kStackTop);
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rax) =
      pkru::kAllowTrusted;
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rcx) = 0;
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rdx) = 0;
  // The stub exits with whatever rdi holds; a sentinel separates the kill
  // path from the image's own exit(7).
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rdi) = 61;
  m.run_machine(100);
  CHECK(m.exited);
  CHECK(m.exit_code == 61);
  CHECK(m.violations.empty());
}

TEST_CASE("honest exit value passes the guard") {
  std::uint64_t exit_wrpkru = 0;
  Machine m = gate_machine(nullptr, &exit_wrpkru);
  const int id = m.spawn_thread(exit_wrpkru, kStackTop,
                                pkru::kAllowTrusted);
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rax) =
      pkru::kDisallowTrusted;
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rcx) = 0;
  m.threads[static_cast<std::size_t>(id)].st.reg(Reg::rdx) = 0;
  m.run_machine(100);
  CHECK(m.exited);
  CHECK(m.exit_code == 7);
  CHECK(m.violations.empty());
}

TEST_CASE("raise that never reaches an entry is flagged") {
  std::vector<std::uint8_t> code = gates::enter_sequence(pkru::kAllowTrusted);
  for (int i = 0; i < 6; ++i) append(code, b::nop());
  emit_exit(code, 0);

  Machine m = machine_with_code(code);
  // No entry registered: the raise is an attack artifact.
  m.spawn_thread(kCode, kStackTop);
  m.run_machine(100);
  CHECK(m.exited);
  CHECK(m.exit_code == 0);
  CHECK(count_event(m.violations, "no-entry-after-raise") == 1);

  Machine fresh = machine_with_code(code);
  CHECK_FALSE(fresh.startup_inspect());
  CHECK(fresh.exited);
  CHECK(fresh.exit_code == -1);
}

TEST_CASE("trusted touch inside the transition window is flagged") {
  std::vector<std::uint8_t> code;
  append(code, b::mov_ri(Reg::rbx, kTData, Width::B64));
  const std::vector<std::uint8_t> en =
      gates::enter_sequence(pkru::kAllowTrusted);
  code.insert(code.end(), en.begin(), en.end());
  append(code, b::mov_mr(at_reg(Reg::rbx), Reg::rax, Width::B32));
  emit_exit(code, 0);

  Machine m = machine_with_code(code);
  REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                       false));
  m.spawn_thread(kCode, kStackTop);
  m.run_machine(100);
  CHECK(m.exited);
  CHECK(count_event(m.violations, "mt-during-transition") == 1);
  CHECK(count_event(m.violations, "mt-write-outside-t") == 1);
}

TEST_CASE("per-thread pkru independence") {
  std::vector<std::uint8_t> code;
  append(code, b::mov_ri(Reg::rcx, kTData, Width::B64));
  append(code, b::mov_mi(at_reg(Reg::rcx), 0x77, Width::B32));
  emit_exit(code, 1);

  Machine m = machine_with_code(code);
  REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                       false));
  REQUIRE(m.map_region(kStackPage - kSimPage, kSimPage, 0, true, true,
                       false));
  m.add_trusted_code(kCode, kCode + kSimPage);
  m.cfg.record_and_continue = true;
  m.spawn_thread(kCode, kStackTop, pkru::kAllowTrusted);
  m.spawn_thread(kCode, kStackPage, pkru::kDisallowTrusted);
  m.run_machine(300);
  CHECK(m.exited);
  CHECK(m.exit_code == 1);
  CHECK(count_event(m.trace, "denied-store") == 1);
  CHECK_FALSE(m.threads[1].alive);
  std::uint8_t one[1] = {};
  REQUIRE(m.peek(kTData, one));
  CHECK(one[0] == 0x77);
}

TEST_CASE("signal delivery drops privileges") {
  std::uint64_t entry = 0;
  std::vector<std::uint8_t> code = gates::enter_sequence(pkru::kAllowTrusted);
  entry = kCode + code.size();
  for (int i = 0; i < 30; ++i) append(code, b::nop());
  emit_exit(code, 3);

  std::vector<std::uint8_t> handler;
  emit_exit(handler, 5);

  Machine m = machine_with_code(code);
  REQUIRE(m.map_region(kJit, kSimPage, 0, true, false, true, handler));
  m.add_entry(entry);
  const int id = m.spawn_thread(kCode, kStackTop);
  m.inject_signal(id, kJit, 10);  // lands mid run, after the raise
  m.run_machine(300);
  CHECK(m.exited);
  CHECK(m.exit_code == 5);
  REQUIRE(count_event(m.trace, "signal") == 1);
  for (const TraceEvent& ev : m.trace) {
    if (ev.event == "signal") CHECK(ev.b == pkru::kAllowTrusted);
    // Every instruction the handler runs sees untrusted privileges.
    if (ev.event == "syscall" && ev.pc >= kJit)
      CHECK(ev.pkru == pkru::kDisallowTrusted);
  }
  CHECK(m.violations.empty());
}

TEST_CASE("signal with an unwritable stack terminates") {
  std::vector<std::uint8_t> code;
  for (int i = 0; i < 8; ++i) append(code, b::nop());
  emit_exit(code, 0);
  Machine m = machine_with_code(code);
  const int id = m.spawn_thread(kCode, 0x900000);  // stack never mapped
  m.inject_signal(id, kCode);
  m.run_machine(50);
  CHECK(m.exited);
  CHECK(m.exit_code == 139);
  CHECK(count_event(m.trace, "signal-stack") == 1);
}

namespace {

// rax = syscall(nr, a0, a1, a2); [kUData] = eax; exit(0)
std::vector<std::uint8_t> syscall_probe(std::uint64_t nr, std::uint64_t a0,
                                        std::uint64_t a1, std::uint64_t a2) {
  std::vector<std::uint8_t> code;
  append(code, b::mov_ri(Reg::rbx, kUData, Width::B64));
  append(code, b::mov_ri(Reg::rdi, a0, Width::B64));
  append(code, b::mov_ri(Reg::rsi, a1, Width::B64));
  append(code, b::mov_ri(Reg::rdx, a2, Width::B64));
  append(code, b::mov_ri(Reg::rax, nr, Width::B32));
  append(code, b::syscall_());
  append(code, b::mov_mr(at_reg(Reg::rbx), Reg::rax, Width::B32));
  emit_exit(code, 0);
  return code;
}

Machine probe_machine(const std::vector<std::uint8_t>& code,
                      std::uint32_t pkru) {
  Machine m = machine_with_code(code);
  REQUIRE(m.map_region(kUData, kSimPage, 0, true, true, false));
  m.spawn_thread(kCode, kStackTop, pkru);
  return m;
}

std::uint32_t probe_result(Machine& m) {
  m.run_machine(100);
  REQUIRE(m.exited);
  REQUIRE(m.exit_code == 0);
  std::uint8_t raw[4] = {};
  REQUIRE(m.peek(kUData, raw));
  return static_cast<std::uint32_t>(raw[0]) |
         (static_cast<std::uint32_t>(raw[1]) << 8) |
         (static_cast<std::uint32_t>(raw[2]) << 16) |
         (static_cast<std::uint32_t>(raw[3]) << 24);
}

}  // namespace

TEST_CASE("syscall interception") {
  SUBCASE("writable plus executable mapping is refused") {
    Machine m = probe_machine(syscall_probe(9, 0, kSimPage, 7),
                              pkru::kAllowTrusted);
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-13));
    CHECK(count_event(m.trace, "dep-denied") == 1);
  }
  SUBCASE("untrusted caller cannot map executable memory") {
    Machine m = probe_machine(syscall_probe(9, 0, kSimPage, 5),
                              pkru::kDisallowTrusted);
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-13));
    CHECK(count_event(m.trace, "interception-denied") == 1);
  }
  SUBCASE("trusted caller maps executable memory at the bump address") {
    std::vector<std::uint8_t> code;
    append(code, b::mov_ri(Reg::rbx, kUData, Width::B64));
    append(code, b::mov_ri(Reg::rdi, 0, Width::B64));
    append(code, b::mov_ri(Reg::rsi, kSimPage, Width::B64));
    append(code, b::mov_ri(Reg::rdx, 5, Width::B64));
    append(code, b::mov_ri(Reg::rax, 9, Width::B32));
    append(code, b::syscall_());
    append(code, b::mov_mr(at_reg(Reg::rbx), Reg::rax, Width::B64));
    emit_exit(code, 0);
    Machine m = machine_with_code(code);
    REQUIRE(m.map_region(kUData, kSimPage, 0, true, true, false));
    m.spawn_thread(kCode, kStackTop, pkru::kAllowTrusted);
    m.run_machine(100);
    REQUIRE(m.exited);
    REQUIRE(m.exit_code == 0);
    std::uint8_t raw[8] = {};
    REQUIRE(m.peek(kUData, raw));
    std::uint64_t got = 0;
    for (int i = 7; i >= 0; --i) got = got << 8 | raw[i];
    CHECK(got == 0x7F0000000000ull);
    CHECK(m.pages.count(0x7F0000000000 / kSimPage) == 1);
  }
  SUBCASE("untrusted caller cannot retag domains") {
    Machine m = probe_machine(syscall_probe(329, kUData, kSimPage, 3),
                              pkru::kDisallowTrusted);
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-13));
    CHECK(count_event(m.trace, "interception-denied") == 1);
  }
  SUBCASE("trusted caller retags a page") {
    std::vector<std::uint8_t> code;
    append(code, b::mov_ri(Reg::rbx, kUData, Width::B64));
    append(code, b::mov_ri(Reg::rdi, kTData, Width::B64));
    append(code, b::mov_ri(Reg::rsi, kSimPage, Width::B64));
    append(code, b::mov_ri(Reg::rdx, 3, Width::B64));
    append(code, b::mov_ri(Reg::r10, pkru::kTrustedDomain, Width::B32));
    append(code, b::mov_ri(Reg::rax, 329, Width::B32));
    append(code, b::syscall_());
    append(code, b::mov_mr(at_reg(Reg::rbx), Reg::rax, Width::B32));
    emit_exit(code, 0);
    Machine m = machine_with_code(code);
    REQUIRE(m.map_region(kUData, kSimPage, 0, true, true, false));
    REQUIRE(m.map_region(kTData, kSimPage, 0, true, true, false));
    m.spawn_thread(kCode, kStackTop, pkru::kAllowTrusted);
    CHECK(probe_result(m) == 0);
    CHECK(m.pages.at(kTData / kSimPage).domain == pkru::kTrustedDomain);
  }
  SUBCASE("configured filter denies untrusted callers") {
    Machine m = probe_machine(syscall_probe(1, 1, kUData, 1),
                              pkru::kDisallowTrusted);
    m.cfg.u_denied_syscalls = {1};
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-13));
    CHECK(count_event(m.trace, "filter-denied") == 1);
  }
  SUBCASE("unknown syscalls fall through") {
    Machine m = probe_machine(syscall_probe(777, 0, 0, 0),
                              pkru::kDisallowTrusted);
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-38));
  }
}

TEST_CASE("write syscall") {
  std::vector<std::uint8_t> hello = {'h', 'e', 'l', 'l', 'o'};
  SUBCASE("captures bytes written to fd 1") {
    Machine m = probe_machine(syscall_probe(1, 1, kUData, 5),
                              pkru::kDisallowTrusted);
    m.pages.at(kUData / kSimPage).bytes.assign(kSimPage, 0);
    std::copy(hello.begin(), hello.end(),
              m.pages.at(kUData / kSimPage).bytes.begin());
    CHECK(probe_result(m) == 5);
    CHECK(m.output == hello);
  }
  SUBCASE("buffer the caller cannot read is refused") {
    Machine m = probe_machine(syscall_probe(1, 1, kTData, 5),
                              pkru::kDisallowTrusted);
    REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                         false));
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-14));
    CHECK(m.output.empty());
  }
}

TEST_CASE("eager mprotect inspection") {
  SUBCASE("unsafe content never becomes executable") {
    Machine m = probe_machine(syscall_probe(10, kJit, kSimPage, 5),
                              pkru::kAllowTrusted);
    std::vector<std::uint8_t> bad = {0x0F, 0x01, 0xEF};
    REQUIRE(m.map_region(kJit, kSimPage, 0, true, true, false, bad));
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-1));
    CHECK(count_event(m.trace, "inspect-fail") == 1);
    CHECK_FALSE(m.pages.at(kJit / kSimPage).x);
  }
  SUBCASE("clean content passes and turns executable") {
    Machine m = probe_machine(syscall_probe(10, kJit, kSimPage, 5),
                              pkru::kAllowTrusted);
    REQUIRE(m.map_region(kJit, kSimPage, 0, true, true, false));
    CHECK(probe_result(m) == 0);
    CHECK(count_event(m.trace, "inspect-pass") == 1);
    CHECK(m.pages.at(kJit / kSimPage).x);
  }
  SUBCASE("untrusted caller cannot request executability") {
    Machine m = probe_machine(syscall_probe(10, kJit, kSimPage, 5),
                              pkru::kDisallowTrusted);
    REQUIRE(m.map_region(kJit, kSimPage, 0, true, true, false));
    CHECK(probe_result(m) == static_cast<std::uint32_t>(-13));
    CHECK(count_event(m.trace, "interception-denied") == 1);
  }
}

TEST_CASE("on demand execution faults") {
  SUBCASE("clean pending page is inspected and released") {
    std::vector<std::uint8_t> jit;
    emit_exit(jit, 9);
    Machine m;
    m.cfg.inspect = InspectWhen::OnDemand;
    REQUIRE(m.map_region(kJit, kSimPage, 0, true, false, true, jit,
                         PageState::Pending));
    REQUIRE(m.map_region(kStackPage, kSimPage, 0, true, true, false));
    m.spawn_thread(kJit, kStackTop);
    m.run_machine(50);
    CHECK(m.exited);
    CHECK(m.exit_code == 9);
    CHECK(count_event(m.trace, "inspect-pass") == 1);
    CHECK(m.pages.at(kJit / kSimPage).state == PageState::Normal);
    CHECK(m.pages.at(kJit / kSimPage).x);
  }
  SUBCASE("unsafe pending page terminates") {
    std::vector<std::uint8_t> jit = {0x0F, 0x01, 0xEF};
    Machine m;
    m.cfg.inspect = InspectWhen::OnDemand;
    REQUIRE(m.map_region(kJit, kSimPage, 0, true, false, true, jit,
                         PageState::Pending));
    REQUIRE(m.map_region(kStackPage, kSimPage, 0, true, true, false));
    m.spawn_thread(kJit, kStackTop);
    m.run_machine(50);
    CHECK(m.exited);
    CHECK(m.exit_code == 139);
    CHECK(count_event(m.trace, "unsafe-code") == 1);
  }
  SUBCASE("disabled inspection releases without looking") {
    std::vector<std::uint8_t> jit = {0x0F, 0x01, 0xEF};  // raw raise
    std::vector<std::uint8_t> code;
    // ecx = edx = 0, eax keeps untrusted rights, then run the raw page
    append(code, b::alu_rr(x86::Mn::Xor, Reg::rcx, Reg::rcx, Width::B32));
    append(code, b::alu_rr(x86::Mn::Xor, Reg::rdx, Reg::rdx, Width::B32));
    append(code, b::mov_ri(Reg::rax, pkru::kDisallowTrusted, Width::B32));
    append(code, b::jmp_rel32(static_cast<std::int32_t>(
                     kJit - (kCode + code.size() + 5))));
    emit_exit(code, 1);  // not reached
    std::vector<std::uint8_t> tail;
    emit_exit(tail, 2);
    jit.insert(jit.end(), tail.begin(), tail.end());
    Machine m = machine_with_code(code);
    m.cfg.inspect = InspectWhen::OnDemand;
    m.cfg.inspection_enabled = false;
    REQUIRE(m.map_region(kJit, kSimPage, 0, true, false, true, jit,
                         PageState::Pending));
    m.spawn_thread(kCode, kStackTop);
    m.run_machine(50);
    CHECK(m.exited);
    CHECK(m.exit_code == 2);
    CHECK(count_event(m.trace, "exec-unblock") == 1);
  }
}

TEST_CASE("rewrite on fault") {
  std::vector<std::uint8_t> jit;
  append(jit, b::alu_rr(x86::Mn::Xor, Reg::rcx, Reg::rcx, Width::B32));
  append(jit, b::alu_rr(x86::Mn::Xor, Reg::rdx, Reg::rdx, Width::B32));
  append(jit, b::mov_ri(Reg::rax, pkru::kDisallowTrusted, Width::B32));
  append(jit, b::wrpkru());  // unguarded: inspection must reject this
  emit_exit(jit, 4);
  append(jit, b::ret());  // vetting endpoint; never executed

  Machine m;
  m.cfg.inspect = InspectWhen::OnDemand;
  m.cfg.rewrite_on_fault = true;
  REQUIRE(m.map_region(kJit, kSimPage, 0, true, false, true, jit,
                       PageState::Pending));
  REQUIRE(m.map_region(kStackPage, kSimPage, 0, true, true, false));
  m.spawn_thread(kJit, kStackTop);
  m.run_machine(200);
  CHECK(m.exited);
  CHECK(m.exit_code == 4);
  CHECK(m.trap_regions.size() == 1);
  CHECK(count_event(m.trace, "rewrite-arm") == 1);
  CHECK(count_event(m.trace, "runtime-rewrite") >= 1);
  CHECK(m.violations.empty());
}

TEST_CASE("integrity only mode permits trusted reads") {
  std::vector<std::uint8_t> code;
  append(code, b::mov_ri(Reg::rcx, kTData, Width::B64));
  append(code, b::mov_rm(Reg::rbx, at_reg(Reg::rcx), Width::B32));
  append(code, b::mov_mr(at_reg(Reg::rcx), Reg::rbx, Width::B32));
  emit_exit(code, 0);

  Machine m = machine_with_code(code);
  m.cfg.mode = SimMode::IntegrityOnly;
  REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                       false));
  m.spawn_thread(kCode, kStackTop, pkru::kDisallowTrustedWrites);
  m.run_machine(100);
  CHECK(m.exited);
  CHECK(m.exit_code == 139);  // the write still faults
  CHECK(count_event(m.trace, "denied-store") == 1);
  CHECK(count_event(m.trace, "denied-load") == 0);
  CHECK(m.violations.empty());
}

TEST_CASE("domain pools") {
  Machine m;
  m.set_pool(0, 0x700000, 0x2000);
  m.set_pool(2, 0x710000, 0x1000);
  const int id = m.spawn_thread(kCode, kStackTop,
                                0x3u | (0x3u << 4));  // domains 0 and 2
  CHECK(m.domain_alloc(id, 0x800) == 0x710000);
  CHECK(m.domain_alloc(id, 0x800) == 0x710800);
  CHECK(m.domain_alloc(id, 0x800) == 0);  // pool 2 exhausted, no fallback
  const int u = m.spawn_thread(kCode, kStackTop, pkru::kDisallowTrusted);
  CHECK(m.domain_alloc(u, 0x1000) == 0x700000);
}

TEST_CASE("scheduler is deterministic and bounded") {
  std::vector<std::uint8_t> spin;
  append(spin, b::jmp_rel8(-2));

  Machine a = machine_with_code(spin);
  a.spawn_thread(kCode, kStackTop);
  a.run_machine(50);
  CHECK(a.steps == 50);
  CHECK_FALSE(a.exited);
  CHECK(a.threads[0].alive);

  auto build_pair = [&spin](std::uint64_t seed) {
    Machine m = machine_with_code(spin);
    m.cfg.seed = seed;
    REQUIRE(m.map_region(kStackPage - kSimPage, kSimPage, 0, true, true,
                         false));
    m.spawn_thread(kCode, kStackTop);
    m.spawn_thread(kCode, kStackPage);
    m.run_machine(200);
    return m.trace;
  };
  CHECK(build_pair(7) == build_pair(7));
}

TEST_CASE("page boundary occurrence caught at startup") {
  std::vector<std::uint8_t> code(2 * kSimPage, 0x90);
  code[kSimPage - 2] = 0x0F;
  code[kSimPage - 1] = 0x01;
  code[kSimPage] = 0xEF;
  Machine m;
  REQUIRE(m.map_region(kCode, 2 * kSimPage, 0, true, false, true, code));
  m.spawn_thread(kCode, kStackTop);
  CHECK_FALSE(m.startup_inspect());
  CHECK(m.exited);
  CHECK(m.exit_code == -1);
  CHECK(count_event(m.trace, "startup-abort") == 1);
}

TEST_CASE("trap region content view") {
  std::vector<std::uint8_t> content = {0xC3, 0x90};
  Machine m;
  REQUIRE(m.map_trap_region(kJit, content, 0));
  CHECK(m.trap_regions.size() == 1);
  CHECK(m.executable_at(kJit));
  CHECK(m.executable_at(kJit + 4 * kSimPage - 1));
  std::uint8_t raw[2] = {};
  REQUIRE(m.peek(kJit, raw));
  // Nothing vetted yet: the whole view traps.
  CHECK(raw[0] == 0xCC);
  CHECK(raw[1] == 0xCC);
  CHECK_FALSE(m.map_trap_region(kJit, content, 0));  // overlap
}

TEST_CASE("attack sweep") {
  std::uint64_t entry = 0, exit_wrpkru = 0;
  const std::vector<std::uint8_t> code = gate_image(&entry, &exit_wrpkru);
  const auto presets =
      sweep_presets(11, 8, kStackPage, kStackTop);
  REQUIRE(presets.size() == 8);

  SUBCASE("empty range") {
    Machine m = gate_machine(nullptr, nullptr);
    const SweepReport rep = attack_sweep(m, kCode, kCode, presets, 1000);
    CHECK(rep.offsets == 0);
    CHECK(rep.runs == 0);
    CHECK(rep.clean());
  }

  SUBCASE("guarded image stays clean") {
    Machine m = gate_machine(nullptr, nullptr);
    REQUIRE(m.startup_inspect());
    const SweepReport rep =
        attack_sweep(m, kCode, kCode + code.size(), presets, 2000);
    CHECK(rep.offsets == code.size());
    CHECK(rep.runs == code.size() * presets.size());
    CHECK(rep.clean());
  }

  SUBCASE("unguarded raise is exploitable") {
    std::vector<std::uint8_t> bad;
    append(bad, b::mov_ri(Reg::rbx, kTData, Width::B64));
    const std::vector<std::uint8_t> en =
        gates::enter_sequence(pkru::kAllowTrusted);
    bad.insert(bad.end(), en.begin(), en.end());
    append(bad, b::mov_mr(at_reg(Reg::rbx), Reg::rax, Width::B32));
    emit_exit(bad, 0);
    Machine m = machine_with_code(bad);
    REQUIRE(m.map_region(kTData, kSimPage, pkru::kTrustedDomain, true, true,
                         false));
    // Inspection deliberately skipped: the sweep must find the hole.
    const SweepReport rep =
        attack_sweep(m, kCode, kCode + bad.size(), presets, 2000);
    CHECK_FALSE(rep.clean());
    bool write_hit = false;
    for (const SweepHit& h : rep.hits)
      write_hit = write_hit || (h.write && h.addr == kTData);
    CHECK(write_hit);
  }
}
