#include <doctest.h>

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "erimforge/gates.hpp"
#include "erimforge/pkru.hpp"
#include "erimforge/scenario.hpp"
#include "erimforge/x86.hpp"
#include "support/asm_helpers.hpp"

using namespace erim;
using x86::Reg;
using x86::Width;
namespace b = x86::build;
using erim::testing::append;

namespace {

std::string hex(const std::vector<std::uint8_t>& v) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (std::uint8_t x : v) {
    out += digits[x >> 4];
    out += digits[x & 0xF];
  }
  return out;
}

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

// enter gate, store 0x55 to 0x600000, exit gate, exit(7)
std::vector<std::uint8_t> gate_program(std::uint64_t* entry_off) {
  std::vector<std::uint8_t> code = gates::enter_sequence(pkru::kAllowTrusted);
  *entry_off = code.size();
  append(code, b::mov_ri(Reg::rcx, 0x600000, Width::B64));
  append(code, b::mov_mi(at_reg(Reg::rcx), 0x55, Width::B32));
  const auto ex = gates::exit_sequence(pkru::kDisallowTrusted);
  code.insert(code.end(), ex.begin(), ex.end());
  emit_exit(code, 7);
  return code;
}

// unguarded raise, then store to 0x600000, exit(0)
std::vector<std::uint8_t> leaky_program() {
  std::vector<std::uint8_t> code;
  append(code, b::mov_ri(Reg::rbx, 0x600000, Width::B64));
  const auto en = gates::enter_sequence(pkru::kAllowTrusted);
  code.insert(code.end(), en.begin(), en.end());
  append(code, b::mov_mr(at_reg(Reg::rbx), Reg::rax, Width::B32));
  emit_exit(code, 0);
  return code;
}

}  // namespace

TEST_CASE("scenario gate round trip") {
  std::uint64_t entry_off = 0;
  const auto prog = gate_program(&entry_off);
  std::string text;
  text += "seed 3\n";
  text += "code 0x400000 0 " + hex(prog) + "\n";
  text += "data 0x600000 0x1000 1\n";
  text += "data 0x7ff000 0x1000 0\n";
  std::ostringstream e;
  e << "entry 0x" << std::hex << (0x400000 + entry_off) << "\n";
  text += e.str();
  text += "trusted-range 0x400000 0x401000\n";
  text += "startup-inspect pass\n";
  text += "thread 0x400000 0x800000\n";
  text += "run 500\n";
  text += "expect-exit 7\n";
  text += "expect-no-violations\n";
  text += "expect-byte 0x600000 0x55\n";
  const ScenarioResult res = run_scenario(text);
  CHECK(res.errors.empty());
  CHECK(res.failures.empty());
  CHECK(res.machine.exited);

  const std::string trace = format_trace(res.machine);
  CHECK(trace.find("event=pkru-write") != std::string::npos);
  CHECK(trace.find("event=syscall") != std::string::npos);
}

TEST_CASE("scenario records violations") {
  const auto prog = leaky_program();
  std::string base;
  base += "code 0x400000 0 " + hex(prog) + "\n";
  base += "data 0x600000 0x1000 1\n";
  base += "data 0x7ff000 0x1000 0\n";
  base += "thread 0x400000 0x800000\n";
  base += "run 200\n";

  const ScenarioResult hit =
      run_scenario(base + "expect-violation mt-write-outside-t\n");
  CHECK(hit.ok());

  const ScenarioResult caught = run_scenario(base + "expect-no-violations\n");
  CHECK(caught.usable());
  CHECK_FALSE(caught.ok());
  REQUIRE(caught.failures.size() == 1);
  CHECK(caught.failures[0].find("mt-") != std::string::npos);

  const std::string trace = format_trace(caught.machine);
  CHECK(trace.find("violation step=") != std::string::npos);
}

TEST_CASE("scenario sweeps") {
  std::uint64_t entry_off = 0;
  const auto safe = gate_program(&entry_off);
  std::string text;
  text += "code 0x400000 0 " + hex(safe) + "\n";
  text += "data 0x600000 0x1000 1\n";
  text += "data 0x7ff000 0x1000 0\n";
  std::ostringstream e;
  e << "entry 0x" << std::hex << (0x400000 + entry_off) << "\n";
  text += e.str();
  text += "trusted-range 0x400000 0x401000\n";
  text += "sweep 0x400000 0x400080 8 1500\n";
  text += "expect-sweep-clean\n";
  const ScenarioResult clean = run_scenario(text);
  CHECK(clean.ok());
  REQUIRE(clean.sweep.has_value());
  CHECK(clean.sweep->offsets == 0x80);

  const auto leaky = leaky_program();
  std::string bad;
  bad += "code 0x400000 0 " + hex(leaky) + "\n";
  bad += "data 0x600000 0x1000 1\n";
  bad += "data 0x7ff000 0x1000 0\n";
  bad += "sweep 0x400000 0x400040 8 1500\n";
  bad += "expect-sweep-hits\n";
  const ScenarioResult dirty = run_scenario(bad);
  CHECK(dirty.ok());

  ScenarioOptions forced;
  forced.force_sweep = true;
  std::string nosweep;
  nosweep += "code 0x400000 0 " + hex(leaky) + "\n";
  nosweep += "data 0x600000 0x1000 1\n";
  nosweep += "data 0x7ff000 0x1000 0\n";
  const ScenarioResult fs = run_scenario(nosweep, forced);
  REQUIRE(fs.sweep.has_value());
  CHECK_FALSE(fs.sweep->clean());
}

TEST_CASE("scenario parse errors carry line numbers") {
  const ScenarioResult r1 = run_scenario("frobnicate 1\n");
  REQUIRE(r1.errors.size() == 1);
  CHECK(r1.errors[0].find("line 1") != std::string::npos);

  const ScenarioResult r2 = run_scenario("# fine\nthread zz 0\n");
  REQUIRE(r2.errors.size() == 1);
  CHECK(r2.errors[0].find("line 2") != std::string::npos);
  CHECK(r2.errors[0].find("zz") != std::string::npos);

  const ScenarioResult r3 = run_scenario("code 0x400000 0 9g\n");
  REQUIRE(r3.errors.size() == 1);
  CHECK(r3.errors[0].find("hex") != std::string::npos);
  CHECK_FALSE(r3.usable());

  const ScenarioResult r4 = run_scenario("run 10 10 10\n");
  CHECK(r4.errors.size() == 1);
}

TEST_CASE("scenario domain directives") {
  std::string bad;
  bad += "domains 3\n";
  bad += "trust 2 1\n";
  bad += "trust 1 0\n";
  bad += "domains-check fail\n";
  CHECK(run_scenario(bad).ok());

  std::string good;
  good += "domains 3\n";
  good += "trust 2 1\n";
  good += "trust 1 0\n";
  good += "trust 2 0\n";
  good += "domains-check pass\n";
  good += "thread-component 0x400000 0x800000 2\n";
  const ScenarioResult res = run_scenario(good);
  CHECK(res.ok());
  REQUIRE(res.machine.threads.size() == 1);
  CHECK(res.machine.threads[0].st.pkru == 0x3F);

  std::string invalid_spawn;
  invalid_spawn += "domains 3\n";
  invalid_spawn += "trust 2 1\n";
  invalid_spawn += "trust 1 0\n";
  invalid_spawn += "thread-component 0x400000 0x800000 2\n";
  CHECK_FALSE(run_scenario(invalid_spawn).usable());
}

TEST_CASE("scenario seed override") {
  std::string text = "seed 5\n";
  ScenarioOptions opt;
  opt.seed = 99;
  const ScenarioResult res = run_scenario(text, opt);
  CHECK(res.machine.cfg.seed == 99);
  CHECK(run_scenario(text).machine.cfg.seed == 5);
}

TEST_CASE("scenario loads an elf image") {
  std::string text;
  text += "image " ERIM_FIXTURE_BIN "\n";
  text += "data 0x7ff000 0x1000 0\n";
  text += "thread-at-entry 0x800000\n";
  text += "run 50\n";
  text += "expect-exit 0\n";
  const ScenarioResult res = run_scenario(text);
  CHECK(res.errors.empty());
  CHECK(res.failures.empty());
  CHECK_FALSE(res.machine.entries.empty());
}
