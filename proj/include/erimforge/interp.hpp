#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include "erimforge/x86.hpp"

namespace erim {

struct Flags {
  bool cf = false, zf = false, sf = false, of = false;
  bool operator==(const Flags&) const = default;
};

struct MachineState {
  std::array<std::uint64_t, 16> regs{};
  Flags flags{};
  std::uint64_t rip = 0;
  std::uint32_t pkru = 0;

  std::uint64_t& reg(x86::Reg r) { return regs[x86::reg_id(r)]; }
  std::uint64_t reg(x86::Reg r) const { return regs[x86::reg_id(r)]; }

  bool operator==(const MachineState&) const = default;
};

enum class MemStatus : std::uint8_t { Ok, Unmapped, Denied };
enum class Access : std::uint8_t { Read, Write, Fetch };

// Execution environment: memory, syscalls, control-transfer reporting. Every
// access goes through here before any state commits, so an implementation
// can veto or record each one.
class Env {
 public:
  virtual ~Env() = default;

  virtual MemStatus load(std::uint64_t addr, std::size_t n,
                         std::uint8_t* out) = 0;
  virtual MemStatus store(std::uint64_t addr, std::size_t n,
                          const std::uint8_t* src) = 0;

  // Fills out[0..n) as far as bytes are fetchable; returns the count and
  // reports the blocking status for the first unavailable byte.
  virtual std::size_t fetch(std::uint64_t addr, std::size_t n,
                            std::uint8_t* out, MemStatus& tail) = 0;

  struct Sys {
    bool exits = false;
    int exit_code = 0;
    std::uint64_t rax = 0;  // result when not exiting
  };
  virtual Sys syscall(MachineState& st) = 0;

  // Explicit control transfer (branch/call/ret), reported before commit.
  virtual void control(std::uint64_t from, std::uint64_t to) {
    (void)from;
    (void)to;
  }
};

enum class StepKind : std::uint8_t { Ok, Exit, Fault };

enum class FaultKind : std::uint8_t {
  None,
  NotInSubset,
  TruncatedFetch,
  Unmapped,
  Denied,
  WrpkruOperands,  // wrpkru with ecx or edx nonzero
  Trap,            // int3
};

struct StepResult {
  StepKind kind = StepKind::Ok;
  FaultKind fault = FaultKind::None;
  int exit_code = 0;
  std::uint64_t fault_addr = 0;  // valid for memory faults
  x86::Mn mn{};                  // decoded mnemonic when decode succeeded
  std::uint8_t length = 0;
  bool pkru_written = false;
  std::uint32_t pkru_before = 0;
};

// Executes one instruction at st.rip. On Ok the state is committed; on Fault
// no architectural state changed (rip still points at the faulting
// instruction).
StepResult interp_step(MachineState& st, Env& env);

struct RunResult {
  StepKind kind = StepKind::Ok;  // Ok means the step budget ran out
  FaultKind fault = FaultKind::None;
  int exit_code = 0;
  std::uint64_t steps = 0;
  bool hit_watch = false;
  MachineState at_watch{};
};

// Steps until exit, fault, or max_steps. If watch_pc is set, snapshots the
// state the first time rip equals it (before executing that instruction).
RunResult run(MachineState& st, Env& env, std::uint64_t max_steps,
              std::optional<std::uint64_t> watch_pc = std::nullopt);

}  // namespace erim
