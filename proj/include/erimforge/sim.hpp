#pragma once

// Abstract machine with MPK-style page domains, per-thread PKRU, call-gate
// entry points, syscall interception, on-demand code inspection and a
// deterministic multi-thread scheduler. The PKRU convention is set-bit
// GRANTS (see pkru.hpp); translate at the boundary if hardware parity is
// ever needed.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "erimforge/interp.hpp"
#include "erimforge/pkru.hpp"
#include "erimforge/rewrite.hpp"

namespace erim {

inline constexpr std::uint64_t kSimPage = 4096;

enum class PageState : std::uint8_t {
  Normal,      // content live in the page
  Pending,     // mapped readable, execution faults until inspected
  TrapFilled,  // content served from a runtime-rewrite region
};

struct SimPage {
  std::uint8_t domain = 0;
  bool r = false, w = false, x = false;
  PageState state = PageState::Normal;
  std::vector<std::uint8_t> bytes;  // kSimPage; unused for TrapFilled
  int region = -1;                  // trap region index when TrapFilled
};

// One on-demand-rewritten code region: a reserve page plus room for detour
// overflow, mapped contiguously after it.
struct TrapRegion {
  std::uint64_t base = 0;         // vaddr of the code page
  std::uint64_t room = kSimPage;  // mapped bytes including overflow pages
  RuntimePageState rt;
};

enum class SimMode : std::uint8_t { FullIsolation, IntegrityOnly };
enum class InspectWhen : std::uint8_t { Eager, OnDemand };

struct SimConfig {
  SimMode mode = SimMode::FullIsolation;
  InspectWhen inspect = InspectWhen::Eager;
  // When an inspection at an execution fault fails, rewrite the page on
  // the fly instead of terminating.
  bool rewrite_on_fault = false;
  // Skip all inspection (baseline runs of unprotected images).
  bool inspection_enabled = true;
  std::uint32_t thread_start_pkru = pkru::kDisallowTrusted;
  std::uint8_t trusted_domain = pkru::kTrustedDomain;
  // Syscall numbers denied unless the caller's PKRU grants trusted writes.
  std::set<std::uint64_t> u_denied_syscalls;
  // Memory faults end the run and are recorded instead of terminating the
  // whole machine; used by the attack sweep.
  bool record_and_continue = false;
  // Track that every PKRU raise either reaches a designated entry point at
  // once or terminates through a kill guard without touching trusted
  // memory.
  bool check_entry_transition = true;
  std::uint64_t seed = 1;
};

struct TraceEvent {
  std::uint64_t step = 0;
  int thread = 0;
  std::uint64_t pc = 0;
  std::uint32_t pkru = 0;
  std::string event;  // "syscall", "denied-store", "signal", ...
  std::uint64_t a = 0, b = 0;

  bool operator==(const TraceEvent&) const = default;
};

struct SimThread {
  int id = 0;
  MachineState st;
  std::uint64_t stack_lo = 0, stack_hi = 0;
  bool alive = true;
  std::optional<std::uint64_t> pending_signal;  // handler address
  // Steps left to reach an entry point after a PKRU raise; -1 disarmed.
  int entry_grace = -1;
};

struct Pool {
  std::uint64_t base = 0, size = 0, used = 0;
};

struct DomainConfig {
  unsigned domains = 2;
  // trusts (a, b): component a may access component b's memory.
  std::set<std::pair<unsigned, unsigned>> trust;
};

// Validates transitivity and returns the PKRU value for a component under
// the closure of the trust relation (own domain always granted). Returns
// false on a non-transitive relation or a domain id out of range.
bool validate_domains(const DomainConfig& cfg, std::string* error = nullptr);
std::uint32_t pkru_for_component(const DomainConfig& cfg, unsigned component);

class Machine {
 public:
  SimConfig cfg;
  std::map<std::uint64_t, SimPage> pages;  // keyed by vaddr / kSimPage
  std::vector<TrapRegion> trap_regions;
  std::vector<SimThread> threads;
  std::set<std::uint64_t> entries;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> trusted_code;
  std::array<Pool, pkru::kDomainCount> pools{};
  std::vector<TraceEvent> trace;
  std::vector<TraceEvent> violations;
  std::vector<std::uint8_t> output;  // bytes written to fd 1
  bool exited = false;
  int exit_code = 0;
  std::uint64_t steps = 0;  // scheduler ticks, committed or fault handling
  std::uint64_t trace_dropped = 0;       // events past the recording cap
  std::uint64_t violations_overflow = 0;

  // Maps [vaddr, vaddr+size) with one permission set; vaddr and size must
  // be page aligned, W and X are mutually exclusive, content shorter than
  // size is zero padded. Fails (returns false) on overlap or bad args.
  bool map_region(std::uint64_t vaddr, std::uint64_t size,
                  std::uint8_t domain, bool r, bool w, bool x,
                  std::span<const std::uint8_t> content = {},
                  PageState state = PageState::Normal);

  // Maps a code page under the on-demand rewriting protocol with
  // room - kSimPage bytes of contiguous overflow space for detours.
  bool map_trap_region(std::uint64_t vaddr,
                       std::span<const std::uint8_t> content,
                       std::uint8_t domain, std::uint64_t room = 4 * kSimPage);

  void add_entry(std::uint64_t addr) { entries.insert(addr); }
  void add_trusted_code(std::uint64_t lo, std::uint64_t hi) {
    trusted_code.emplace_back(lo, hi);
  }
  bool in_trusted_code(std::uint64_t pc) const;

  void set_pool(std::uint8_t domain, std::uint64_t base, std::uint64_t size);

  int spawn_thread(std::uint64_t rip, std::uint64_t stack_top,
                   std::optional<std::uint32_t> pkru = std::nullopt);

  // Schedules the handler on the thread; PKRU resets to untrusted-only
  // before the handler runs. at_step delays delivery until the global step
  // counter reaches that value.
  void inject_signal(int thread, std::uint64_t handler,
                     std::optional<std::uint64_t> at_step = std::nullopt);

  // Inspects every executable range; false (with the machine flagged
  // exited) when an unsafe occurrence is present and inspection is on.
  bool startup_inspect();

  // Serves size bytes from the pool of the highest domain the thread's
  // PKRU grants write on; 0 when no pool matches or the pool is exhausted.
  std::uint64_t domain_alloc(int thread, std::uint64_t size);

  // Runs until exit, no runnable thread, or the step budget; deterministic
  // for a fixed seed and machine.
  void run_machine(std::uint64_t max_steps);

  // Advances exactly one scheduled thread by one committed step (or one
  // fault-handling action). False when nothing is runnable.
  bool step_once();

  // Reads simulated memory (for checks); false if any byte is unmapped.
  bool peek(std::uint64_t addr, std::span<std::uint8_t> out) const;

  // True when the byte at addr lies in a mapped executable page.
  bool executable_at(std::uint64_t addr) const;

 private:
  friend class MachineEnv;
  std::uint64_t sched_rr_ = 0;
  std::uint64_t sched_quantum_ = 0;
  std::uint64_t rng_ = 0;
  std::uint64_t mmap_next_ = 0x7F0000000000;

  struct Pending {
    int thread;
    std::uint64_t handler;
    std::optional<std::uint64_t> at_step;
  };
  std::vector<Pending> signal_queue_;

  std::uint64_t next_rng();
  SimPage* page_at(std::uint64_t addr);
  const SimPage* page_at(std::uint64_t addr) const;
  void record(const SimThread& t, std::string event, std::uint64_t a = 0,
              std::uint64_t b = 0);
  void violation(const SimThread& t, std::string what, std::uint64_t a = 0,
                 std::uint64_t b = 0);
  void terminate(SimThread& t, const std::string& why, std::uint64_t addr);
  void deliver_signal(SimThread& t, std::uint64_t handler);
  bool exec_fault(SimThread& t, std::uint64_t addr);
  bool trap_fault(SimThread& t);
  Env::Sys do_syscall(SimThread& t, MachineState& st);
  bool step_thread(SimThread& t);
};

struct SweepHit {
  std::uint64_t start = 0;   // attack entry pc
  std::uint64_t preset = 0;  // register preset index
  std::uint64_t pc = 0;      // pc of the violating access
  std::uint64_t addr = 0;    // trusted address touched
  bool write = false;
};

struct SweepReport {
  std::uint64_t offsets = 0;
  std::uint64_t runs = 0;
  std::uint64_t budget_out = 0;  // runs classified "no violation (budget)"
  std::vector<SweepHit> hits;

  bool clean() const { return hits.empty(); }
};

// Seeded attacker register files; rsp points into [stack_lo, stack_hi).
std::vector<MachineState> sweep_presets(std::uint64_t seed, std::size_t count,
                                        std::uint64_t stack_lo,
                                        std::uint64_t stack_hi);

// Starts a bounded run at every executable byte in [lo, hi) under each
// preset with PKRU pinned to untrusted-only, recording every successful
// trusted-domain access whose pc lies outside the registered trusted code.
// Deterministic; parallelizes over offsets when built with OpenMP.
SweepReport attack_sweep(const Machine& proto, std::uint64_t lo,
                         std::uint64_t hi,
                         const std::vector<MachineState>& presets,
                         std::uint64_t budget = 100000);

}  // namespace erim
