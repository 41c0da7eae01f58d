#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "erimforge/bytescan.hpp"
#include "erimforge/pkru.hpp"
#include "erimforge/x86.hpp"

namespace erim {

// Where an occurrence window sits relative to the instruction stream.
enum class OverlapClass : std::uint8_t {
  OpcodeExact,       // the window is a real wrpkru/xrstor opcode
  ModRm,             // window intersects the ModRM or SIB byte
  Displacement,      // window intersects a displacement field
  Immediate,         // window intersects an immediate field
  CrossInstruction,  // window spans an instruction boundary
};

const char* overlap_name(OverlapClass c);

enum class RewriteStatus : std::uint8_t {
  Ok,
  NotInSubset,          // code around the window cannot be decoded
  NoApplicableRule,     // every candidate replacement was rejected
  RelocationOverflow,   // a branch cannot reach its target after layout
  TargetInsideAbsorbed, // a branch lands inside code a detour displaced
  IterationLimit,       // rewriting did not reach a fixed point
};

const char* status_name(RewriteStatus s);

struct OverlapInfo {
  OverlapClass cls{};
  std::uint64_t instr_begin = 0;  // start of the first instruction touched
  std::uint64_t instr_end = 0;    // end of the last instruction touched
};

struct RewritePolicy {
  // Constant the kill guard compares against after an inserted wrpkru.
  std::uint32_t disallow_constant = pkru::kDisallowTrusted;

  // Permits replacements whose arithmetic leaves different flags behind
  // than the original instruction (address folding with add, immediate
  // splitting). Plans produced this way set clobbers_flags.
  bool allow_flag_clobber = false;

  // Prefer splitting an immediate into two associative halves over
  // materializing it through a scratch register. Needs allow_flag_clobber.
  bool prefer_assoc_split = false;

  // Asserts that a register the instruction does not reference holds a dead
  // value, letting plans overwrite it without saving it. Off by default:
  // liveness is unknowable here, so plans spill the scratch instead.
  bool assume_scratch_dead = false;

  // Always save and restore the scratch register around the replacement,
  // even when assume_scratch_dead would permit using it directly.
  bool force_spill = false;

  // When non-empty, scratch registers are drawn only from this list, in
  // order. rsp and rbp are never used regardless.
  std::vector<x86::Reg> scratch_candidates;
};

// A self-contained replacement for one occurrence. Offsets are relative to
// the start of the buffer handed to plan_rewrite. begin == end describes a
// pure insertion at that offset.
struct RewritePlan {
  int rule = 0;  // 1..7; 0 for the cross-instruction pad
  OverlapClass cls{};
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::vector<std::uint8_t> replacement;
  std::optional<x86::Reg> scratch;
  bool spilled = false;         // replacement saves/restores the scratch
  bool clobbers_flags = false;  // replacement may leave different flags
};

RewriteStatus locate_overlap(std::span<const std::uint8_t> code,
                             std::uint64_t base, const Occurrence& occ,
                             OverlapInfo* out, std::string* why = nullptr);

// Plans the elimination of one occurrence. The buffer must decode linearly
// from its start. The plan's replacement never contains an unguarded
// occurrence of either pattern.
RewriteStatus plan_rewrite(std::span<const std::uint8_t> code,
                           std::uint64_t base, const Occurrence& occ,
                           const RewritePolicy& policy, RewritePlan* out,
                           std::string* why = nullptr);

enum class GrowthMode : std::uint8_t {
  Shift,       // splice replacements in, shifting later code
  Trampoline,  // keep the layout; detour oversized replacements to the end
};

struct ApplyResult {
  RewriteStatus status = RewriteStatus::Ok;
  std::vector<std::uint8_t> bytes;
  // offset_map[i] is the new offset of original offset i; the final entry
  // maps the old end to the new end. Identity in Trampoline mode.
  std::vector<std::uint64_t> offset_map;
  unsigned detours = 0;  // plans placed out of line in Trampoline mode
  std::string error;
};

// Splices the plans into the buffer. Shift mode re-displaces every relative
// branch and rip-relative operand, widening rel8 branches that fall out of
// range. Plans must not overlap.
ApplyResult apply_plans(std::span<const std::uint8_t> code,
                        std::vector<RewritePlan> plans, GrowthMode mode);

struct PlanNote {
  unsigned iteration = 0;
  int rule = 0;
  OverlapClass cls{};
  std::uint64_t begin = 0;  // in the coordinates of that iteration's input
};

struct RewriteResult {
  RewriteStatus status = RewriteStatus::Ok;
  std::vector<std::uint8_t> bytes;
  std::vector<std::uint64_t> offset_map;  // original offset -> final offset
  std::set<std::uint64_t> entries;        // remapped call gate entry points
  unsigned iterations = 0;
  unsigned detours = 0;
  std::vector<PlanNote> plans;
  std::string error;
};

// Scans, plans and applies until inspection reports no unsafe occurrence.
// entries are absolute addresses of designated call gate entry points; the
// result carries them remapped through the layout changes.
RewriteResult rewrite_all(std::span<const std::uint8_t> code,
                          std::uint64_t base,
                          const std::set<std::uint64_t>& entries,
                          const RewritePolicy& policy = {},
                          GrowthMode mode = GrowthMode::Shift);

// State of one page under the on-demand rewriting protocol. The reserve
// holds the original content and is never executed; current starts as all
// trap bytes and accumulates vetted code, growing past the page size when
// detours overflow.
struct RuntimePageState {
  std::vector<std::uint8_t> reserve;
  std::vector<std::uint8_t> current;
  std::set<std::uint64_t> entries_done;
  std::map<std::uint64_t, std::uint8_t> vetted;  // instr offset -> length
};

RuntimePageState runtime_page_init(std::vector<std::uint8_t> page);

// Handles a fault at entry: disassembles the reserve linearly from there
// until a return, an unconditional jump, a trap or the page end, rewrites
// every occurrence discovered so far and rebuilds current from scratch.
// Unvetted bytes stay traps. Each entry is processed at most once.
RewriteStatus runtime_rewrite(RuntimePageState& state, std::uint64_t entry,
                              const RewritePolicy& policy = {},
                              std::string* why = nullptr);

}  // namespace erim
