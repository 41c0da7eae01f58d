#pragma once

// Text scenarios for the abstract machine: one directive per line, '#'
// comments. Directives build a Machine (map memory, load images, register
// entries, configure domains and policy), drive it (thread, signal, run,
// sweep) and assert on the outcome (expect-*). Parse or configuration
// problems land in `errors`; failed expectations land in `failures`.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "erimforge/sim.hpp"

namespace erim {

struct ScenarioOptions {
  std::optional<std::uint64_t> seed;  // overrides seed directives
  std::string base_dir;               // prefix for relative image paths
  bool force_sweep = false;  // run a default sweep when the text ran none
};

struct ScenarioResult {
  std::vector<std::string> errors;    // syntax or configuration problems
  std::vector<std::string> failures;  // expectations that did not hold
  Machine machine;
  std::optional<SweepReport> sweep;

  bool usable() const { return errors.empty(); }
  bool ok() const { return errors.empty() && failures.empty(); }
};

ScenarioResult run_scenario(std::string_view text,
                            const ScenarioOptions& opt = {});

// One line per recorded event: step, thread, pc, pkru, event, a, b.
// Violations follow under the same format with a "violation " prefix.
std::string format_trace(const Machine& m);

}  // namespace erim
