#pragma once

// Classifies every WRPKRU/XRSTOR occurrence in executable bytes as safe or
// unsafe. An occurrence is safe only if execution cannot pass through it
// without either landing on a designated entry point or running a canonical
// kill guard, checked bit-exactly against the bytes that follow the
// occurrence window.

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "erimforge/bytescan.hpp"
#include "erimforge/pkru.hpp"

namespace erim {

struct InspectorConfig {
  // Absolute addresses of designated trusted-entry points.
  std::set<std::uint64_t> entries;
  // Immediates the compare guard may test against. A guard comparing with
  // any other value does not prove the write was a domain exit.
  std::vector<std::uint32_t> accepted_disallow = {
      pkru::kDisallowTrusted, pkru::kDisallowTrustedWrites};
};

enum class Verdict {
  EntryTransfer,      // next address is an entry point or directly reaches one
  CompareGuard,       // canonical compare-and-terminate guard follows
  BitTestGuard,       // canonical bit-test-and-terminate guard follows
  Unsafe,
  NonExecutableData,  // occurrence lies entirely in non-executable pages
};

const char* verdict_name(Verdict v);

struct SafetyFinding {
  Occurrence occ;
  Verdict verdict = Verdict::Unsafe;
  std::string evidence;

  bool safe() const { return verdict != Verdict::Unsafe; }
};

struct InspectionReport {
  std::vector<SafetyFinding> findings;
  std::uint64_t pages_scanned = 0;
  double seconds = 0;

  // Passes iff nothing is Unsafe; data-only occurrences do not fail it.
  bool pass() const;
  std::size_t unsafe_count() const;
};

// Classifies one occurrence against a contiguous executable region starting
// at absolute address `base`. Guard bytes truncated by the region end are
// conservatively Unsafe.
Verdict classify(std::span<const std::uint8_t> code, std::uint64_t base,
                 const Occurrence& occ, const InspectorConfig& cfg,
                 std::string* evidence = nullptr);

// Scans and classifies a contiguous executable region.
InspectionReport inspect_region(std::span<const std::uint8_t> code,
                                std::uint64_t base,
                                const InspectorConfig& cfg);

// Scans and classifies a page set. Occurrences on executable pages are
// classified as in inspect_region, with instruction and guard bytes read
// only from executable pages; occurrences entirely on non-executable pages
// are reported as NonExecutableData and never fail the report.
InspectionReport inspect_pages(
    std::span<const PageBytes> pages,
    const std::function<bool(std::uint64_t)>& executable,
    const InspectorConfig& cfg);

}  // namespace erim
