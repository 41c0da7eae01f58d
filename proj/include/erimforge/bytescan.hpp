#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace erim {

inline constexpr std::size_t kPageSize = 4096;

enum class PatternKind : std::uint8_t { Wrpkru, Xrstor };

// One pattern hit. offset is absolute (base + window position), length is
// always 3; page_span marks a hit whose three bytes straddle a page boundary.
struct Occurrence {
  PatternKind kind;
  std::uint64_t offset;
  std::uint32_t length;
  bool page_span;

  bool operator==(const Occurrence&) const = default;
};

// Matches one 3-byte window against both patterns. w must point at 3 readable
// bytes. WRPKRU is the exact encoding 0f 01 ef; the XRSTOR memory forms all
// encode as 0f ae followed by a byte whose high nibble is 2, 6 or a and whose
// low nibble is 8..f.
std::optional<PatternKind> match_window(const std::uint8_t* w);

// Scans every window start in buffer; occurrences come back sorted ascending
// by offset. Parallelizes internally over chunks of window starts when built
// with OpenMP; output is identical to scan_serial either way.
std::vector<Occurrence> scan(std::span<const std::uint8_t> buffer,
                             std::uint64_t base = 0);

// Reference kernel: one thread, one pass.
std::vector<Occurrence> scan_serial(std::span<const std::uint8_t> buffer,
                                    std::uint64_t base = 0);

struct PageBytes {
  std::uint64_t index;
  std::span<const std::uint8_t> bytes;  // exactly kPageSize bytes
};

// Scans executable pages, including windows straddling two adjacent pages
// when both are executable. A window straddling into (or out of) a
// non-executable or absent page is not reported. Throws std::invalid_argument
// on a wrong page size or a duplicate page index.
std::vector<Occurrence> scan_pages(
    std::span<const PageBytes> pages,
    const std::function<bool(std::uint64_t)>& executable);

}  // namespace erim
