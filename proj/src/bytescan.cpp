#include "erimforge/bytescan.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace erim {

std::optional<PatternKind> match_window(const std::uint8_t* w) {
  if (w[0] != 0x0f) return std::nullopt;
  if (w[1] == 0x01 && w[2] == 0xef) return PatternKind::Wrpkru;
  if (w[1] == 0xae) {
    const std::uint8_t hi = w[2] >> 4;
    const std::uint8_t lo = w[2] & 0x0f;
    if ((hi == 0x2 || hi == 0x6 || hi == 0xa) && lo >= 0x8)
      return PatternKind::Xrstor;
  }
  return std::nullopt;
}

namespace {

bool spans_page(std::uint64_t offset) {
  return (offset % kPageSize) + 3 > kPageSize;
}

// Scans window starts [first, last) of buffer. base is added to offsets.
void scan_range(std::span<const std::uint8_t> buffer, std::size_t first,
                std::size_t last, std::uint64_t base,
                std::vector<Occurrence>& out) {
  const std::uint8_t* p = buffer.data();
  for (std::size_t i = first; i < last; ++i) {
    if (auto kind = match_window(p + i)) {
      const std::uint64_t off = base + i;
      out.push_back(Occurrence{*kind, off, 3, spans_page(off)});
    }
  }
}

}  // namespace

std::vector<Occurrence> scan_serial(std::span<const std::uint8_t> buffer,
                                    std::uint64_t base) {
  std::vector<Occurrence> out;
  if (buffer.size() < 3) return out;
  scan_range(buffer, 0, buffer.size() - 2, base, out);
  return out;
}

std::vector<Occurrence> scan(std::span<const std::uint8_t> buffer,
                             std::uint64_t base) {
#ifdef _OPENMP
  constexpr std::size_t kChunk = 1u << 18;
  if (buffer.size() >= 2 * kChunk) {
    // Each chunk owns a contiguous range of window starts; a window may read
    // up to 2 bytes past its chunk, which is fine in the shared buffer. Chunk
    // order gives sorted output without a merge pass.
    const std::size_t starts = buffer.size() - 2;
    const std::size_t chunks = (starts + kChunk - 1) / kChunk;
    std::vector<std::vector<Occurrence>> parts(chunks);
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t first = c * kChunk;
      const std::size_t last = std::min(first + kChunk, starts);
      scan_range(buffer, first, last, base, parts[c]);
    }
    std::vector<Occurrence> out;
    for (auto& part : parts)
      out.insert(out.end(), part.begin(), part.end());
    return out;
  }
#endif
  return scan_serial(buffer, base);
}

std::vector<Occurrence> scan_pages(
    std::span<const PageBytes> pages,
    const std::function<bool(std::uint64_t)>& executable) {
  std::map<std::uint64_t, std::span<const std::uint8_t>> by_index;
  for (const PageBytes& p : pages) {
    if (p.bytes.size() != kPageSize)
      throw std::invalid_argument("scan_pages: page must be 4096 bytes");
    if (!by_index.emplace(p.index, p.bytes).second)
      throw std::invalid_argument("scan_pages: duplicate page index");
  }

  std::vector<Occurrence> out;
  for (const auto& [index, bytes] : by_index) {
    if (!executable(index)) continue;
    const std::uint64_t base = index * kPageSize;
    scan_range(bytes, 0, kPageSize - 2, base, out);

    // Windows starting in the last two bytes continue into the next page;
    // they count only when that page is adjacent, present and executable.
    auto next = by_index.find(index + 1);
    if (next == by_index.end() || !executable(index + 1)) continue;
    std::uint8_t w[3];
    for (std::size_t i = kPageSize - 2; i < kPageSize; ++i) {
      w[0] = bytes[i];
      w[1] = i + 1 < kPageSize ? bytes[i + 1] : next->second[i + 1 - kPageSize];
      w[2] = next->second[i + 2 - kPageSize];
      if (auto kind = match_window(w))
        out.push_back(Occurrence{*kind, base + i, 3, true});
    }
  }
  return out;
}

}  // namespace erim
