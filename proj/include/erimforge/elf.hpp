#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace erim {

// One PT_LOAD program header worth of image content. In raw mode the whole
// file is a single executable segment at virtual address 0.
struct Segment {
  std::uint64_t file_offset = 0;
  std::uint64_t file_size = 0;
  std::uint64_t vaddr = 0;
  std::uint64_t mem_size = 0;
  bool r = false;
  bool w = false;
  bool x = false;
};

struct SymbolRef {
  std::string name;
  std::uint64_t addr = 0;
};

struct LoadedImage {
  std::vector<std::uint8_t> bytes;  // entire file
  std::vector<Segment> segments;    // sorted by vaddr, non-overlapping
  std::vector<SymbolRef> symbols;
  std::uint64_t entry = 0;
  bool raw = false;
};

enum class ImageMode : std::uint8_t { Elf, Raw };

struct LoadResult {
  bool ok = false;
  LoadedImage image;
  std::string error;
};

// Parses little-endian ELF64 by program headers only; section headers are
// consulted just for .symtab/.dynsym when present, so stripped binaries
// load fine. Segments that are both writable and executable are rejected.
LoadResult load_image(std::span<const std::uint8_t> bytes, ImageMode mode);
LoadResult load_image_file(const std::string& path, ImageMode mode);

// File content of one segment.
std::span<const std::uint8_t> segment_bytes(const LoadedImage& image,
                                            const Segment& seg);

// Addresses of symbols whose name contains the marker substring.
std::set<std::uint64_t> entry_points(const LoadedImage& image,
                                     std::string_view marker = "erim_entry");

// Entry-list text: one hex address per line, '#' starts a comment.
struct EntryListResult {
  bool ok = false;
  std::set<std::uint64_t> entries;
  std::string error;
};
EntryListResult parse_entry_list(std::string_view text);

// Replacement content for one executable segment. The first file_size
// bytes overwrite the segment in place; anything beyond becomes a new
// executable-only region mapped contiguously after the segment, so detour
// displacements keep working.
struct RewrittenSegment {
  std::size_t segment_index = 0;
  std::vector<std::uint8_t> bytes;
};

struct StoreResult {
  bool ok = false;
  std::vector<std::uint8_t> bytes;
  std::string error;
};

// Serializes the image with the given segments replaced. Overflow tails
// append one PT_LOAD R+X entry each; the program header table moves to the
// end of the file to make room. Tail placement that would collide with an
// existing segment is a layout overflow error.
StoreResult store_rewritten(const LoadedImage& image,
                            const std::vector<RewrittenSegment>& rewritten);

}  // namespace erim
