#include "erimforge/elf.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace erim {
namespace {

constexpr std::uint32_t kPtLoad = 1;
constexpr std::uint32_t kPfX = 1;
constexpr std::uint32_t kPfW = 2;
constexpr std::uint32_t kPfR = 4;
constexpr std::uint32_t kShtSymtab = 2;
constexpr std::uint32_t kShtDynsym = 11;

template <typename T>
T read_le(std::span<const std::uint8_t> b, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<std::uint64_t>(b[at + i]) << (8 * i));
  return v;
}

template <typename T>
void write_le(std::vector<std::uint8_t>& b, std::size_t at, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

bool in_file(std::span<const std::uint8_t> b, std::uint64_t off,
             std::uint64_t len) {
  return off <= b.size() && len <= b.size() - off;
}

LoadResult fail(std::string msg) {
  LoadResult r;
  r.error = std::move(msg);
  return r;
}

void read_symbols(LoadedImage& img, std::span<const std::uint8_t> b) {
  const std::uint64_t shoff = read_le<std::uint64_t>(b, 0x28);
  const std::uint16_t shentsize = read_le<std::uint16_t>(b, 0x3A);
  const std::uint16_t shnum = read_le<std::uint16_t>(b, 0x3C);
  if (shoff == 0 || shnum == 0 || shentsize < 64) return;
  if (!in_file(b, shoff, std::uint64_t(shentsize) * shnum)) return;
  for (std::uint16_t i = 0; i < shnum; ++i) {
    const std::uint64_t sh = shoff + std::uint64_t(shentsize) * i;
    const std::uint32_t type = read_le<std::uint32_t>(b, sh + 0x04);
    if (type != kShtSymtab && type != kShtDynsym) continue;
    const std::uint64_t off = read_le<std::uint64_t>(b, sh + 0x18);
    const std::uint64_t size = read_le<std::uint64_t>(b, sh + 0x20);
    const std::uint32_t link = read_le<std::uint32_t>(b, sh + 0x28);
    const std::uint64_t entsize = read_le<std::uint64_t>(b, sh + 0x38);
    if (entsize < 24 || !in_file(b, off, size) || link >= shnum) continue;
    const std::uint64_t strsh = shoff + std::uint64_t(shentsize) * link;
    const std::uint64_t stroff = read_le<std::uint64_t>(b, strsh + 0x18);
    const std::uint64_t strsize = read_le<std::uint64_t>(b, strsh + 0x20);
    if (!in_file(b, stroff, strsize)) continue;
    for (std::uint64_t s = 0; s + entsize <= size; s += entsize) {
      const std::uint64_t sym = off + s;
      const std::uint32_t name = read_le<std::uint32_t>(b, sym);
      const std::uint16_t shndx = read_le<std::uint16_t>(b, sym + 6);
      if (name == 0 || name >= strsize || shndx == 0) continue;
      const char* p = reinterpret_cast<const char*>(b.data() + stroff + name);
      const std::size_t maxlen = strsize - name;
      const std::size_t len = strnlen(p, maxlen);
      if (len == 0 || len == maxlen) continue;
      img.symbols.push_back(
          {std::string(p, len), read_le<std::uint64_t>(b, sym + 8)});
    }
  }
}

}  // namespace

LoadResult load_image(std::span<const std::uint8_t> bytes, ImageMode mode) {
  LoadResult r;
  r.image.bytes.assign(bytes.begin(), bytes.end());
  if (mode == ImageMode::Raw) {
    Segment s;
    s.file_size = bytes.size();
    s.mem_size = bytes.size();
    s.r = true;
    s.x = true;
    r.image.segments.push_back(s);
    r.image.raw = true;
    r.ok = true;
    return r;
  }
  if (bytes.size() < 0x40) return fail("file too short for an ELF64 header");
  if (bytes[0] != 0x7F || bytes[1] != 'E' || bytes[2] != 'L' ||
      bytes[3] != 'F')
    return fail("not an ELF file (bad magic)");
  if (bytes[4] != 2) return fail("32-bit ELF is not supported");
  if (bytes[5] != 1) return fail("big-endian ELF is not supported");
  const std::uint64_t phoff = read_le<std::uint64_t>(bytes, 0x20);
  const std::uint16_t phentsize = read_le<std::uint16_t>(bytes, 0x36);
  const std::uint16_t phnum = read_le<std::uint16_t>(bytes, 0x38);
  if (phnum == 0) return fail("no program headers");
  if (phentsize < 56) return fail("bad program header entry size");
  if (!in_file(bytes, phoff, std::uint64_t(phentsize) * phnum))
    return fail("program header table lies outside the file");
  r.image.entry = read_le<std::uint64_t>(bytes, 0x18);
  for (std::uint16_t i = 0; i < phnum; ++i) {
    const std::uint64_t ph = phoff + std::uint64_t(phentsize) * i;
    if (read_le<std::uint32_t>(bytes, ph) != kPtLoad) continue;
    const std::uint32_t flags = read_le<std::uint32_t>(bytes, ph + 0x04);
    Segment s;
    s.file_offset = read_le<std::uint64_t>(bytes, ph + 0x08);
    s.vaddr = read_le<std::uint64_t>(bytes, ph + 0x10);
    s.file_size = read_le<std::uint64_t>(bytes, ph + 0x20);
    s.mem_size = read_le<std::uint64_t>(bytes, ph + 0x28);
    s.r = flags & kPfR;
    s.w = flags & kPfW;
    s.x = flags & kPfX;
    if (s.w && s.x)
      return fail("segment is both writable and executable");
    if (!in_file(bytes, s.file_offset, s.file_size))
      return fail("segment content lies outside the file");
    if (s.mem_size < s.file_size) return fail("segment memory size too small");
    r.image.segments.push_back(s);
  }
  std::sort(r.image.segments.begin(), r.image.segments.end(),
            [](const Segment& a, const Segment& b) { return a.vaddr < b.vaddr; });
  for (std::size_t i = 1; i < r.image.segments.size(); ++i) {
    const Segment& a = r.image.segments[i - 1];
    const Segment& b = r.image.segments[i];
    if (a.vaddr + a.mem_size > b.vaddr)
      return fail("segment virtual ranges overlap");
  }
  read_symbols(r.image, bytes);
  r.ok = true;
  return r;
}

LoadResult load_image_file(const std::string& path, ImageMode mode) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return fail("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return load_image(bytes, mode);
}

std::span<const std::uint8_t> segment_bytes(const LoadedImage& image,
                                            const Segment& seg) {
  return std::span<const std::uint8_t>(image.bytes)
      .subspan(seg.file_offset, seg.file_size);
}

std::set<std::uint64_t> entry_points(const LoadedImage& image,
                                     std::string_view marker) {
  std::set<std::uint64_t> out;
  for (const SymbolRef& s : image.symbols)
    if (s.name.find(marker) != std::string::npos) out.insert(s.addr);
  return out;
}

EntryListResult parse_entry_list(std::string_view text) {
  EntryListResult r;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? text.size() - pos
                                                      : nl - pos);
    ++lineno;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (const std::size_t h = line.find('#'); h != std::string_view::npos)
      line = line.substr(0, h);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t'))
      line.remove_prefix(1);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' ||
                             line.back() == '\r'))
      line.remove_suffix(1);
    if (line.empty()) continue;
    if (line.starts_with("0x") || line.starts_with("0X"))
      line.remove_prefix(2);
    std::uint64_t v = 0;
    bool any = false;
    for (char c : line) {
      int d;
      if (c >= '0' && c <= '9') d = c - '0';
      else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
      else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
      else {
        r.error = "line " + std::to_string(lineno) + ": not a hex address";
        return r;
      }
      if (v >> 60) {
        r.error = "line " + std::to_string(lineno) + ": address overflows";
        return r;
      }
      v = v << 4 | static_cast<std::uint64_t>(d);
      any = true;
    }
    if (!any) {
      r.error = "line " + std::to_string(lineno) + ": empty address";
      return r;
    }
    r.entries.insert(v);
  }
  r.ok = true;
  return r;
}

StoreResult store_rewritten(const LoadedImage& image,
                            const std::vector<RewrittenSegment>& rewritten) {
  StoreResult r;
  r.bytes = image.bytes;
  struct Tail {
    std::uint64_t vaddr;
    std::vector<std::uint8_t> bytes;
  };
  std::vector<Tail> tails;
  for (const RewrittenSegment& rs : rewritten) {
    if (rs.segment_index >= image.segments.size()) {
      r.error = "segment index out of range";
      return r;
    }
    const Segment& seg = image.segments[rs.segment_index];
    if (rs.bytes.size() < seg.file_size) {
      r.error = "rewritten content shorter than the segment";
      return r;
    }
    std::copy(rs.bytes.begin(), rs.bytes.begin() + seg.file_size,
              r.bytes.begin() + seg.file_offset);
    if (rs.bytes.size() == seg.file_size) continue;
    if (seg.mem_size != seg.file_size) {
      r.error = "segment with zero fill cannot take a trampoline tail";
      return r;
    }
    Tail t;
    t.vaddr = seg.vaddr + seg.file_size;
    t.bytes.assign(rs.bytes.begin() + seg.file_size, rs.bytes.end());
    for (const Segment& other : image.segments) {
      if (t.vaddr < other.vaddr + other.mem_size &&
          other.vaddr < t.vaddr + t.bytes.size()) {
        r.error = "trampoline region collides with an existing segment";
        return r;
      }
    }
    for (const Tail& other : tails) {
      if (t.vaddr < other.vaddr + other.bytes.size() &&
          other.vaddr < t.vaddr + t.bytes.size()) {
        r.error = "trampoline regions collide with each other";
        return r;
      }
    }
    tails.push_back(std::move(t));
  }
  if (tails.empty()) {
    r.ok = true;
    return r;
  }
  if (image.raw) {
    // Raw images are a single flat mapping; tails stay contiguous by
    // construction.
    for (const Tail& t : tails)
      r.bytes.insert(r.bytes.end(), t.bytes.begin(), t.bytes.end());
    r.ok = true;
    return r;
  }
  // Append tail content, then relocate the program header table to the end
  // with one new PT_LOAD R+X entry per tail.
  const std::uint64_t phoff = read_le<std::uint64_t>(r.bytes, 0x20);
  const std::uint16_t phentsize = read_le<std::uint16_t>(r.bytes, 0x36);
  const std::uint16_t phnum = read_le<std::uint16_t>(r.bytes, 0x38);
  std::vector<std::uint64_t> tail_offsets;
  for (const Tail& t : tails) {
    tail_offsets.push_back(r.bytes.size());
    r.bytes.insert(r.bytes.end(), t.bytes.begin(), t.bytes.end());
  }
  while (r.bytes.size() % 8) r.bytes.push_back(0);
  const std::uint64_t new_phoff = r.bytes.size();
  r.bytes.insert(r.bytes.end(), image.bytes.begin() + phoff,
                 image.bytes.begin() + phoff +
                     std::uint64_t(phentsize) * phnum);
  for (std::size_t i = 0; i < tails.size(); ++i) {
    std::vector<std::uint8_t> ph(phentsize, 0);
    write_le<std::uint32_t>(ph, 0x00, kPtLoad);
    write_le<std::uint32_t>(ph, 0x04, kPfR | kPfX);
    write_le<std::uint64_t>(ph, 0x08, tail_offsets[i]);
    write_le<std::uint64_t>(ph, 0x10, tails[i].vaddr);
    write_le<std::uint64_t>(ph, 0x18, tails[i].vaddr);
    write_le<std::uint64_t>(ph, 0x20, tails[i].bytes.size());
    write_le<std::uint64_t>(ph, 0x28, tails[i].bytes.size());
    write_le<std::uint64_t>(ph, 0x30, 1);
    r.bytes.insert(r.bytes.end(), ph.begin(), ph.end());
  }
  write_le<std::uint64_t>(r.bytes, 0x20, new_phoff);
  write_le<std::uint16_t>(
      r.bytes, 0x38, static_cast<std::uint16_t>(phnum + tails.size()));
  r.ok = true;
  return r;
}

}  // namespace erim
