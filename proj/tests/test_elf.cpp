#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"

#include "erimforge/bytescan.hpp"
#include "erimforge/elf.hpp"
#include "erimforge/inspect.hpp"
#include "erimforge/pkru.hpp"
#include "erimforge/rewrite.hpp"

namespace {

using namespace erim;
using Bytes = std::vector<std::uint8_t>;

void le16(Bytes& b, std::size_t at, std::uint16_t v) {
  b[at] = std::uint8_t(v);
  b[at + 1] = std::uint8_t(v >> 8);
}
void le32(Bytes& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = std::uint8_t(v >> (8 * i));
}
void le64(Bytes& b, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b[at + i] = std::uint8_t(v >> (8 * i));
}

struct SegSpec {
  std::uint32_t flags;  // PF_* bits
  std::uint64_t vaddr;
  Bytes content;
};

Bytes make_elf(const std::vector<SegSpec>& segs) {
  const std::size_t phoff = 0x40;
  std::size_t off = phoff + 56 * segs.size();
  Bytes out(off, 0);
  out[0] = 0x7F;
  out[1] = 'E';
  out[2] = 'L';
  out[3] = 'F';
  out[4] = 2;  // 64-bit
  out[5] = 1;  // little endian
  out[6] = 1;
  le16(out, 0x10, 2);     // ET_EXEC
  le16(out, 0x12, 0x3E);  // EM_X86_64
  le32(out, 0x14, 1);
  le64(out, 0x18, segs.empty() ? 0 : segs[0].vaddr);
  le64(out, 0x20, phoff);
  le16(out, 0x34, 64);
  le16(out, 0x36, 56);
  le16(out, 0x38, std::uint16_t(segs.size()));
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const std::size_t ph = phoff + 56 * i;
    le32(out, ph + 0x00, 1);  // PT_LOAD
    le32(out, ph + 0x04, segs[i].flags);
    le64(out, ph + 0x08, off);
    le64(out, ph + 0x10, segs[i].vaddr);
    le64(out, ph + 0x18, segs[i].vaddr);
    le64(out, ph + 0x20, segs[i].content.size());
    le64(out, ph + 0x28, segs[i].content.size());
    le64(out, ph + 0x30, 1);
    out.insert(out.end(), segs[i].content.begin(), segs[i].content.end());
    off += segs[i].content.size();
  }
  return out;
}

}  // namespace

TEST_CASE("a single executable load segment yields one executable range") {
  const Bytes text = {0x0F, 0x01, 0xEF, 0xC3};
  auto res = load_image(make_elf({{5, 0x401000, text}}), ImageMode::Elf);
  REQUIRE(res.ok);
  REQUIRE(res.image.segments.size() == 1);
  const Segment& s = res.image.segments[0];
  CHECK(s.x);
  CHECK(!s.w);
  CHECK(s.vaddr == 0x401000);
  CHECK(s.file_size == 4);
  auto occs = scan(segment_bytes(res.image, s), s.vaddr);
  REQUIRE(occs.size() == 1);
  CHECK(occs[0].offset == 0x401000);
}

TEST_CASE("writable-and-executable segments are rejected") {
  auto res = load_image(make_elf({{7, 0x401000, {0xC3}}}), ImageMode::Elf);
  CHECK(!res.ok);
  CHECK(res.error.find("writable and executable") != std::string::npos);
}

TEST_CASE("malformed headers produce descriptive errors") {
  SUBCASE("too short") {
    auto res = load_image(Bytes{0x7F, 'E', 'L', 'F'}, ImageMode::Elf);
    CHECK(!res.ok);
    CHECK(res.error.find("too short") != std::string::npos);
  }
  SUBCASE("bad magic") {
    Bytes b = make_elf({{5, 0x1000, {0xC3}}});
    b[0] = 0x7E;
    auto res = load_image(b, ImageMode::Elf);
    CHECK(!res.ok);
    CHECK(res.error.find("magic") != std::string::npos);
  }
  SUBCASE("32-bit class") {
    Bytes b = make_elf({{5, 0x1000, {0xC3}}});
    b[4] = 1;
    auto res = load_image(b, ImageMode::Elf);
    CHECK(!res.ok);
    CHECK(res.error.find("32-bit") != std::string::npos);
  }
  SUBCASE("big endian") {
    Bytes b = make_elf({{5, 0x1000, {0xC3}}});
    b[5] = 2;
    auto res = load_image(b, ImageMode::Elf);
    CHECK(!res.ok);
    CHECK(res.error.find("big-endian") != std::string::npos);
  }
  SUBCASE("overlapping segments") {
    auto res = load_image(
        make_elf({{5, 0x1000, {0xC3, 0xC3}}, {4, 0x1001, {0x00}}}),
        ImageMode::Elf);
    CHECK(!res.ok);
    CHECK(res.error.find("overlap") != std::string::npos);
  }
  SUBCASE("segment past end of file") {
    Bytes b = make_elf({{5, 0x1000, {0xC3}}});
    le64(b, 0x40 + 0x20, 0x10000);  // p_filesz
    auto res = load_image(b, ImageMode::Elf);
    CHECK(!res.ok);
    CHECK(res.error.find("outside the file") != std::string::npos);
  }
}

TEST_CASE("raw mode treats the whole file as one executable segment") {
  const Bytes raw = {0x0F, 0x01, 0xEF};
  auto res = load_image(raw, ImageMode::Raw);
  REQUIRE(res.ok);
  CHECK(res.image.raw);
  REQUIRE(res.image.segments.size() == 1);
  CHECK(res.image.segments[0].x);
  CHECK(res.image.segments[0].vaddr == 0);
  auto occs = scan(segment_bytes(res.image, res.image.segments[0]), 0);
  CHECK(occs.size() == 1);
}

TEST_CASE("entry list files parse hex addresses and comments") {
  auto r = parse_entry_list("0x401000  # gate one\n401008\n\n  # alone\n");
  REQUIRE(r.ok);
  CHECK(r.entries == std::set<std::uint64_t>{0x401000, 0x401008});

  auto bad = parse_entry_list("0x401000\nnot-hex\n");
  CHECK(!bad.ok);
  CHECK(bad.error.find("line 2") != std::string::npos);
}

TEST_CASE("storing unchanged content is byte-identical") {
  const Bytes text = {0x0F, 0x01, 0xEF, 0xC3};
  const Bytes file = make_elf({{5, 0x401000, text}});
  auto img = load_image(file, ImageMode::Elf);
  REQUIRE(img.ok);
  auto out = store_rewritten(img.image, {{0, text}});
  REQUIRE(out.ok);
  CHECK(out.bytes == file);
}

TEST_CASE("overflow tails append one executable-only segment") {
  const Bytes text = {0x0F, 0x01, 0xEF, 0x90, 0x90, 0xC3};
  const Bytes file = make_elf({{5, 0x401000, text}});
  auto img = load_image(file, ImageMode::Elf);
  REQUIRE(img.ok);

  auto rw = rewrite_all(segment_bytes(img.image, img.image.segments[0]),
                        0x401000, {}, {}, GrowthMode::Trampoline);
  REQUIRE(rw.status == RewriteStatus::Ok);
  REQUIRE(rw.bytes.size() > text.size());

  auto out = store_rewritten(img.image, {{0, rw.bytes}});
  REQUIRE(out.ok);

  auto back = load_image(out.bytes, ImageMode::Elf);
  REQUIRE(back.ok);
  REQUIRE(back.image.segments.size() == 2);
  const Segment& tail = back.image.segments[1];
  CHECK(tail.x);
  CHECK(!tail.w);
  CHECK(tail.vaddr == 0x401000 + text.size());
  CHECK(tail.file_size == rw.bytes.size() - text.size());

  // Every executable range of the stored file re-inspects clean.
  InspectorConfig cfg;
  for (const Segment& s : back.image.segments) {
    if (!s.x) continue;
    CHECK(inspect_region(segment_bytes(back.image, s), s.vaddr, cfg).pass());
  }
}

TEST_CASE("a tail colliding with a later segment is a layout error") {
  const Bytes text = {0x0F, 0x01, 0xEF, 0x90, 0x90, 0xC3};
  const Bytes file =
      make_elf({{5, 0x401000, text}, {4, 0x401006, {1, 2, 3, 4}}});
  auto img = load_image(file, ImageMode::Elf);
  REQUIRE(img.ok);
  Bytes grown = text;
  grown.resize(text.size() + 32, 0x90);
  auto out = store_rewritten(img.image, {{0, grown}});
  CHECK(!out.ok);
  CHECK(out.error.find("collides") != std::string::npos);
}

TEST_CASE("toolchain-built binaries expose symbols and entry markers") {
  auto res = load_image_file(ERIM_FIXTURE_BIN, ImageMode::Elf);
  REQUIRE(res.ok);
  bool has_start = false;
  std::uint64_t gate = 0;
  for (const SymbolRef& s : res.image.symbols) {
    if (s.name == "_start") has_start = true;
    if (s.name == "erim_entry_gate") gate = s.addr;
  }
  CHECK(has_start);
  REQUIRE(gate != 0);
  CHECK(entry_points(res.image).count(gate) == 1);

  // The marker labels the address after the WRPKRU, so the occurrence the
  // scanner finds must end exactly at it.
  bool found = false;
  for (const Segment& s : res.image.segments) {
    if (!s.x) continue;
    for (const Occurrence& o : scan(segment_bytes(res.image, s), s.vaddr))
      if (o.offset + o.length == gate) found = true;
  }
  CHECK(found);
}
