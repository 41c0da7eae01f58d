#include "erimforge/inspect.hpp"

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <map>

#include "erimforge/gates.hpp"
#include "erimforge/x86.hpp"

namespace erim {

namespace {

// Reads executable bytes at absolute addresses; classification must never
// trust bytes that could not be fetched as code.
struct ByteSource {
  virtual ~ByteSource() = default;
  virtual bool read(std::uint64_t addr, std::size_t n,
                    std::uint8_t* out) const = 0;
};

struct SpanSource final : ByteSource {
  std::span<const std::uint8_t> code;
  std::uint64_t base;

  SpanSource(std::span<const std::uint8_t> c, std::uint64_t b)
      : code(c), base(b) {}

  bool read(std::uint64_t addr, std::size_t n,
            std::uint8_t* out) const override {
    if (addr < base || addr - base > code.size() ||
        code.size() - (addr - base) < n) {
      return false;
    }
    std::memcpy(out, code.data() + (addr - base), n);
    return true;
  }
};

struct PageSource final : ByteSource {
  std::map<std::uint64_t, std::span<const std::uint8_t>> exec_pages;

  bool read(std::uint64_t addr, std::size_t n,
            std::uint8_t* out) const override {
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t a = addr + i;
      auto it = exec_pages.find(a / kPageSize);
      if (it == exec_pages.end()) return false;
      out[i] = it->second[a % kPageSize];
    }
    return true;
  }
};

struct Classifier {
  const InspectorConfig& cfg;
  std::vector<std::pair<std::uint32_t, std::vector<std::uint8_t>>> compare_tmpl;
  std::vector<std::uint8_t> bittest_tmpl = gates::bittest_kill_guard();

  explicit Classifier(const InspectorConfig& c) : cfg(c) {
    for (std::uint32_t d : cfg.accepted_disallow) {
      compare_tmpl.emplace_back(d, gates::compare_kill_guard(d));
    }
  }

  Verdict classify(const ByteSource& src, const Occurrence& occ,
                   std::string* evidence) const {
    const std::uint64_t after = occ.offset + occ.length;
    auto set = [&](std::string s) {
      if (evidence) *evidence = std::move(s);
    };

    if (occ.kind == PatternKind::Wrpkru) {
      if (cfg.entries.count(after)) {
        set("designated entry point follows");
        return Verdict::EntryTransfer;
      }
      if (auto target = direct_transfer_target(src, after);
          target && cfg.entries.count(*target)) {
        set("direct transfer to a designated entry point");
        return Verdict::EntryTransfer;
      }
      for (const auto& [disallow, tmpl] : compare_tmpl) {
        if (matches(src, after, tmpl)) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "compare guard, disallow 0x%x",
                        disallow);
          set(buf);
          return Verdict::CompareGuard;
        }
      }
      set(truncated(src, after, compare_tmpl.front().second.size())
              ? "bytes after occurrence not fetchable as code"
              : "no guard or entry transfer after occurrence");
      return Verdict::Unsafe;
    }

    // A restore window is only guardable when its ModRM byte encodes a
    // complete three-byte instruction (register-direct base, no SIB, no
    // displacement).  Any longer form consumes the bytes after the window
    // as its own operand fields, so code that jumps to the window start
    // would run straight past whatever "guard" appears to follow.
    std::uint8_t modrm = 0;
    if (src.read(occ.offset + 2, 1, &modrm) && (modrm & 0xC0) == 0 &&
        (modrm & 7) != 4 && (modrm & 7) != 5) {
      if (matches(src, after, bittest_tmpl)) {
        set("bit-test guard");
        return Verdict::BitTestGuard;
      }
      set(truncated(src, after, bittest_tmpl.size())
              ? "bytes after occurrence not fetchable as code"
              : "no guard after occurrence");
      return Verdict::Unsafe;
    }
    set("window is a prefix of a longer restore form; no guard can follow");
    return Verdict::Unsafe;
  }

  static bool matches(const ByteSource& src, std::uint64_t at,
                      const std::vector<std::uint8_t>& tmpl) {
    std::uint8_t have[32];
    assert(tmpl.size() <= sizeof have);
    return src.read(at, tmpl.size(), have) &&
           std::equal(tmpl.begin(), tmpl.end(), have);
  }

  static bool truncated(const ByteSource& src, std::uint64_t at,
                        std::size_t n) {
    std::uint8_t have[32];
    assert(n <= sizeof have);
    return !src.read(at, n, have);
  }

  // Decodes the instruction at `at`; an unconditional direct CALL/JMP yields
  // its target. Conditional branches do not count: the fall-through path
  // would still execute with the written PKRU.
  static std::optional<std::uint64_t> direct_transfer_target(
      const ByteSource& src, std::uint64_t at) {
    std::uint8_t buf[15];
    std::size_t got = 0;
    while (got < sizeof buf && src.read(at + got, 1, &buf[got])) ++got;
    if (got == 0) return std::nullopt;
    auto r = x86::decode(std::span<const std::uint8_t>(buf, got));
    if (r.status != x86::DecodeStatus::Ok) return std::nullopt;
    if (!x86::is_rel_branch(r.instr) || x86::is_cond_branch(r.instr)) {
      return std::nullopt;
    }
    return x86::rel_target(r.instr, at);
  }
};

}  // namespace

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::EntryTransfer: return "entry-transfer";
    case Verdict::CompareGuard: return "compare-guard";
    case Verdict::BitTestGuard: return "bittest-guard";
    case Verdict::Unsafe: return "unsafe";
    case Verdict::NonExecutableData: return "non-executable-data";
  }
  return "?";
}

bool InspectionReport::pass() const { return unsafe_count() == 0; }

std::size_t InspectionReport::unsafe_count() const {
  return static_cast<std::size_t>(
      std::count_if(findings.begin(), findings.end(),
                    [](const SafetyFinding& f) { return !f.safe(); }));
}

Verdict classify(std::span<const std::uint8_t> code, std::uint64_t base,
                 const Occurrence& occ, const InspectorConfig& cfg,
                 std::string* evidence) {
  return Classifier(cfg).classify(SpanSource(code, base), occ, evidence);
}

InspectionReport inspect_region(std::span<const std::uint8_t> code,
                                std::uint64_t base,
                                const InspectorConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  InspectionReport report;
  report.pages_scanned = (code.size() + kPageSize - 1) / kPageSize;
  const SpanSource src(code, base);
  const Classifier cls(cfg);
  for (const Occurrence& occ : scan(code, base)) {
    SafetyFinding f{.occ = occ};
    f.verdict = cls.classify(src, occ, &f.evidence);
    report.findings.push_back(std::move(f));
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

InspectionReport inspect_pages(
    std::span<const PageBytes> pages,
    const std::function<bool(std::uint64_t)>& executable,
    const InspectorConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  InspectionReport report;
  report.pages_scanned = pages.size();

  PageSource src;
  std::map<std::uint64_t, std::span<const std::uint8_t>> data_pages;
  for (const PageBytes& p : pages) {
    if (executable(p.index)) {
      src.exec_pages[p.index] = p.bytes;
    } else {
      data_pages[p.index] = p.bytes;
    }
  }

  const Classifier cls(cfg);
  for (const Occurrence& occ : scan_pages(pages, executable)) {
    SafetyFinding f{.occ = occ};
    f.verdict = cls.classify(src, occ, &f.evidence);
    report.findings.push_back(std::move(f));
  }

  // A window whose first byte sits on a non-executable page can never be
  // fetched as code; report it as data so callers can audit, not fail.
  auto page_byte = [&](std::uint64_t addr, std::uint8_t* out) {
    auto it = data_pages.find(addr / kPageSize);
    if (it != data_pages.end()) {
      *out = it->second[addr % kPageSize];
      return true;
    }
    auto ex = src.exec_pages.find(addr / kPageSize);
    if (ex != src.exec_pages.end()) {
      *out = ex->second[addr % kPageSize];
      return true;
    }
    return false;
  };
  for (const auto& [index, bytes] : data_pages) {
    const std::uint64_t page_base = index * kPageSize;
    for (std::size_t w = 0; w < kPageSize; ++w) {
      std::uint8_t win[3];
      bool have = true;
      for (std::size_t i = 0; i < 3; ++i) {
        if (w + i < kPageSize) {
          win[i] = bytes[w + i];
        } else {
          have = page_byte(page_base + w + i, &win[i]);
          if (!have) break;
        }
      }
      if (!have) continue;
      if (auto kind = match_window(win)) {
        report.findings.push_back(SafetyFinding{
            .occ = {*kind, page_base + w, 3, w + 3 > kPageSize},
            .verdict = Verdict::NonExecutableData,
            .evidence = "first byte on a non-executable page"});
      }
    }
  }

  std::sort(report.findings.begin(), report.findings.end(),
            [](const SafetyFinding& a, const SafetyFinding& b) {
              return a.occ.offset < b.occ.offset;
            });
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

}  // namespace erim
