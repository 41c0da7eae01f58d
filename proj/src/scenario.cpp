#include "erimforge/scenario.hpp"

#include <algorithm>
#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "erimforge/elf.hpp"
#include "erimforge/pkru.hpp"

namespace erim {
namespace {

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream in(line);
  std::string t;
  while (in >> t) {
    if (t[0] == '#') break;
    toks.push_back(t);
  }
  return toks;
}

bool parse_u64(const std::string& t, std::uint64_t* out) {
  if (t.empty()) return false;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(t.c_str(), &end, 0);
  if (errno != 0 || end != t.c_str() + t.size()) return false;
  *out = v;
  return true;
}

bool parse_hex_bytes(const std::string& t, std::vector<std::uint8_t>* out) {
  if (t.size() % 2) return false;
  out->clear();
  for (std::size_t i = 0; i < t.size(); i += 2) {
    int hi = -1, lo = -1;
    auto nib = [](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      return -1;
    };
    hi = nib(t[i]);
    lo = nib(t[i + 1]);
    if (hi < 0 || lo < 0) return false;
    out->push_back(static_cast<std::uint8_t>(hi << 4 | lo));
  }
  return true;
}

std::uint64_t page_floor(std::uint64_t v) { return v / kSimPage * kSimPage; }
std::uint64_t page_ceil(std::uint64_t v) {
  return (v + kSimPage - 1) / kSimPage * kSimPage;
}

bool map_image_segments(Machine& m, const LoadedImage& img,
                        std::string* err) {
  for (const Segment& seg : img.segments) {
    const std::uint64_t base = page_floor(seg.vaddr);
    const std::uint64_t pre = seg.vaddr - base;
    const std::uint64_t size = page_ceil(pre + seg.mem_size);
    std::vector<std::uint8_t> content(pre, 0);
    const auto bytes = segment_bytes(img, seg);
    content.insert(content.end(), bytes.begin(), bytes.end());
    if (!m.map_region(base, size, 0, seg.r, seg.w, seg.x, content)) {
      char buf[64];
      std::snprintf(buf, sizeof buf,
                    "segment at 0x%" PRIx64 " cannot be mapped", seg.vaddr);
      *err = buf;
      return false;
    }
  }
  return true;
}

struct Runner {
  ScenarioResult& res;
  const ScenarioOptions& opt;
  Machine& m;
  std::string marker = "erim_entry";
  DomainConfig domains;
  bool domains_set = false;
  bool ran_sweep = false;
  std::optional<std::uint64_t> image_entry;
  int line_no = 0;

  void error(const std::string& what) {
    res.errors.push_back("line " + std::to_string(line_no) + ": " + what);
  }
  void fail(const std::string& what) {
    res.failures.push_back("line " + std::to_string(line_no) + ": " + what);
  }

  bool want(const std::vector<std::string>& t, std::size_t lo,
            std::size_t hi) {
    if (t.size() >= lo + 1 && t.size() <= hi + 1) return true;
    error(t[0] + ": wrong argument count");
    return false;
  }

  bool num(const std::string& t, std::uint64_t* out) {
    if (parse_u64(t, out)) return true;
    error("bad number '" + t + "'");
    return false;
  }

  bool onoff(const std::string& t, bool* out) {
    if (t == "on") return *out = true, true;
    if (t == "off") return *out = false, true;
    error("expected on|off, got '" + t + "'");
    return false;
  }

  std::size_t count_event(const std::vector<TraceEvent>& v,
                          const std::string& name) {
    std::size_t n = 0;
    for (const TraceEvent& e : v) n += e.event == name;
    return n;
  }

  // Picks a mapped writable page range for default sweep presets.
  std::pair<std::uint64_t, std::uint64_t> writable_range() {
    for (const auto& [idx, p] : m.pages)
      if (p.w) return {idx * kSimPage, (idx + 1) * kSimPage};
    return {0x7FF000, 0x800000};
  }

  void default_sweep() {
    std::uint64_t lo = ~0ull, hi = 0;
    for (const auto& [idx, p] : m.pages) {
      if (!p.x && p.state != PageState::TrapFilled) continue;
      lo = std::min(lo, idx * kSimPage);
      hi = std::max(hi, (idx + 1) * kSimPage);
    }
    if (lo >= hi) {
      res.sweep = SweepReport{};
      return;
    }
    const auto [slo, shi] = writable_range();
    res.sweep = attack_sweep(m, lo, hi,
                             sweep_presets(m.cfg.seed, 8, slo, shi));
  }

  void handle(const std::vector<std::string>& t);
};

void Runner::handle(const std::vector<std::string>& t) {
  const std::string& d = t[0];
  std::uint64_t a = 0, b = 0, c = 0, e = 0;

  if (d == "seed") {
    if (want(t, 1, 1) && num(t[1], &a) && !opt.seed) m.cfg.seed = a;
  } else if (d == "mode") {
    if (!want(t, 1, 1)) return;
    if (t[1] == "full-isolation") m.cfg.mode = SimMode::FullIsolation;
    else if (t[1] == "integrity-only") m.cfg.mode = SimMode::IntegrityOnly;
    else error("unknown mode '" + t[1] + "'");
  } else if (d == "inspect") {
    if (!want(t, 1, 1)) return;
    if (t[1] == "eager") m.cfg.inspect = InspectWhen::Eager;
    else if (t[1] == "on-demand") m.cfg.inspect = InspectWhen::OnDemand;
    else error("unknown inspection discipline '" + t[1] + "'");
  } else if (d == "inspection") {
    if (want(t, 1, 1)) onoff(t[1], &m.cfg.inspection_enabled);
  } else if (d == "rewrite-on-fault") {
    if (want(t, 1, 1)) onoff(t[1], &m.cfg.rewrite_on_fault);
  } else if (d == "check-entry-transition") {
    if (want(t, 1, 1)) onoff(t[1], &m.cfg.check_entry_transition);
  } else if (d == "deny-syscall") {
    if (want(t, 1, 1) && num(t[1], &a)) m.cfg.u_denied_syscalls.insert(a);
  } else if (d == "entry-marker") {
    if (want(t, 1, 1)) marker = t[1];
  } else if (d == "image" || d == "image-raw") {
    if (!want(t, 1, 1)) return;
    std::string path = t[1];
    if (!opt.base_dir.empty() && path[0] != '/')
      path = opt.base_dir + "/" + path;
    const LoadResult lr = load_image_file(
        path, d == "image" ? ImageMode::Elf : ImageMode::Raw);
    if (!lr.ok) {
      error("cannot load '" + path + "': " + lr.error);
      return;
    }
    std::string err;
    if (!map_image_segments(m, lr.image, &err)) {
      error(err);
      return;
    }
    for (std::uint64_t ep : entry_points(lr.image, marker)) m.add_entry(ep);
    image_entry = lr.image.entry;
  } else if (d == "code" || d == "pending-code") {
    if (!want(t, 3, 3) || !num(t[1], &a) || !num(t[2], &b)) return;
    std::vector<std::uint8_t> bytes;
    if (!parse_hex_bytes(t[3], &bytes)) {
      error("bad hex bytes");
      return;
    }
    const bool ok = m.map_region(
        a, page_ceil(std::max<std::uint64_t>(bytes.size(), 1)),
        static_cast<std::uint8_t>(b), true, false, true, bytes,
        d == "code" ? PageState::Normal : PageState::Pending);
    if (!ok) error("cannot map code at " + t[1]);
  } else if (d == "trap-code") {
    if (!want(t, 3, 3) || !num(t[1], &a) || !num(t[2], &b)) return;
    std::vector<std::uint8_t> bytes;
    if (!parse_hex_bytes(t[3], &bytes)) {
      error("bad hex bytes");
      return;
    }
    if (!m.map_trap_region(a, bytes, static_cast<std::uint8_t>(b)))
      error("cannot map trap region at " + t[1]);
  } else if (d == "data") {
    if (!want(t, 3, 4) || !num(t[1], &a) || !num(t[2], &b) ||
        !num(t[3], &c))
      return;
    std::vector<std::uint8_t> bytes;
    if (t.size() == 5 && !parse_hex_bytes(t[4], &bytes)) {
      error("bad hex bytes");
      return;
    }
    if (!m.map_region(a, page_ceil(b), static_cast<std::uint8_t>(c), true,
                      true, false, bytes))
      error("cannot map data at " + t[1]);
  } else if (d == "entry") {
    if (want(t, 1, 1) && num(t[1], &a)) m.add_entry(a);
  } else if (d == "trusted-range") {
    if (want(t, 2, 2) && num(t[1], &a) && num(t[2], &b))
      m.add_trusted_code(a, b);
  } else if (d == "pool") {
    if (want(t, 3, 3) && num(t[1], &a) && num(t[2], &b) && num(t[3], &c)) {
      if (a >= pkru::kDomainCount) error("domain out of range");
      else m.set_pool(static_cast<std::uint8_t>(a), b, c);
    }
  } else if (d == "domains") {
    if (want(t, 1, 1) && num(t[1], &a)) {
      domains.domains = static_cast<unsigned>(a);
      domains_set = true;
    }
  } else if (d == "trust") {
    if (want(t, 2, 2) && num(t[1], &a) && num(t[2], &b)) {
      domains.trust.insert({static_cast<unsigned>(a),
                            static_cast<unsigned>(b)});
      domains_set = true;
    }
  } else if (d == "domains-check") {
    if (!want(t, 1, 1)) return;
    std::string why;
    const bool valid = validate_domains(domains, &why);
    if (t[1] == "pass" && !valid) fail("domain config invalid: " + why);
    else if (t[1] == "fail" && valid) fail("domain config unexpectedly valid");
    else if (t[1] != "pass" && t[1] != "fail") error("expected pass|fail");
  } else if (d == "thread") {
    if (!want(t, 2, 3) || !num(t[1], &a) || !num(t[2], &b)) return;
    std::optional<std::uint32_t> pk;
    if (t.size() == 4) {
      if (!num(t[3], &c)) return;
      pk = static_cast<std::uint32_t>(c);
    }
    m.spawn_thread(a, b, pk);
  } else if (d == "thread-at-entry") {
    if (!want(t, 1, 2) || !num(t[1], &a)) return;
    if (!image_entry) {
      error("no image loaded");
      return;
    }
    std::optional<std::uint32_t> pk;
    if (t.size() == 3) {
      if (!num(t[2], &b)) return;
      pk = static_cast<std::uint32_t>(b);
    }
    m.spawn_thread(*image_entry, a, pk);
  } else if (d == "thread-component") {
    if (!want(t, 3, 3) || !num(t[1], &a) || !num(t[2], &b) ||
        !num(t[3], &c))
      return;
    std::string why;
    if (!domains_set || !validate_domains(domains, &why)) {
      error("domain config invalid: " + (domains_set ? why : "not set"));
      return;
    }
    if (c >= domains.domains) {
      error("component out of range");
      return;
    }
    m.spawn_thread(a, b, pkru_for_component(domains,
                                            static_cast<unsigned>(c)));
  } else if (d == "signal") {
    if (!want(t, 2, 3) || !num(t[1], &a) || !num(t[2], &b)) return;
    std::optional<std::uint64_t> at;
    if (t.size() == 4) {
      if (!num(t[3], &c)) return;
      at = c;
    }
    m.inject_signal(static_cast<int>(a), b, at);
  } else if (d == "startup-inspect") {
    if (!want(t, 1, 1)) return;
    const bool passed = m.startup_inspect();
    if (t[1] == "pass" && !passed) fail("startup inspection rejected image");
    else if (t[1] == "fail" && passed)
      fail("startup inspection unexpectedly passed");
    else if (t[1] != "pass" && t[1] != "fail") error("expected pass|fail");
  } else if (d == "run") {
    if (want(t, 1, 1) && num(t[1], &a)) m.run_machine(a);
  } else if (d == "sweep") {
    if (!want(t, 4, 4) || !num(t[1], &a) || !num(t[2], &b) ||
        !num(t[3], &c) || !num(t[4], &e))
      return;
    const auto [slo, shi] = writable_range();
    res.sweep = attack_sweep(m, a, b,
                             sweep_presets(m.cfg.seed, c, slo, shi), e);
    ran_sweep = true;
  } else if (d == "expect-exit") {
    if (!want(t, 1, 1) || !num(t[1], &a)) return;
    if (!m.exited)
      fail("expected exit, machine still running");
    else if (m.exit_code != static_cast<int>(a))
      fail("exit code " + std::to_string(m.exit_code) + ", expected " +
           t[1]);
  } else if (d == "expect-running") {
    if (want(t, 0, 0) && m.exited)
      fail("machine exited with code " + std::to_string(m.exit_code));
  } else if (d == "expect-no-violations") {
    if (want(t, 0, 0) && !m.violations.empty())
      fail("violation recorded: " + m.violations.front().event);
  } else if (d == "expect-violation") {
    if (want(t, 1, 1) && count_event(m.violations, t[1]) == 0)
      fail("no violation '" + t[1] + "' recorded");
  } else if (d == "expect-violations") {
    if (want(t, 1, 1) && num(t[1], &a) && m.violations.size() != a)
      fail(std::to_string(m.violations.size()) + " violations, expected " +
           t[1]);
  } else if (d == "expect-trace") {
    if (want(t, 1, 1) && count_event(m.trace, t[1]) == 0)
      fail("no trace event '" + t[1] + "'");
  } else if (d == "expect-output") {
    if (!want(t, 0, 1)) return;
    std::vector<std::uint8_t> bytes;
    if (t.size() == 2 && !parse_hex_bytes(t[1], &bytes)) {
      error("bad hex bytes");
      return;
    }
    if (m.output != bytes) fail("output mismatch");
  } else if (d == "expect-byte") {
    if (!want(t, 2, 2) || !num(t[1], &a) || !num(t[2], &b)) return;
    std::uint8_t got[1] = {};
    if (!m.peek(a, got))
      fail("byte at " + t[1] + " unmapped");
    else if (got[0] != b)
      fail("byte at " + t[1] + " is " + std::to_string(got[0]) +
           ", expected " + t[2]);
  } else if (d == "expect-sweep-clean") {
    if (!want(t, 0, 0)) return;
    if (!res.sweep) fail("no sweep ran");
    else if (!res.sweep->clean())
      fail(std::to_string(res.sweep->hits.size()) + " sweep hits");
  } else if (d == "expect-sweep-hits") {
    if (!want(t, 0, 0)) return;
    if (!res.sweep) fail("no sweep ran");
    else if (res.sweep->clean()) fail("sweep found nothing");
  } else {
    error("unknown directive '" + d + "'");
  }
}

}  // namespace

ScenarioResult run_scenario(std::string_view text,
                            const ScenarioOptions& opt) {
  ScenarioResult res;
  Runner r{res, opt, res.machine};
  if (opt.seed) res.machine.cfg.seed = *opt.seed;

  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++r.line_no;
    const std::vector<std::string> toks = split_tokens(line);
    if (toks.empty()) continue;
    r.handle(toks);
  }
  if (opt.force_sweep && !r.ran_sweep) r.default_sweep();
  return res;
}

std::string format_trace(const Machine& m) {
  std::string out;
  char buf[192];
  auto emit = [&](const char* prefix, const TraceEvent& e) {
    std::snprintf(buf, sizeof buf,
                  "%sstep=%" PRIu64 " thread=%d pc=0x%" PRIx64
                  " pkru=0x%x event=%s a=0x%" PRIx64 " b=0x%" PRIx64 "\n",
                  prefix, e.step, e.thread, e.pc, e.pkru, e.event.c_str(),
                  e.a, e.b);
    out += buf;
  };
  for (const TraceEvent& e : m.trace) emit("", e);
  for (const TraceEvent& e : m.violations) emit("violation ", e);
  return out;
}

}  // namespace erim
