// Command-line surface over the library: scan, inspect, rewrite, gate
// emission and simulation, with stable machine-readable reports.
//
// Exit codes: 0 success, 1 verified finding, 2 usage or IO error,
// 3 analysis limitation (code the rewriter cannot reason about).

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "erimforge/bytescan.hpp"
#include "erimforge/digest.hpp"
#include "erimforge/elf.hpp"
#include "erimforge/gates.hpp"
#include "erimforge/inspect.hpp"
#include "erimforge/pkru.hpp"
#include "erimforge/rewrite.hpp"
#include "erimforge/scenario.hpp"
#include "erimforge/sim.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace erim;

constexpr const char* kVersion = "0.1.0";

std::string hex_u64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

int io_error(const std::string& msg) {
  std::cerr << "erimforge: " << msg << "\n";
  return 2;
}

std::optional<std::vector<std::uint8_t>> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) return std::nullopt;
  return bytes;
}

bool write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) return false;
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  return out.good();
}

json report_shell(const char* command, const std::string& path,
                  std::span<const std::uint8_t> bytes) {
  json r;
  r["tool"] = "erimforge";
  r["version"] = kVersion;
  r["command"] = command;
  r["input"] = {{"path", path}, {"sha256", sha256_hex(bytes)}};
  return r;
}

void print_report(const json& r) { std::cout << r.dump(2) << "\n"; }

const char* kind_name(PatternKind k) {
  return k == PatternKind::Wrpkru ? "wrpkru" : "xrstor";
}

json occurrence_json(const Occurrence& o) {
  return {{"kind", kind_name(o.kind)},
          {"offset", hex_u64(o.offset)},
          {"length", o.length},
          {"page_span", o.page_span}};
}

// ERIM_FORGE_SEED supplies the default when a flag leaves the seed unset.
std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ERIM_FORGE_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s, &end, 0);
  if (errno || !end || *end) return std::nullopt;
  return static_cast<std::uint64_t>(v);
}

bool parse_u64(const std::string& s, std::uint64_t* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 0);
  if (errno || !end || *end) return false;
  *out = static_cast<std::uint64_t>(v);
  return true;
}

// Image pages padded to page granularity so the page-set inspector can walk
// them; bss tails past file content stay zero.
struct ImagePages {
  std::map<std::uint64_t, std::vector<std::uint8_t>> content;
  std::set<std::uint64_t> exec;

  std::vector<PageBytes> views() const {
    std::vector<PageBytes> v;
    v.reserve(content.size());
    for (const auto& [index, bytes] : content)
      v.push_back({index, std::span<const std::uint8_t>(bytes)});
    return v;
  }
};

ImagePages pages_of(const LoadedImage& img) {
  ImagePages out;
  for (const Segment& seg : img.segments) {
    const auto content = segment_bytes(img, seg);
    const std::uint64_t lo = seg.vaddr / kPageSize;
    const std::uint64_t hi = (seg.vaddr + seg.mem_size + kPageSize - 1) /
                             kPageSize;
    for (std::uint64_t pi = lo; pi < hi; ++pi) {
      auto& page = out.content[pi];
      page.resize(kPageSize);
      const std::uint64_t page_base = pi * kPageSize;
      for (std::uint64_t a = std::max(page_base, seg.vaddr);
           a < std::min(page_base + kPageSize, seg.vaddr + seg.file_size);
           ++a)
        page[a - page_base] = content[a - seg.vaddr];
      if (seg.x) out.exec.insert(pi);
    }
  }
  return out;
}

struct EntrySources {
  std::string list_path;
  std::string marker = "erim_entry";
};

// Marker symbols plus the optional entry-list file.
bool collect_entries(const LoadedImage& img, const EntrySources& src,
                     std::set<std::uint64_t>* out, std::string* err) {
  *out = entry_points(img, src.marker);
  if (src.list_path.empty()) return true;
  const auto text = read_file(src.list_path);
  if (!text) {
    *err = "cannot read " + src.list_path;
    return false;
  }
  const auto parsed = parse_entry_list(
      std::string_view(reinterpret_cast<const char*>(text->data()),
                       text->size()));
  if (!parsed.ok) {
    *err = src.list_path + ": " + parsed.error;
    return false;
  }
  out->insert(parsed.entries.begin(), parsed.entries.end());
  return true;
}

int cmd_scan(const std::string& input, bool raw) {
  const auto lr = load_image_file(input, raw ? ImageMode::Raw : ImageMode::Elf);
  if (!lr.ok) return io_error(lr.error);
  const LoadedImage& img = lr.image;

  json r = report_shell("scan", input, img.bytes);
  json occs = json::array();
  std::size_t total = 0;
  for (const Segment& seg : img.segments) {
    const auto found = scan(segment_bytes(img, seg), seg.vaddr);
    for (const Occurrence& o : found) {
      json j = occurrence_json(o);
      j["executable"] = seg.x;
      occs.push_back(std::move(j));
      ++total;
    }
  }
  r["occurrences"] = std::move(occs);
  r["total"] = total;
  print_report(r);
  return 0;
}

int cmd_inspect(const std::string& input, bool raw, const EntrySources& src,
                const std::string& on_data,
                const std::vector<std::string>& exempt_addrs) {
  const auto lr = load_image_file(input, raw ? ImageMode::Raw : ImageMode::Elf);
  if (!lr.ok) return io_error(lr.error);
  const LoadedImage& img = lr.image;

  InspectorConfig cfg;
  std::string err;
  if (!collect_entries(img, src, &cfg.entries, &err)) return io_error(err);

  std::set<std::uint64_t> exempt;
  for (const std::string& s : exempt_addrs) {
    std::uint64_t a = 0;
    if (!parse_u64(s, &a)) return io_error("bad exempt address: " + s);
    exempt.insert(a);
  }

  const ImagePages pages = pages_of(img);
  const auto views = pages.views();
  const auto report = inspect_pages(
      views, [&](std::uint64_t pi) { return pages.exec.count(pi) != 0; }, cfg);

  json r = report_shell("inspect", input, img.bytes);
  json occs = json::array();
  std::size_t unsafe = 0;
  for (const SafetyFinding& f : report.findings) {
    json j = occurrence_json(f.occ);
    j["verdict"] = verdict_name(f.verdict);
    if (!f.evidence.empty()) j["evidence"] = f.evidence;
    const bool exempted = exempt.count(f.occ.offset) != 0;
    if (exempted) j["exempted"] = true;
    if (!f.safe() && !exempted) ++unsafe;
    if (f.verdict == Verdict::NonExecutableData && on_data == "warn")
      std::cerr << "erimforge: occurrence in data at " << hex_u64(f.occ.offset)
                << "\n";
    occs.push_back(std::move(j));
  }
  r["entries"] = cfg.entries.size();
  r["pages_scanned"] = report.pages_scanned;
  r["occurrences"] = std::move(occs);
  r["unsafe"] = unsafe;
  r["pass"] = unsafe == 0;
  print_report(r);
  return unsafe == 0 ? 0 : 1;
}

// NotInSubset means the binary contains executable bytes the decoder cannot
// follow; surfaced as an analysis limitation, not a finding.
int limitation(const RewriteResult& rr, std::uint64_t base) {
  if (rr.status == RewriteStatus::NotInSubset) {
    std::uint64_t off = 0;
    const auto pos = rr.error.rfind("0x");
    if (pos != std::string::npos) parse_u64(rr.error.substr(pos), &off);
    std::cerr << "erimforge: cannot disassemble at " << hex_u64(base + off)
              << "\n";
  } else {
    std::cerr << "erimforge: " << status_name(rr.status) << ": " << rr.error
              << "\n";
  }
  return 3;
}

int cmd_rewrite(const std::string& input, const std::string& output, bool raw,
                const EntrySources& src, bool allow_flag_clobber) {
  const auto lr = load_image_file(input, raw ? ImageMode::Raw : ImageMode::Elf);
  if (!lr.ok) return io_error(lr.error);
  const LoadedImage& img = lr.image;

  std::set<std::uint64_t> entries;
  std::string err;
  if (!collect_entries(img, src, &entries, &err)) return io_error(err);

  RewritePolicy policy;
  policy.allow_flag_clobber = allow_flag_clobber;

  // ELF layout must hold still so cross-segment references keep working;
  // raw images have no outside references and can shift freely.
  const GrowthMode mode = raw ? GrowthMode::Shift : GrowthMode::Trampoline;

  json r = report_shell("rewrite", input, img.bytes);
  std::map<int, unsigned> rule_histogram;
  unsigned detours = 0;
  unsigned planned = 0;
  std::set<std::uint64_t> final_entries;
  std::vector<RewrittenSegment> rewritten;
  std::vector<std::uint8_t> raw_out;

  for (std::size_t si = 0; si < img.segments.size(); ++si) {
    const Segment& seg = img.segments[si];
    if (!seg.x) continue;
    const auto rr =
        rewrite_all(segment_bytes(img, seg), seg.vaddr, entries, policy, mode);
    if (rr.status != RewriteStatus::Ok) return limitation(rr, seg.vaddr);
    for (const PlanNote& p : rr.plans) ++rule_histogram[p.rule];
    detours += rr.detours;
    planned += static_cast<unsigned>(rr.plans.size());
    final_entries.insert(rr.entries.begin(), rr.entries.end());
    if (raw)
      raw_out = rr.bytes;
    else if (!rr.plans.empty())
      rewritten.push_back({si, rr.bytes});
  }

  std::vector<std::uint8_t> out_bytes;
  if (raw) {
    out_bytes = std::move(raw_out);
    if (out_bytes.empty()) out_bytes = img.bytes;
  } else {
    const auto sr = store_rewritten(img, rewritten);
    if (!sr.ok) return io_error(sr.error);
    out_bytes = sr.bytes;
  }

  // Success is only claimed after the output itself reloads and passes the
  // inspector with the remapped entry set.
  const auto reload = load_image(out_bytes, raw ? ImageMode::Raw
                                                : ImageMode::Elf);
  if (!reload.ok) return io_error("rewritten image: " + reload.error);
  InspectorConfig recheck;
  recheck.entries = final_entries;
  const ImagePages pages = pages_of(reload.image);
  const auto views = pages.views();
  const auto verify = inspect_pages(
      views, [&](std::uint64_t pi) { return pages.exec.count(pi) != 0; },
      recheck);

  if (!write_file(output, out_bytes)) return io_error("cannot write " + output);

  json rules = json::object();
  for (const auto& [rule, n] : rule_histogram)
    rules[rule == 0 ? "pad" : "rule" + std::to_string(rule)] = n;
  r["output"] = {{"path", output}, {"sha256", sha256_hex(out_bytes)}};
  r["planned"] = planned;
  r["applied"] = planned;
  r["rule_histogram"] = std::move(rules);
  r["trampolines"] = detours;
  r["verified_clean"] = verify.pass();
  r["pass"] = verify.pass();
  print_report(r);
  return verify.pass() ? 0 : 1;
}

int cmd_gate(const std::string& mode, const std::string& allow_s,
             const std::string& disallow_s, bool hex) {
  std::uint64_t allow = pkru::kAllowTrusted;
  std::uint64_t disallow = pkru::kDisallowTrusted;
  if (!allow_s.empty() && !parse_u64(allow_s, &allow))
    return io_error("bad --allow value: " + allow_s);
  if (!disallow_s.empty() && !parse_u64(disallow_s, &disallow))
    return io_error("bad --disallow value: " + disallow_s);

  std::vector<std::uint8_t> bytes;
  if (mode == "enter")
    bytes = gates::enter_sequence(static_cast<std::uint32_t>(allow));
  else if (mode == "exit")
    bytes = gates::exit_sequence(static_cast<std::uint32_t>(disallow));
  else if (mode == "xrstor-guard")
    bytes = gates::bittest_kill_guard();
  else
    return io_error("unknown gate mode: " + mode);

  if (hex) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (std::uint8_t b : bytes) {
      s += digits[b >> 4];
      s += digits[b & 0xF];
    }
    std::cout << s << "\n";
  } else {
    std::fwrite(bytes.data(), 1, bytes.size(), stdout);
  }
  return 0;
}

int cmd_sim(const std::string& path, std::optional<std::uint64_t> seed,
            const std::string& trace_path, bool sweep) {
  const auto text = read_file(path);
  if (!text) return io_error("cannot read " + path);

  ScenarioOptions opt;
  opt.seed = seed ? seed : env_seed();
  opt.force_sweep = sweep;
  opt.base_dir = std::filesystem::path(path).parent_path().string();

  const ScenarioResult res = run_scenario(
      std::string_view(reinterpret_cast<const char*>(text->data()),
                       text->size()),
      opt);

  if (!res.usable()) {
    for (const std::string& e : res.errors)
      std::cerr << "erimforge: " << path << ": " << e << "\n";
    return 2;
  }

  if (!trace_path.empty()) {
    const std::string trace = format_trace(res.machine);
    std::ofstream out(trace_path, std::ios::binary | std::ios::trunc);
    out << trace;
    if (!out.good()) return io_error("cannot write " + trace_path);
  }

  json r = report_shell("sim", path, *text);
  r["seed"] = res.machine.cfg.seed;
  r["steps"] = res.machine.steps;
  r["exited"] = res.machine.exited;
  if (res.machine.exited) r["exit_code"] = res.machine.exit_code;
  r["events"] = res.machine.trace.size();
  json viols = json::array();
  for (const TraceEvent& v : res.machine.violations)
    viols.push_back({{"step", v.step},
                     {"thread", v.thread},
                     {"pc", hex_u64(v.pc)},
                     {"event", v.event},
                     {"a", hex_u64(v.a)},
                     {"b", hex_u64(v.b)}});
  r["violations"] = std::move(viols);
  json fails = json::array();
  for (const std::string& f : res.failures) fails.push_back(f);
  r["failures"] = std::move(fails);
  if (res.sweep) {
    r["sweep"] = {{"offsets", res.sweep->offsets},
                  {"runs", res.sweep->runs},
                  {"budget_out", res.sweep->budget_out},
                  {"hits", res.sweep->hits.size()}};
  }

  const bool sweep_ok = !sweep || !res.sweep || res.sweep->clean();
  const bool pass = res.failures.empty() && sweep_ok;
  r["pass"] = pass;
  print_report(r);

  if (!pass) {
    if (!res.machine.violations.empty()) {
      const TraceEvent& v = res.machine.violations.front();
      std::cerr << "erimforge: first violation: step=" << v.step
                << " thread=" << v.thread << " pc=" << hex_u64(v.pc) << " "
                << v.event << "\n";
    } else if (res.sweep && !res.sweep->clean()) {
      const SweepHit& h = res.sweep->hits.front();
      std::cerr << "erimforge: sweep hit: start=" << hex_u64(h.start)
                << " preset=" << h.preset << " pc=" << hex_u64(h.pc)
                << " addr=" << hex_u64(h.addr)
                << (h.write ? " write" : " read") << "\n";
    }
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WRPKRU/XRSTOR binary inspection, rewriting and simulation"};
  app.require_subcommand(1);

  std::string input, output, on_data = "ignore", gate_mode, allow_s,
                             disallow_s, trace_path, seed_s;
  EntrySources src;
  std::vector<std::string> exempt;
  bool raw = false, hex = false, flag_clobber = false, sweep = false;

  auto add_entry_opts = [&](CLI::App* c) {
    c->add_option("--entries", src.list_path,
                  "entry-list file, one hex address per line");
    c->add_option("--entry-marker", src.marker,
                  "symbol substring marking entry points");
  };

  CLI::App* scan = app.add_subcommand("scan", "list pattern occurrences");
  scan->add_option("input", input)->required();
  scan->add_flag("--raw", raw, "treat input as flat code at address 0");

  CLI::App* inspect = app.add_subcommand("inspect", "verify occurrence safety");
  inspect->add_option("input", input)->required();
  inspect->add_flag("--raw", raw);
  add_entry_opts(inspect);
  inspect->add_option("--on-data", on_data,
                      "data-segment occurrences: ignore or warn")
      ->check(CLI::IsMember({"ignore", "warn"}));
  inspect->add_option("--exempt", exempt,
                      "occurrence address to exempt (repeatable)");

  CLI::App* rewrite =
      app.add_subcommand("rewrite", "eliminate unsafe occurrences");
  rewrite->add_option("input", input)->required();
  rewrite->add_option("output", output)->required();
  rewrite->add_flag("--raw", raw);
  add_entry_opts(rewrite);
  rewrite->add_flag("--allow-flag-clobber", flag_clobber,
                    "permit replacements that change arithmetic flags");

  CLI::App* gate = app.add_subcommand("gate", "emit call gate byte sequences");
  gate->add_option("--mode", gate_mode, "enter, exit or xrstor-guard")
      ->required()
      ->check(CLI::IsMember({"enter", "exit", "xrstor-guard"}));
  gate->add_option("--allow", allow_s, "PKRU value entering the gate");
  gate->add_option("--disallow", disallow_s, "PKRU value leaving the gate");
  gate->add_flag("--hex", hex, "hex text instead of raw bytes");

  CLI::App* sim = app.add_subcommand("sim", "run a machine scenario");
  sim->add_option("scenario", input)->required();
  sim->add_option("--seed", seed_s, "override scenario seed");
  sim->add_option("--trace", trace_path, "write the event trace to a file");
  sim->add_flag("--sweep", sweep,
                "run an attack sweep and require it to come back empty");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (scan->parsed()) return cmd_scan(input, raw);
  if (inspect->parsed())
    return cmd_inspect(input, raw, src, on_data, exempt);
  if (rewrite->parsed())
    return cmd_rewrite(input, output, raw, src, flag_clobber);
  if (gate->parsed()) return cmd_gate(gate_mode, allow_s, disallow_s, hex);
  if (sim->parsed()) {
    std::optional<std::uint64_t> seed;
    if (!seed_s.empty()) {
      std::uint64_t v = 0;
      if (!parse_u64(seed_s, &v)) return io_error("bad --seed value");
      seed = v;
    }
    return cmd_sim(input, seed, trace_path, sweep);
  }
  return 2;
}
