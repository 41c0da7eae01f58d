#include "erimforge/sim.hpp"

#include <algorithm>

#include "erimforge/inspect.hpp"

namespace erim {
namespace {

using x86::Reg;

constexpr std::uint64_t kTraceCap = 1u << 20;
constexpr std::uint64_t kViolationCap = 4096;
// Committed steps a thread may run after a PKRU raise before it must have
// reached an entry point: exactly the kill guard's cmp/je/mov/syscall.
constexpr int kEntryGrace = 4;

constexpr std::uint64_t kEacces = static_cast<std::uint64_t>(-13);
constexpr std::uint64_t kEnomem = static_cast<std::uint64_t>(-12);
constexpr std::uint64_t kEfault = static_cast<std::uint64_t>(-14);
constexpr std::uint64_t kEinval = static_cast<std::uint64_t>(-22);
constexpr std::uint64_t kEnosys = static_cast<std::uint64_t>(-38);
constexpr std::uint64_t kEperm = static_cast<std::uint64_t>(-1);

std::uint64_t splitmix(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

bool raised(std::uint32_t oldp, std::uint32_t newp, unsigned domain) {
  return (pkru::allows_read(newp, domain) &&
          !pkru::allows_read(oldp, domain)) ||
         (pkru::allows_write(newp, domain) &&
          !pkru::allows_write(oldp, domain));
}

const char* fault_name(FaultKind f) {
  switch (f) {
    case FaultKind::NotInSubset: return "fault-subset";
    case FaultKind::TruncatedFetch: return "fault-truncated";
    case FaultKind::Unmapped: return "fault-unmapped";
    case FaultKind::Denied: return "fault-denied";
    case FaultKind::WrpkruOperands: return "fault-operands";
    case FaultKind::Trap: return "fault-trap";
    case FaultKind::None: break;
  }
  return "fault";
}

}  // namespace

bool validate_domains(const DomainConfig& cfg, std::string* error) {
  if (cfg.domains > pkru::kDomainCount) {
    if (error) *error = "more than 16 domains";
    return false;
  }
  for (const auto& [a, b] : cfg.trust) {
    if (a >= cfg.domains || b >= cfg.domains) {
      if (error) *error = "trust edge names an unknown domain";
      return false;
    }
  }
  for (const auto& [a, b] : cfg.trust) {
    for (const auto& [c, d] : cfg.trust) {
      if (b != c || a == d) continue;
      if (!cfg.trust.count({a, d})) {
        if (error)
          *error = "trust is not transitive: " + std::to_string(a) +
                   " trusts " + std::to_string(b) + " trusts " +
                   std::to_string(d);
        return false;
      }
    }
  }
  return true;
}

std::uint32_t pkru_for_component(const DomainConfig& cfg,
                                 unsigned component) {
  std::uint32_t v = pkru::read_bit(component) | pkru::write_bit(component);
  for (const auto& [a, b] : cfg.trust)
    if (a == component) v |= pkru::read_bit(b) | pkru::write_bit(b);
  return v;
}

// Memory view bridging the interpreter to the paged machine. Every access
// is validated in full before any byte moves, so a refused access leaves
// no partial effects.
class MachineEnv : public Env {
 public:
  Machine* m;
  SimThread* t;
  std::uint64_t cur_pc = 0;
  // First refused access of this step, for fault triage.
  std::optional<std::pair<Access, std::uint64_t>> blocked;
  bool mt_touched = false;

  MachineEnv(Machine* mm, SimThread* tt) : m(mm), t(tt) {}

  const std::uint8_t* view(const SimPage& p, std::uint64_t addr) const {
    if (p.state != PageState::TrapFilled)
      return &p.bytes[addr % kSimPage];
    const TrapRegion& r = m->trap_regions[static_cast<std::size_t>(p.region)];
    const std::uint64_t off = addr - r.base;
    static const std::uint8_t trap = 0xCC;
    return off < r.rt.current.size() ? &r.rt.current[off] : &trap;
  }

  MemStatus check_data(std::uint64_t addr, std::size_t n, bool write) {
    for (std::size_t i = 0; i < n; ++i) {
      const SimPage* p = m->page_at(addr + i);
      if (!p) {
        blocked = {{write ? Access::Write : Access::Read, addr + i}};
        return MemStatus::Unmapped;
      }
      const bool perm = write ? p->w : p->r;
      if (!perm || !pkru::allows(t->st.pkru, p->domain, write)) {
        blocked = {{write ? Access::Write : Access::Read, addr + i}};
        m->record(*t, write ? "denied-store" : "denied-load", addr + i);
        return MemStatus::Denied;
      }
    }
    return MemStatus::Ok;
  }

  void note_trusted(std::uint64_t addr, std::size_t n, bool write) {
    // Under integrity-only protection, reads of trusted memory are part of
    // the model; only writes are monitored.
    if (!write && m->cfg.mode == SimMode::IntegrityOnly) return;
    for (std::size_t i = 0; i < n; ++i) {
      const SimPage* p = m->page_at(addr + i);
      if (p->domain != m->cfg.trusted_domain) continue;
      mt_touched = true;
      if (!m->in_trusted_code(cur_pc))
        m->violation(*t, write ? "mt-write-outside-t" : "mt-read-outside-t",
                     addr + i, cur_pc);
      return;
    }
  }

  MemStatus load(std::uint64_t addr, std::size_t n,
                 std::uint8_t* out) override {
    const MemStatus s = check_data(addr, n, false);
    if (s != MemStatus::Ok) return s;
    for (std::size_t i = 0; i < n; ++i)
      out[i] = *view(*m->page_at(addr + i), addr + i);
    note_trusted(addr, n, false);
    return MemStatus::Ok;
  }

  MemStatus store(std::uint64_t addr, std::size_t n,
                  const std::uint8_t* src) override {
    const MemStatus s = check_data(addr, n, true);
    if (s != MemStatus::Ok) return s;
    for (std::size_t i = 0; i < n; ++i) {
      SimPage* p = m->page_at(addr + i);
      p->bytes[(addr + i) % kSimPage] = src[i];
    }
    note_trusted(addr, n, true);
    return MemStatus::Ok;
  }

  std::size_t fetch(std::uint64_t addr, std::size_t n, std::uint8_t* out,
                    MemStatus& tail) override {
    tail = MemStatus::Ok;
    for (std::size_t i = 0; i < n; ++i) {
      const SimPage* p = m->page_at(addr + i);
      if (!p) {
        tail = MemStatus::Unmapped;
        if (!blocked) blocked = {{Access::Fetch, addr + i}};
        return i;
      }
      if (!p->x || p->state == PageState::Pending) {
        tail = MemStatus::Denied;
        if (!blocked) blocked = {{Access::Fetch, addr + i}};
        return i;
      }
      out[i] = *view(*p, addr + i);
    }
    return n;
  }

  Sys syscall(MachineState& st) override { return m->do_syscall(*t, st); }
};

std::uint64_t Machine::next_rng() {
  if (rng_ == 0) rng_ = cfg.seed * 0x2545F4914F6CDD1Dull + 1;
  return splitmix(rng_);
}

SimPage* Machine::page_at(std::uint64_t addr) {
  auto it = pages.find(addr / kSimPage);
  return it == pages.end() ? nullptr : &it->second;
}

const SimPage* Machine::page_at(std::uint64_t addr) const {
  auto it = pages.find(addr / kSimPage);
  return it == pages.end() ? nullptr : &it->second;
}

void Machine::record(const SimThread& t, std::string event, std::uint64_t a,
                     std::uint64_t b) {
  if (trace.size() >= kTraceCap) {
    ++trace_dropped;
    return;
  }
  trace.push_back(
      {steps, t.id, t.st.rip, t.st.pkru, std::move(event), a, b});
}

void Machine::violation(const SimThread& t, std::string what,
                        std::uint64_t a, std::uint64_t b) {
  if (violations.size() >= kViolationCap) {
    ++violations_overflow;
    return;
  }
  violations.push_back(
      {steps, t.id, t.st.rip, t.st.pkru, std::move(what), a, b});
}

bool Machine::map_region(std::uint64_t vaddr, std::uint64_t size,
                         std::uint8_t domain, bool r, bool w, bool x,
                         std::span<const std::uint8_t> content,
                         PageState state) {
  if (vaddr % kSimPage || size % kSimPage || size == 0) return false;
  if (w && x) return false;
  if (domain >= pkru::kDomainCount) return false;
  if (content.size() > size) return false;
  const std::uint64_t first = vaddr / kSimPage;
  const std::uint64_t count = size / kSimPage;
  for (std::uint64_t i = 0; i < count; ++i)
    if (pages.count(first + i)) return false;
  for (std::uint64_t i = 0; i < count; ++i) {
    SimPage p;
    p.domain = domain;
    p.r = r || state == PageState::Pending;
    p.w = w;
    p.x = state == PageState::Pending ? false : x;
    p.state = state;
    p.bytes.assign(kSimPage, 0);
    const std::uint64_t off = i * kSimPage;
    if (off < content.size()) {
      const std::size_t n = std::min<std::size_t>(kSimPage,
                                                  content.size() - off);
      std::copy(content.begin() + off, content.begin() + off + n,
                p.bytes.begin());
    }
    pages.emplace(first + i, std::move(p));
  }
  return true;
}

bool Machine::map_trap_region(std::uint64_t vaddr,
                              std::span<const std::uint8_t> content,
                              std::uint8_t domain, std::uint64_t room) {
  if (vaddr % kSimPage || room % kSimPage || room < 2 * kSimPage)
    return false;
  if (content.size() > kSimPage || domain >= pkru::kDomainCount)
    return false;
  const std::uint64_t first = vaddr / kSimPage;
  const std::uint64_t count = room / kSimPage;
  for (std::uint64_t i = 0; i < count; ++i)
    if (pages.count(first + i)) return false;
  std::vector<std::uint8_t> reserve(content.begin(), content.end());
  reserve.resize(kSimPage, 0xCC);
  TrapRegion reg;
  reg.base = vaddr;
  reg.room = room;
  reg.rt = runtime_page_init(std::move(reserve));
  const int idx = static_cast<int>(trap_regions.size());
  trap_regions.push_back(std::move(reg));
  for (std::uint64_t i = 0; i < count; ++i) {
    SimPage p;
    p.domain = domain;
    p.r = true;
    p.x = true;
    p.state = PageState::TrapFilled;
    p.region = idx;
    pages.emplace(first + i, std::move(p));
  }
  return true;
}

bool Machine::in_trusted_code(std::uint64_t pc) const {
  for (const auto& [lo, hi] : trusted_code)
    if (pc >= lo && pc < hi) return true;
  return false;
}

void Machine::set_pool(std::uint8_t domain, std::uint64_t base,
                       std::uint64_t size) {
  pools[domain] = {base, size, 0};
}

int Machine::spawn_thread(std::uint64_t rip, std::uint64_t stack_top,
                          std::optional<std::uint32_t> pkru) {
  SimThread t;
  t.id = static_cast<int>(threads.size());
  t.st.rip = rip;
  t.st.reg(Reg::rsp) = stack_top;
  t.st.pkru = pkru.value_or(cfg.thread_start_pkru);
  t.stack_hi = stack_top;
  t.stack_lo = stack_top >= 16 * kSimPage ? stack_top - 16 * kSimPage : 0;
  threads.push_back(std::move(t));
  record(threads.back(), "spawn", rip);
  return threads.back().id;
}

void Machine::inject_signal(int thread, std::uint64_t handler,
                            std::optional<std::uint64_t> at_step) {
  signal_queue_.push_back({thread, handler, at_step});
}

void Machine::deliver_signal(SimThread& t, std::uint64_t handler) {
  record(t, "signal", handler, t.st.pkru);
  // Return path: the old pc goes on the stack so a plain RET resumes.
  const std::uint64_t sp = t.st.reg(Reg::rsp) - 8;
  for (int i = 0; i < 8; ++i) {
    SimPage* p = page_at(sp + i);
    if (!p || !p->w) {
      terminate(t, "signal-stack", sp);
      return;
    }
    p->bytes[(sp + i) % kSimPage] =
        static_cast<std::uint8_t>(t.st.rip >> (8 * i));
  }
  t.st.reg(Reg::rsp) = sp;
  // Privileges drop to the untrusted domain before the handler runs,
  // regardless of what the thread held.
  t.st.pkru = pkru::kDisallowTrusted;
  t.st.rip = handler;
  t.entry_grace = -1;
}

bool Machine::startup_inspect() {
  if (!cfg.inspection_enabled) return true;
  InspectorConfig icfg;
  icfg.entries = entries;
  auto it = pages.begin();
  while (it != pages.end()) {
    if (!it->second.x || it->second.state != PageState::Normal) {
      ++it;
      continue;
    }
    // Maximal contiguous executable run.
    std::vector<std::uint8_t> concat;
    const std::uint64_t base = it->first * kSimPage;
    auto run_it = it;
    std::uint64_t prev = it->first;
    while (run_it != pages.end() && run_it->second.x &&
           run_it->second.state == PageState::Normal &&
           run_it->first == prev) {
      concat.insert(concat.end(), run_it->second.bytes.begin(),
                    run_it->second.bytes.end());
      prev = run_it->first + 1;
      ++run_it;
    }
    if (!inspect_region(concat, base, icfg).pass()) {
      if (!threads.empty()) record(threads[0], "startup-abort", base);
      exited = true;
      exit_code = -1;
      return false;
    }
    it = run_it;
  }
  return true;
}

std::uint64_t Machine::domain_alloc(int thread, std::uint64_t size) {
  const SimThread& t = threads[static_cast<std::size_t>(thread)];
  for (int d = pkru::kDomainCount - 1; d >= 0; --d) {
    if (!pkru::allows_write(t.st.pkru, static_cast<unsigned>(d))) continue;
    Pool& pool = pools[static_cast<std::size_t>(d)];
    if (pool.size == 0) continue;
    if (pool.used + size > pool.size) return 0;  // exhausted
    const std::uint64_t addr = pool.base + pool.used;
    pool.used += size;
    record(t, "alloc", addr, static_cast<std::uint64_t>(d));
    return addr;
  }
  return 0;
}

void Machine::terminate(SimThread& t, const std::string& why,
                        std::uint64_t addr) {
  record(t, why, addr);
  t.alive = false;
  if (!cfg.record_and_continue) {
    exited = true;
    exit_code = 139;
  }
}

bool Machine::exec_fault(SimThread& t, std::uint64_t addr) {
  SimPage* p = page_at(addr);
  if (!cfg.inspection_enabled) {
    p->state = PageState::Normal;
    p->x = true;
    record(t, "exec-unblock", addr);
    return true;
  }
  // Inspect the pending page together with its executable neighbors, so
  // windows spanning a page edge are judged on the real bytes.
  std::uint64_t first = addr / kSimPage;
  while (true) {
    const SimPage* q = page_at((first - 1) * kSimPage);
    if (!q || q->state == PageState::TrapFilled ||
        (!q->x && q->state != PageState::Pending))
      break;
    --first;
  }
  std::vector<std::uint8_t> concat;
  std::uint64_t last = first;
  for (;; ++last) {
    const SimPage* q = page_at(last * kSimPage);
    if (!q || q->state == PageState::TrapFilled ||
        (!q->x && q->state != PageState::Pending))
      break;
    concat.insert(concat.end(), q->bytes.begin(), q->bytes.end());
  }
  InspectorConfig icfg;
  icfg.entries = entries;
  if (inspect_region(concat, first * kSimPage, icfg).pass()) {
    p->state = PageState::Normal;
    p->x = true;
    record(t, "inspect-pass", addr);
    return true;
  }
  if (cfg.rewrite_on_fault) {
    // Rebuild the page under the runtime protocol; needs free room after
    // it for detour overflow.
    const std::uint64_t page_va = (addr / kSimPage) * kSimPage;
    const std::uint64_t room = 4 * kSimPage;
    for (std::uint64_t i = 1; i < room / kSimPage; ++i) {
      if (pages.count(addr / kSimPage + i)) {
        terminate(t, "rewrite-no-room", addr);
        return false;
      }
    }
    std::vector<std::uint8_t> content = std::move(p->bytes);
    const std::uint8_t domain = p->domain;
    pages.erase(addr / kSimPage);
    if (!map_trap_region(page_va, content, domain, room)) {
      terminate(t, "rewrite-no-room", addr);
      return false;
    }
    record(t, "rewrite-arm", page_va);
    return true;
  }
  terminate(t, "unsafe-code", addr);
  return false;
}

bool Machine::trap_fault(SimThread& t) {
  SimPage* p = page_at(t.st.rip);
  TrapRegion& r = trap_regions[static_cast<std::size_t>(p->region)];
  const std::uint64_t off = t.st.rip - r.base;
  if (r.rt.vetted.count(off)) {
    // A vetted trap byte is a genuine int3 in the original code.
    terminate(t, "fault-trap", t.st.rip);
    return false;
  }
  std::string why;
  const RewriteStatus rs = runtime_rewrite(r.rt, off, {}, &why);
  if (rs != RewriteStatus::Ok) {
    record(t, "runtime-rewrite-failed", off);
    terminate(t, "fault-subset", t.st.rip);
    return false;
  }
  if (r.rt.current.size() > r.room) {
    terminate(t, "detour-overflow", t.st.rip);
    return false;
  }
  record(t, "runtime-rewrite", off, r.rt.current.size());
  return true;
}

Env::Sys Machine::do_syscall(SimThread& t, MachineState& st) {
  const std::uint64_t nr = st.reg(Reg::rax);
  const std::uint64_t a0 = st.reg(Reg::rdi);
  const std::uint64_t a1 = st.reg(Reg::rsi);
  const std::uint64_t a2 = st.reg(Reg::rdx);
  const std::uint64_t a3 = st.reg(Reg::r10);
  record(t, "syscall", nr, a0);
  const bool in_t = pkru::allows_write(st.pkru, cfg.trusted_domain);
  if (!in_t && cfg.u_denied_syscalls.count(nr)) {
    record(t, "filter-denied", nr);
    return {false, 0, kEacces};
  }
  switch (nr) {
    case 60:
      return {true, static_cast<int>(a0), 0};
    case 1: {  // write(fd, buf, len)
      if (a2 > kSimPage) return {false, 0, kEinval};
      std::vector<std::uint8_t> buf(a2);
      for (std::uint64_t i = 0; i < a2; ++i) {
        const SimPage* p = page_at(a1 + i);
        if (!p || !p->r || !pkru::allows_read(st.pkru, p->domain))
          return {false, 0, kEfault};
        peek(a1 + i, std::span<std::uint8_t>(&buf[i], 1));
      }
      if (a0 == 1) output.insert(output.end(), buf.begin(), buf.end());
      record(t, "write", a1, a2);
      return {false, 0, a2};
    }
    case 9: {  // mmap(addr, len, prot)
      const std::uint64_t len = (a1 + kSimPage - 1) / kSimPage * kSimPage;
      if (len == 0) return {false, 0, kEinval};
      const bool want_w = a2 & 2, want_x = a2 & 4;
      if (want_w && want_x) {
        record(t, "dep-denied", a2);
        return {false, 0, kEacces};
      }
      if (want_x && !in_t) {
        record(t, "interception-denied", nr);
        return {false, 0, kEacces};
      }
      std::uint64_t va = a0;
      if (va == 0 || va % kSimPage) {
        va = mmap_next_;
        mmap_next_ += len + kSimPage;
      }
      const bool pending = want_x && cfg.inspect == InspectWhen::OnDemand &&
                           cfg.inspection_enabled;
      if (!map_region(va, len, 0, a2 & 1, want_w, want_x, {},
                      pending ? PageState::Pending : PageState::Normal))
        return {false, 0, kEnomem};
      record(t, "mmap", va, len);
      return {false, 0, va};
    }
    case 10:    // mprotect(addr, len, prot)
    case 329: {  // pkey_mprotect(addr, len, prot, pkey)
      if (a0 % kSimPage || a1 == 0) return {false, 0, kEinval};
      const std::uint64_t len = (a1 + kSimPage - 1) / kSimPage * kSimPage;
      const bool want_r = a2 & 1, want_w = a2 & 2, want_x = a2 & 4;
      if (want_w && want_x) {
        record(t, "dep-denied", a2);
        return {false, 0, kEacces};
      }
      std::uint8_t pkey = 0;
      if (nr == 329) {
        if (a3 >= pkru::kDomainCount) return {false, 0, kEinval};
        if (!in_t) {
          // Domain retagging is reserved to the trusted component.
          record(t, "interception-denied", nr);
          return {false, 0, kEacces};
        }
        pkey = static_cast<std::uint8_t>(a3);
      }
      if (want_x && !in_t) {
        record(t, "interception-denied", nr);
        return {false, 0, kEacces};
      }
      for (std::uint64_t i = 0; i < len; i += kSimPage) {
        const SimPage* p = page_at(a0 + i);
        if (!p) return {false, 0, kEnomem};
        if (p->state == PageState::TrapFilled) return {false, 0, kEperm};
      }
      if (want_x && cfg.inspection_enabled &&
          cfg.inspect == InspectWhen::Eager) {
        std::vector<std::uint8_t> concat;
        for (std::uint64_t i = 0; i < len; i += kSimPage)
          concat.insert(concat.end(), page_at(a0 + i)->bytes.begin(),
                        page_at(a0 + i)->bytes.end());
        InspectorConfig icfg;
        icfg.entries = entries;
        if (!inspect_region(concat, a0, icfg).pass()) {
          record(t, "inspect-fail", a0);
          return {false, 0, kEperm};
        }
        record(t, "inspect-pass", a0);
      }
      const bool pend = want_x && cfg.inspection_enabled &&
                        cfg.inspect == InspectWhen::OnDemand;
      for (std::uint64_t i = 0; i < len; i += kSimPage) {
        SimPage* p = page_at(a0 + i);
        p->r = want_r || pend;
        p->w = pend ? false : want_w;
        p->x = pend ? false : want_x;
        p->state = pend ? PageState::Pending : PageState::Normal;
        if (nr == 329) p->domain = pkey;
      }
      record(t, nr == 329 ? "pkey-mprotect" : "mprotect", a0, a2);
      return {false, 0, 0};
    }
    default:
      record(t, "syscall-unknown", nr);
      return {false, 0, kEnosys};
  }
}

bool Machine::step_thread(SimThread& t) {
  MachineEnv env(this, &t);
  env.cur_pc = t.st.rip;
  if (t.entry_grace >= 0 && entries.count(t.st.rip)) t.entry_grace = -1;
  const StepResult sr = interp_step(t.st, env);
  if (sr.kind == StepKind::Ok) {
    if (t.entry_grace >= 0) {
      if (env.mt_touched)
        violation(t, "mt-during-transition", env.cur_pc);
      if (--t.entry_grace < 0) {
        violation(t, "no-entry-after-raise", env.cur_pc);
      }
    }
    if (sr.pkru_written) {
      record(t, "pkru-write", sr.pkru_before, t.st.pkru);
      // A raise at a registered entry is the sanctioned gate path; any
      // other raise starts the countdown to reach one or die.
      if (cfg.check_entry_transition && !entries.count(env.cur_pc) &&
          raised(sr.pkru_before, t.st.pkru, cfg.trusted_domain))
        t.entry_grace = kEntryGrace;
    }
    return true;
  }
  if (sr.kind == StepKind::Exit) {
    record(t, "exit", static_cast<std::uint64_t>(sr.exit_code));
    t.alive = false;
    exited = true;
    exit_code = sr.exit_code;
    return true;
  }
  // Fault triage. The interpreter committed nothing.
  if (sr.fault == FaultKind::Trap) {
    const SimPage* p = page_at(t.st.rip);
    if (p && p->state == PageState::TrapFilled) return trap_fault(t);
  }
  if (env.blocked && env.blocked->first == Access::Fetch) {
    const SimPage* p = page_at(env.blocked->second);
    if (p && p->state == PageState::Pending)
      return exec_fault(t, env.blocked->second);
  }
  terminate(t, fault_name(sr.fault), sr.fault_addr);
  return false;
}

bool Machine::step_once() {
  if (exited || threads.empty()) return false;
  const std::size_t n = threads.size();
  std::size_t scans = 0;
  while (scans <= n && !threads[sched_rr_ % n].alive) {
    ++sched_rr_;
    ++scans;
    sched_quantum_ = 0;
  }
  SimThread& t = threads[sched_rr_ % n];
  if (!t.alive) return false;
  if (sched_quantum_ == 0) sched_quantum_ = 1 + next_rng() % 4;
  --sched_quantum_;
  if (sched_quantum_ == 0) ++sched_rr_;  // rotate after this tick
  for (std::size_t i = 0; i < signal_queue_.size(); ++i) {
    const Pending& s = signal_queue_[i];
    if (s.thread != t.id) continue;
    if (s.at_step && steps < *s.at_step) continue;
    const std::uint64_t handler = s.handler;
    signal_queue_.erase(signal_queue_.begin() +
                        static_cast<std::ptrdiff_t>(i));
    deliver_signal(t, handler);
    ++steps;
    return true;
  }
  ++steps;
  step_thread(t);
  return true;
}

void Machine::run_machine(std::uint64_t max_steps) {
  const std::uint64_t stop = steps + max_steps;
  while (steps < stop && step_once()) {
  }
}

bool Machine::peek(std::uint64_t addr, std::span<std::uint8_t> out) const {
  for (std::size_t i = 0; i < out.size(); ++i) {
    const SimPage* p = page_at(addr + i);
    if (!p) return false;
    if (p->state == PageState::TrapFilled) {
      const TrapRegion& r =
          trap_regions[static_cast<std::size_t>(p->region)];
      const std::uint64_t off = addr + i - r.base;
      out[i] = off < r.rt.current.size() ? r.rt.current[off] : 0xCC;
    } else {
      out[i] = p->bytes[(addr + i) % kSimPage];
    }
  }
  return true;
}

bool Machine::executable_at(std::uint64_t addr) const {
  const SimPage* p = page_at(addr);
  return p && (p->x || p->state == PageState::TrapFilled);
}

std::vector<MachineState> sweep_presets(std::uint64_t seed, std::size_t count,
                                        std::uint64_t stack_lo,
                                        std::uint64_t stack_hi) {
  std::vector<MachineState> out(count);
  std::uint64_t x = seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull;
  const std::uint64_t usable =
      stack_hi > stack_lo + 64 ? stack_hi - stack_lo - 64 : 8;
  for (std::size_t i = 0; i < count; ++i) {
    for (auto& r : out[i].regs) r = splitmix(x);
    out[i].reg(Reg::rsp) = stack_lo + splitmix(x) % usable / 8 * 8 + 64;
    out[i].flags.cf = splitmix(x) & 1;
    out[i].flags.zf = splitmix(x) & 1;
    out[i].flags.sf = splitmix(x) & 1;
    out[i].flags.of = splitmix(x) & 1;
    out[i].pkru = pkru::kDisallowTrusted;
    if (i % 2 == 0) {
      // Armed preset: operands set so a reached raise window actually
      // executes instead of faulting on its operand contract.
      out[i].reg(Reg::rax) = pkru::kAllowTrusted;
      out[i].reg(Reg::rcx) = 0;
      out[i].reg(Reg::rdx) = 0;
    }
  }
  return out;
}

SweepReport attack_sweep(const Machine& proto, std::uint64_t lo,
                         std::uint64_t hi,
                         const std::vector<MachineState>& presets,
                         std::uint64_t budget) {
  std::vector<std::uint64_t> execs;
  for (std::uint64_t a = lo; a < hi; ++a)
    if (proto.executable_at(a)) execs.push_back(a);
  SweepReport rep;
  rep.offsets = execs.size();
  std::vector<std::vector<SweepHit>> hits(execs.size());
  std::vector<std::uint64_t> budget_outs(execs.size(), 0);
  const std::int64_t total = static_cast<std::int64_t>(execs.size());
#pragma omp parallel for schedule(dynamic, 64)
  for (std::int64_t i = 0; i < total; ++i) {
    const std::uint64_t start = execs[static_cast<std::size_t>(i)];
    for (std::size_t pi = 0; pi < presets.size(); ++pi) {
      Machine m = proto;
      m.cfg.record_and_continue = true;
      m.cfg.seed = proto.cfg.seed ^ (start * 0x100000001B3ull + pi);
      m.threads.clear();
      m.trace.clear();
      m.violations.clear();
      m.trace_dropped = 0;
      m.violations_overflow = 0;
      m.output.clear();
      m.steps = 0;
      m.exited = false;
      m.exit_code = 0;
      SimThread t;
      t.id = 0;
      t.st = presets[pi];
      t.st.rip = start;
      t.st.pkru = pkru::kDisallowTrusted;
      m.threads.push_back(std::move(t));
      m.run_machine(budget);
      if (!m.exited && m.threads[0].alive)
        ++budget_outs[static_cast<std::size_t>(i)];
      for (const TraceEvent& v : m.violations) {
        if (v.event != "mt-read-outside-t" && v.event != "mt-write-outside-t")
          continue;
        hits[static_cast<std::size_t>(i)].push_back(
            {start, pi, v.b, v.a, v.event == "mt-write-outside-t"});
      }
    }
  }
  for (std::size_t i = 0; i < hits.size(); ++i) {
    rep.runs += presets.size();
    rep.budget_out += budget_outs[i];
    rep.hits.insert(rep.hits.end(), hits[i].begin(), hits[i].end());
  }
  return rep;
}

}  // namespace erim
