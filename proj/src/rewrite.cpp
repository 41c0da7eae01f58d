#include "erimforge/rewrite.hpp"

#include <algorithm>
#include <cassert>
#include <cstdio>
#include <cstring>
#include <limits>

#include "erimforge/gates.hpp"
#include "erimforge/inspect.hpp"

namespace erim {

namespace {

using x86::Instr;
using x86::MemRef;
using x86::Mn;
using x86::Operand;
using x86::Reg;
using x86::Width;
namespace build = x86::build;

const char* kOverlapNames[] = {"opcode", "modrm", "displacement", "immediate",
                               "cross-instruction"};
const char* kStatusNames[] = {"ok",
                              "not in subset",
                              "no applicable rule",
                              "relocation overflow",
                              "target inside absorbed code",
                              "iteration limit"};

struct Slot {
  std::uint64_t off = 0;
  Instr in{};
  std::uint64_t end() const { return off + in.length; }
};

struct Index {
  std::vector<Slot> v;  // sorted by off, non-overlapping

  const Slot* at(std::uint64_t off) const {
    auto it = std::lower_bound(
        v.begin(), v.end(), off,
        [](const Slot& s, std::uint64_t o) { return s.off < o; });
    if (it == v.end() || it->off != off) return nullptr;
    return &*it;
  }

  const Slot* covering(std::uint64_t off) const {
    auto it = std::upper_bound(
        v.begin(), v.end(), off,
        [](std::uint64_t o, const Slot& s) { return o < s.off; });
    if (it == v.begin()) return nullptr;
    --it;
    return off < it->end() ? &*it : nullptr;
  }
};

bool build_linear(std::span<const std::uint8_t> code, Index* ix,
                  std::string* why) {
  ix->v.clear();
  std::uint64_t pos = 0;
  while (pos < code.size()) {
    auto dr = x86::decode(code, pos);
    if (dr.status != x86::DecodeStatus::Ok) {
      if (why) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "cannot decode at offset 0x%llx",
                      static_cast<unsigned long long>(pos));
        *why = buf;
      }
      return false;
    }
    ix->v.push_back({pos, dr.instr});
    pos += dr.instr.length;
  }
  return true;
}

Index from_vetted(std::span<const std::uint8_t> code,
                  const std::map<std::uint64_t, std::uint8_t>& vetted) {
  Index ix;
  for (auto [off, len] : vetted) {
    auto dr = x86::decode(code, off);
    assert(dr.status == x86::DecodeStatus::Ok && dr.instr.length == len);
    static_cast<void>(len);
    ix.v.push_back({off, dr.instr});
  }
  return ix;
}

void set_why(std::string* why, const char* msg) {
  if (why) *why = msg;
}

const Operand* mem_operand(const Instr& in) {
  if (in.dst.k == Operand::K::Mem) return &in.dst;
  if (in.src.k == Operand::K::Mem) return &in.src;
  return nullptr;
}

bool has_rip_rel(const Instr& in) {
  const Operand* m = mem_operand(in);
  return m && m->mem.rip_rel;
}

// Rebuilds the instruction with a different memory operand. Empty optional
// when the subset has no builder for the form.
std::optional<Instr> with_mem(const Instr& in, const MemRef& m) {
  const bool dst_mem = in.dst.k == Operand::K::Mem;
  const Width w = in.width;
  switch (in.mn) {
    case Mn::Mov:
      if (!dst_mem) return build::mov_rm(in.dst.reg, m, w);
      if (in.src.k == Operand::K::Reg) return build::mov_mr(m, in.src.reg, w);
      return build::mov_mi(m, static_cast<std::uint32_t>(in.imm), w);
    case Mn::Add:
    case Mn::Sub:
    case Mn::Xor:
    case Mn::Cmp:
      if (!dst_mem) return build::alu_rm(in.mn, in.dst.reg, m, w);
      if (in.src.k == Operand::K::Reg)
        return build::alu_mr(in.mn, m, in.src.reg, w);
      return build::alu_mi(in.mn, m, static_cast<std::uint32_t>(in.imm), w);
    case Mn::Bt:
      return build::bt_mi(m, static_cast<std::uint8_t>(in.imm), w);
    case Mn::Xrstor:
      return build::xrstor(m);
    case Mn::Call:
      return build::call_mem(m);
    case Mn::Jmp:
      return build::jmp_mem(m);
    default:
      return std::nullopt;
  }
}

constexpr Reg kPool[] = {Reg::rcx, Reg::rbx, Reg::rsi, Reg::rdi, Reg::rax,
                         Reg::rdx, Reg::r8,  Reg::r9,  Reg::r10, Reg::r11,
                         Reg::r14, Reg::r15, Reg::r12, Reg::r13};

std::vector<Reg> scratch_pool(const RewritePolicy& pol, std::uint32_t used,
                              bool short_encodable_only) {
  std::vector<Reg> out;
  auto consider = [&](Reg r) {
    const int id = x86::reg_id(r);
    if (r == Reg::rsp || r == Reg::rbp) return;
    if ((used >> id) & 1u) return;
    if (short_encodable_only && ((id & 7) == 4 || (id & 7) == 5)) return;
    out.push_back(r);
  };
  if (!pol.scratch_candidates.empty()) {
    for (Reg r : pol.scratch_candidates) consider(r);
  } else {
    for (Reg r : kPool) consider(r);
  }
  return out;
}

void emit(std::vector<std::uint8_t>& out, const Instr& in) {
  for (std::uint8_t b : x86::encode(in)) out.push_back(b);
}

// Flag-free sequences leaving value in s, in preference order. Variants
// after the first flip the second byte of the immediate and repair it
// through the high byte register, so they need s in rax..rbx.
std::vector<std::vector<std::uint8_t>> materialize_variants(
    std::uint64_t value, Reg s) {
  std::vector<std::vector<std::uint8_t>> out;
  const bool fits_u32 = (value >> 32) == 0;
  const bool fits_s32 =
      static_cast<std::uint64_t>(static_cast<std::int64_t>(
          static_cast<std::int32_t>(value))) == value;

  // A byte 1 flip touches neither bit 31 nor the upper half, so a flipped
  // value fits wherever the original does.
  auto plain = [&](std::uint64_t v) {
    Instr in = fits_u32 ? build::mov_ri(s, v, Width::B32)
               : fits_s32
                   ? build::mov_ri_s32(s, static_cast<std::int32_t>(v))
                   : build::mov_ri(s, v, Width::B64);
    std::vector<std::uint8_t> seq;
    emit(seq, in);
    return seq;
  };

  out.push_back(plain(value));
  if (x86::reg_id(s) <= 3) {
    const auto b1 = static_cast<std::uint8_t>(value >> 8);
    for (int x : {0xFF, 0x55, 0xAA, 0x11, 0x77, 0x33, 0x0F}) {
      auto seq = plain(value ^ (static_cast<std::uint64_t>(x) << 8));
      emit(seq, build::mov_high8(s, b1));
      out.push_back(std::move(seq));
    }
  }
  return out;
}

bool self_clean(std::span<const std::uint8_t> bytes, std::uint32_t disallow) {
  InspectorConfig cfg;
  cfg.accepted_disallow = {disallow};
  return inspect_region(bytes, 0, cfg).pass();
}

struct Candidate {
  std::vector<std::uint8_t> bytes;
  std::optional<Reg> scratch;
  bool spilled = false;
  bool clobbers = false;
  int rule = 0;
};

struct PCtx {
  std::span<const std::uint8_t> code;
  std::uint64_t base = 0;
  const Index& ix;
  const RewritePolicy& pol;
  std::string* why = nullptr;
};

bool accept(const PCtx& c, const Slot& s, OverlapClass cls,
            std::vector<Candidate> cands, RewritePlan* out) {
  for (auto& cand : cands) {
    if (!self_clean(cand.bytes, c.pol.disallow_constant)) continue;
    out->rule = cand.rule;
    out->cls = cls;
    out->begin = s.off;
    out->end = s.end();
    out->replacement = std::move(cand.bytes);
    out->scratch = cand.scratch;
    out->spilled = cand.spilled;
    out->clobbers_flags = cand.clobbers;
    return true;
  }
  return false;
}

bool spill_mode(const RewritePolicy& pol) {
  return !pol.assume_scratch_dead || pol.force_spill;
}

std::vector<std::uint8_t> wrap_spill(Reg s, std::vector<std::uint8_t> body) {
  std::vector<std::uint8_t> out;
  emit(out, build::push(s));
  out.insert(out.end(), body.begin(), body.end());
  emit(out, build::pop(s));
  return out;
}

RewriteStatus plan_opcode(const PCtx& c, const Slot& s, RewritePlan* out) {
  if (s.in.mn == Mn::Wrpkru) {
    std::vector<std::uint8_t> repl;
    emit(repl, s.in);
    auto guard = gates::compare_kill_guard(c.pol.disallow_constant);
    repl.insert(repl.end(), guard.begin(), guard.end());
    std::vector<Candidate> one;
    one.push_back({std::move(repl), std::nullopt, false, true, 1});
    if (accept(c, s, OverlapClass::OpcodeExact, std::move(one), out))
      return RewriteStatus::Ok;
    set_why(c.why, "guarded write sequence failed its own inspection");
    return RewriteStatus::NoApplicableRule;
  }

  const MemRef m = mem_operand(s.in)->mem;
  const auto guard = gates::bittest_kill_guard();

  // Register-direct form with no SIB and no displacement: the window is the
  // tail of the instruction, so the guard can follow it directly.
  if (!s.in.has_sib && s.in.disp_bytes == 0 && !m.rip_rel) {
    std::vector<std::uint8_t> repl;
    emit(repl, s.in);
    repl.insert(repl.end(), guard.begin(), guard.end());
    std::vector<Candidate> one;
    one.push_back({std::move(repl), std::nullopt, false, true, 1});
    if (accept(c, s, OverlapClass::OpcodeExact, std::move(one), out))
      return RewriteStatus::Ok;
    set_why(c.why, "guarded restore sequence failed its own inspection");
    return RewriteStatus::NoApplicableRule;
  }

  // Longer forms are funneled through a scratch register holding the full
  // address, so the guardable register-direct form can take over.
  if (m.base && m.index && m.scale != 1) {
    set_why(c.why, "scaled restore address cannot be folded into a register");
    return RewriteStatus::NoApplicableRule;
  }

  const bool spills = spill_mode(c.pol);
  std::vector<Candidate> cands;
  for (Reg s_reg : scratch_pool(c.pol, x86::regs_referenced(s.in), true)) {
    std::int64_t disp = m.disp;
    if (m.base && *m.base == Reg::rsp && spills) disp += 8;

    std::vector<std::vector<std::uint8_t>> pres;
    if (m.rip_rel) {
      const std::uint64_t ea =
          c.base + s.end() + static_cast<std::int64_t>(m.disp);
      if (ea >= c.base && ea < c.base + c.code.size()) {
        set_why(c.why, "rip-relative restore points into the rewritten region");
        return RewriteStatus::NoApplicableRule;
      }
      pres = materialize_variants(ea, s_reg);
    } else if (!m.base && !m.index) {
      pres = materialize_variants(
          static_cast<std::uint64_t>(static_cast<std::int64_t>(m.disp)),
          s_reg);
    } else {
      if (disp < std::numeric_limits<std::int32_t>::min() ||
          disp > std::numeric_limits<std::int32_t>::max())
        continue;
      std::vector<std::uint8_t> seq;
      const Reg first = m.base ? *m.base : *m.index;
      emit(seq, build::mov_rr(s_reg, first, Width::B64));
      if (m.base && m.index)
        emit(seq, build::alu_rr(Mn::Add, s_reg, *m.index, Width::B64));
      if (disp != 0)
        emit(seq, build::alu_ri(Mn::Add, s_reg,
                                static_cast<std::uint32_t>(disp), Width::B64));
      pres.push_back(std::move(seq));
    }

    for (auto& pre : pres) {
      std::vector<std::uint8_t> body = pre;
      emit(body, build::xrstor({.base = s_reg}));
      body.insert(body.end(), guard.begin(), guard.end());
      if (spills) body = wrap_spill(s_reg, std::move(body));
      cands.push_back({std::move(body), s_reg, spills, true, 1});
    }
  }
  if (accept(c, s, OverlapClass::OpcodeExact, std::move(cands), out))
    return RewriteStatus::Ok;
  set_why(c.why, "no scratch register yields a clean guardable restore");
  return RewriteStatus::NoApplicableRule;
}

RewriteStatus plan_modrm(const PCtx& c, const Slot& s, RewritePlan* out) {
  const Operand* mo = mem_operand(s.in);
  if (!mo) {
    set_why(c.why, "window crosses addressing bytes of a register form");
    return RewriteStatus::NoApplicableRule;
  }
  const MemRef m = mo->mem;
  std::vector<Candidate> cands;

  // Swapping base and index re-encodes the SIB byte at no runtime cost.
  if (!c.pol.force_spill && m.base && m.index && m.scale == 1 &&
      *m.base != Reg::rsp) {
    MemRef m2 = m;
    std::swap(m2.base, m2.index);
    if (auto in2 = with_mem(s.in, m2)) {
      std::vector<std::uint8_t> body;
      emit(body, *in2);
      cands.push_back({std::move(body), std::nullopt, false, false, 2});
    }
  }

  const bool spills = spill_mode(c.pol);
  for (Reg s_reg : scratch_pool(c.pol, x86::regs_referenced(s.in), false)) {
    if (m.rip_rel) {
      const std::uint64_t ea =
          c.base + s.end() + static_cast<std::int64_t>(m.disp);
      if (ea >= c.base && ea < c.base + c.code.size()) continue;
      auto in2 = with_mem(s.in, {.base = s_reg});
      if (!in2) continue;
      for (auto& pre : materialize_variants(ea, s_reg)) {
        std::vector<std::uint8_t> body = pre;
        emit(body, *in2);
        if (spills) body = wrap_spill(s_reg, std::move(body));
        cands.push_back(
            {std::move(body), s_reg, spills, false, spills ? 3 : 2});
      }
      continue;
    }
    for (int which = 0; which < 2; ++which) {
      const std::optional<Reg>& victim = which == 0 ? m.base : m.index;
      if (!victim) continue;
      MemRef m2 = m;
      if (which == 0)
        m2.base = s_reg;
      else
        m2.index = s_reg;
      if (*victim == Reg::rsp && spills) {
        if (m2.disp > std::numeric_limits<std::int32_t>::max() - 8) continue;
        m2.disp += 8;
        m2.disp_bytes = 4;
      }
      auto in2 = with_mem(s.in, m2);
      if (!in2) continue;
      std::vector<std::uint8_t> body;
      emit(body, build::mov_rr(s_reg, *victim, Width::B64));
      emit(body, *in2);
      if (spills) body = wrap_spill(s_reg, std::move(body));
      cands.push_back({std::move(body), s_reg, spills, false, spills ? 3 : 2});
    }
  }
  if (accept(c, s, OverlapClass::ModRm, std::move(cands), out))
    return RewriteStatus::Ok;
  set_why(c.why, "no register substitution cleans the addressing bytes");
  return RewriteStatus::NoApplicableRule;
}

RewriteStatus plan_mem_disp(const PCtx& c, const Slot& s, RewritePlan* out) {
  const Operand* mo = mem_operand(s.in);
  if (!mo) {
    set_why(c.why, "window in a displacement of an unknown form");
    return RewriteStatus::NoApplicableRule;
  }
  const MemRef m = mo->mem;
  const bool spills = spill_mode(c.pol);
  std::vector<Candidate> cands;

  for (Reg s_reg : scratch_pool(c.pol, x86::regs_referenced(s.in), false)) {
    std::int64_t disp = m.disp;
    if (m.base && *m.base == Reg::rsp && spills) disp += 8;
    const auto dval = static_cast<std::uint64_t>(disp);

    std::vector<std::vector<std::uint8_t>> pres;
    MemRef m2{};
    bool clobbers = false;
    if (m.rip_rel) {
      const std::uint64_t ea =
          c.base + s.end() + static_cast<std::int64_t>(m.disp);
      if (ea >= c.base && ea < c.base + c.code.size()) {
        set_why(c.why, "rip-relative reference into the rewritten region");
        return RewriteStatus::NoApplicableRule;
      }
      pres = materialize_variants(ea, s_reg);
      m2 = {.base = s_reg};
    } else if (m.base && !m.index) {
      pres = materialize_variants(dval, s_reg);
      m2 = {.base = *m.base, .index = s_reg, .scale = 1};
    } else if (!m.base && m.index) {
      pres = materialize_variants(dval, s_reg);
      m2 = {.base = s_reg, .index = *m.index, .scale = m.scale};
    } else if (!m.base && !m.index) {
      pres = materialize_variants(dval, s_reg);
      m2 = {.base = s_reg};
    } else {
      if (!c.pol.allow_flag_clobber) {
        set_why(c.why,
                "displacement with both address registers in use needs the "
                "flag-clobbering policy");
        return RewriteStatus::NoApplicableRule;
      }
      pres = materialize_variants(dval, s_reg);
      for (auto& p : pres)
        emit(p, build::alu_rr(Mn::Add, s_reg, *m.base, Width::B64));
      m2 = {.base = s_reg, .index = *m.index, .scale = m.scale};
      clobbers = true;
    }

    auto in2 = with_mem(s.in, m2);
    if (!in2) continue;
    for (auto& pre : pres) {
      std::vector<std::uint8_t> body = pre;
      emit(body, *in2);
      if (spills) body = wrap_spill(s_reg, std::move(body));
      cands.push_back({std::move(body), s_reg, spills, clobbers, 4});
    }
  }
  if (accept(c, s, OverlapClass::Displacement, std::move(cands), out))
    return RewriteStatus::Ok;
  set_why(c.why, "no address folding cleans the displacement");
  return RewriteStatus::NoApplicableRule;
}

RewriteStatus plan_branch_disp(const PCtx& c, const Slot& s,
                               RewritePlan* out) {
  assert(s.in.disp_bytes == 4);
  const auto t = static_cast<std::int64_t>(s.end()) + s.in.disp;
  if (t > static_cast<std::int64_t>(s.off) &&
      t < static_cast<std::int64_t>(s.end())) {
    set_why(c.why, "branch targets its own encoding");
    return RewriteStatus::NoApplicableRule;
  }
  const bool fwd = t >= static_cast<std::int64_t>(s.end()) &&
                   t <= static_cast<std::int64_t>(c.code.size());
  const std::uint64_t pos = fwd ? s.end() : s.off;
  const int dir = fwd ? 1 : -1;

  // A pad between the branch and its target moves the displacement by the
  // pad size; probe each size against the bytes that will follow.
  for (int k = 1; k <= 16; ++k) {
    Instr in2 = s.in;
    in2.disp = s.in.disp + dir * k;
    std::vector<std::uint8_t> probe;
    emit(probe, in2);
    const std::uint64_t ctx_end =
        std::min<std::uint64_t>(s.end() + 2, c.code.size());
    for (std::uint64_t o = s.end(); o < ctx_end; ++o)
      probe.push_back(c.code[o]);
    if (!scan(probe).empty()) continue;
    out->rule = 5;
    out->cls = OverlapClass::Displacement;
    out->begin = pos;
    out->end = pos;
    out->replacement.assign(static_cast<std::size_t>(k), 0x90);
    out->scratch.reset();
    out->spilled = false;
    out->clobbers_flags = false;
    return RewriteStatus::Ok;
  }
  set_why(c.why, "no small pad cleans the branch offset");
  return RewriteStatus::NoApplicableRule;
}

RewriteStatus plan_imm(const PCtx& c, const Slot& s, RewritePlan* out) {
  const Instr& in = s.in;
  if (in.imm_bytes < 4) {
    set_why(c.why, "window inside a short immediate");
    return RewriteStatus::NoApplicableRule;
  }
  // The semantic value: 32-bit destinations see the immediate zero
  // extended, 64-bit ones sign extended (or the full 64 bits).
  const std::uint64_t value = in.width == Width::B32
                                  ? static_cast<std::uint32_t>(in.imm)
                                  : static_cast<std::uint64_t>(in.imm);
  const bool spills = spill_mode(c.pol);
  const bool dst_mem = in.dst.k == Operand::K::Mem;
  std::vector<Candidate> cands;

  auto add_assoc_split = [&]() {
    if (!c.pol.allow_flag_clobber) return;
    if (in.mn != Mn::Add && in.mn != Mn::Sub && in.mn != Mn::Xor) return;
    const auto imm32 = static_cast<std::int32_t>(in.imm);
    for (std::int64_t delta :
         {std::int64_t{0x01000000}, std::int64_t{1}, std::int64_t{0x100},
          std::int64_t{0x10000}, std::int64_t{0x01010101},
          std::int64_t{0x10000000}, std::int64_t{-0x01000000}}) {
      std::int32_t p1, p2;
      if (in.mn == Mn::Xor) {
        p1 = imm32 ^ static_cast<std::int32_t>(delta);
        p2 = static_cast<std::int32_t>(delta);
      } else {
        const std::int64_t wide = static_cast<std::int64_t>(imm32) - delta;
        if (wide != static_cast<std::int64_t>(static_cast<std::int32_t>(wide)))
          continue;
        p1 = static_cast<std::int32_t>(wide);
        p2 = static_cast<std::int32_t>(delta);
      }
      std::vector<std::uint8_t> body;
      if (dst_mem) {
        emit(body, build::alu_mi(in.mn, in.dst.mem,
                                 static_cast<std::uint32_t>(p1), in.width));
        emit(body, build::alu_mi(in.mn, in.dst.mem,
                                 static_cast<std::uint32_t>(p2), in.width));
      } else {
        emit(body, build::alu_ri(in.mn, in.dst.reg,
                                 static_cast<std::uint32_t>(p1), in.width));
        emit(body, build::alu_ri(in.mn, in.dst.reg,
                                 static_cast<std::uint32_t>(p2), in.width));
      }
      // Two xors reach the same result and therefore the same flags; for
      // add and sub the intermediate carry leaks into the final flags.
      cands.push_back(
          {std::move(body), std::nullopt, false, in.mn != Mn::Xor, 7});
    }
  };

  // A register move's destination is dead across the instruction, so it
  // doubles as the scratch at no cost.
  auto add_self_repair = [&]() {
    if (in.mn != Mn::Mov || dst_mem) return;
    for (auto& pre : materialize_variants(value, in.dst.reg))
      cands.push_back({std::move(pre), std::nullopt, false, false, 6});
  };

  auto add_scratch_forms = [&]() {
    for (Reg s_reg : scratch_pool(c.pol, x86::regs_referenced(in), false)) {
      for (auto& pre : materialize_variants(value, s_reg)) {
        std::vector<std::uint8_t> body = pre;
        if (dst_mem) {
          MemRef m = in.dst.mem;
          if (m.base && *m.base == Reg::rsp && spills) {
            if (m.disp > std::numeric_limits<std::int32_t>::max() - 8)
              continue;
            m.disp += 8;
            m.disp_bytes = 4;
          }
          if (in.mn == Mn::Mov)
            emit(body, build::mov_mr(m, s_reg, in.width));
          else
            emit(body, build::alu_mr(in.mn, m, s_reg, in.width));
        } else if (in.mn == Mn::Mov) {
          emit(body, build::mov_rr(in.dst.reg, s_reg, in.width));
        } else {
          emit(body, build::alu_rr(in.mn, in.dst.reg, s_reg, in.width));
        }
        if (spills) body = wrap_spill(s_reg, std::move(body));
        cands.push_back({std::move(body), s_reg, spills, false, 6});
      }
    }
  };

  if (c.pol.prefer_assoc_split) {
    add_assoc_split();
    add_self_repair();
    add_scratch_forms();
  } else {
    add_self_repair();
    add_scratch_forms();
    add_assoc_split();
  }
  if (accept(c, s, OverlapClass::Immediate, std::move(cands), out))
    return RewriteStatus::Ok;
  set_why(c.why, "no rewriting of the immediate comes out clean");
  return RewriteStatus::NoApplicableRule;
}

RewriteStatus plan_cross(const Slot& first, std::uint64_t w,
                         RewritePlan* out) {
  const std::uint64_t boundary = first.end();
  assert(boundary > w && boundary < w + 3);
  static_cast<void>(w);
  out->rule = 0;
  out->cls = OverlapClass::CrossInstruction;
  out->begin = boundary;
  out->end = boundary;
  out->replacement = {0x90};  // never part of either pattern
  out->scratch.reset();
  out->spilled = false;
  out->clobbers_flags = false;
  return RewriteStatus::Ok;
}

RewriteStatus locate_with_index(const Index& ix, std::uint64_t base,
                                const Occurrence& occ, OverlapInfo* out,
                                std::string* why) {
  const std::uint64_t w = occ.offset - base;
  const Slot* s = ix.covering(w);
  if (!s) {
    set_why(why, "window not covered by decoded instructions");
    return RewriteStatus::NotInSubset;
  }
  if (w + occ.length > s->end()) {
    const Slot* last = ix.covering(w + occ.length - 1);
    if (!last) {
      set_why(why, "window runs past the decoded instructions");
      return RewriteStatus::NotInSubset;
    }
    *out = {OverlapClass::CrossInstruction, s->off, last->end()};
    return RewriteStatus::Ok;
  }
  const std::uint64_t rel = w - s->off;
  const std::uint64_t rexoff = s->in.rex ? 1 : 0;
  if ((s->in.mn == Mn::Wrpkru || s->in.mn == Mn::Xrstor) && rel == rexoff) {
    *out = {OverlapClass::OpcodeExact, s->off, s->end()};
    return RewriteStatus::Ok;
  }
  const auto& ex = s->in.extents;
  auto hits = [&](std::uint8_t b, std::uint8_t e) {
    return b != e && rel < e && rel + occ.length > b;
  };
  OverlapClass cls;
  if (hits(ex.modrm_begin, ex.modrm_end) || hits(ex.sib_begin, ex.sib_end))
    cls = OverlapClass::ModRm;
  else if (hits(ex.disp_begin, ex.disp_end))
    cls = OverlapClass::Displacement;
  else if (hits(ex.imm_begin, ex.imm_end))
    cls = OverlapClass::Immediate;
  else {
    set_why(why, "window confined to opcode bytes");
    return RewriteStatus::NoApplicableRule;
  }
  *out = {cls, s->off, s->end()};
  return RewriteStatus::Ok;
}

RewriteStatus plan_with_index(std::span<const std::uint8_t> code,
                              const Index& ix, std::uint64_t base,
                              const Occurrence& occ,
                              const RewritePolicy& policy, RewritePlan* out,
                              std::string* why) {
  OverlapInfo ov;
  if (auto st = locate_with_index(ix, base, occ, &ov, why);
      st != RewriteStatus::Ok)
    return st;
  const std::uint64_t w = occ.offset - base;
  const PCtx c{code, base, ix, policy, why};
  const Slot* s = ix.covering(w);
  switch (ov.cls) {
    case OverlapClass::OpcodeExact:
      return plan_opcode(c, *s, out);
    case OverlapClass::ModRm:
      return plan_modrm(c, *s, out);
    case OverlapClass::Displacement:
      return x86::is_rel_branch(s->in) ? plan_branch_disp(c, *s, out)
                                       : plan_mem_disp(c, *s, out);
    case OverlapClass::Immediate:
      return plan_imm(c, *s, out);
    case OverlapClass::CrossInstruction:
      return plan_cross(*s, w, out);
  }
  set_why(why, "unclassifiable window");
  return RewriteStatus::NoApplicableRule;
}

void store_le(std::vector<std::uint8_t>& v, std::uint64_t at,
              std::uint64_t val, unsigned n) {
  for (unsigned i = 0; i < n; ++i)
    v[at + i] = static_cast<std::uint8_t>(val >> (8 * i));
}

bool fits_i8(std::int64_t v) { return v >= -128 && v <= 127; }
bool fits_i32(std::int64_t v) {
  return v >= std::numeric_limits<std::int32_t>::min() &&
         v <= std::numeric_limits<std::int32_t>::max();
}

Instr rel32_form(const Instr& in) {
  switch (in.mn) {
    case Mn::Jmp:
      return build::jmp_rel32(0);
    case Mn::Je:
      return build::je_rel32(0);
    case Mn::Jne:
      return build::jne_rel32(0);
    case Mn::Jnc:
      return build::jnc_rel32(0);
    case Mn::Call:
      return build::call_rel32(0);
    default:
      assert(false);
      return build::jmp_rel32(0);
  }
}

ApplyResult apply_shift(std::span<const std::uint8_t> code,
                        const std::vector<RewritePlan>& plans,
                        const Index& ix) {
  ApplyResult res;
  const std::uint64_t old_size = code.size();

  struct Edit {
    std::uint64_t b = 0, e = 0;
    std::vector<std::uint8_t> bytes;
    const Slot* widen = nullptr;
  };

  // Plan ranges must sit on instruction boundaries and stay disjoint.
  std::vector<Edit> plan_edits;
  for (const auto& p : plans) {
    const bool begin_ok = p.begin == old_size || ix.at(p.begin) != nullptr;
    const bool end_ok = p.begin == p.end || p.end == old_size ||
                        ix.at(p.end) != nullptr;
    if (p.end < p.begin || p.end > old_size || !begin_ok || !end_ok) {
      res.status = RewriteStatus::NoApplicableRule;
      res.error = "plan range does not align with instruction boundaries";
      return res;
    }
    plan_edits.push_back({p.begin, p.end, p.replacement, nullptr});
  }

  std::set<std::uint64_t> widened;
  for (int pass = 0; pass < 64; ++pass) {
    std::vector<Edit> edits = plan_edits;
    for (std::uint64_t off : widened) {
      const Slot* s = ix.at(off);
      std::vector<std::uint8_t> bytes;
      emit(bytes, rel32_form(s->in));
      edits.push_back({off, s->end(), std::move(bytes), s});
    }
    std::stable_sort(edits.begin(), edits.end(),
                     [](const Edit& a, const Edit& b) {
                       if (a.b != b.b) return a.b < b.b;
                       return (a.e == a.b) > (b.e == b.b);
                     });
    for (std::size_t i = 1; i < edits.size(); ++i) {
      if (edits[i].b < edits[i - 1].e) {
        res.status = RewriteStatus::NoApplicableRule;
        res.error = "plans overlap";
        return res;
      }
    }

    // Splice. Offsets in replaced ranges map to the replacement start; an
    // offset at a pure insertion point maps past the inserted bytes, so a
    // branch aimed there still skips the pad.
    std::vector<std::uint8_t> nb;
    std::vector<std::uint64_t> map(old_size + 1, 0);
    std::uint64_t pos = 0;
    for (const Edit& e : edits) {
      for (std::uint64_t o = pos; o < e.b; ++o) map[o] = nb.size() + (o - pos);
      nb.insert(nb.end(), code.begin() + pos, code.begin() + e.b);
      for (std::uint64_t o = e.b; o < e.e; ++o) map[o] = nb.size();
      nb.insert(nb.end(), e.bytes.begin(), e.bytes.end());
      pos = e.e;
    }
    for (std::uint64_t o = pos; o < old_size; ++o)
      map[o] = nb.size() + (o - pos);
    nb.insert(nb.end(), code.begin() + pos, code.end());
    map[old_size] = nb.size();

    auto map_sig = [&](std::int64_t t) -> std::int64_t {
      if (t < 0 || t > static_cast<std::int64_t>(old_size)) return t;
      return static_cast<std::int64_t>(map[static_cast<std::uint64_t>(t)]);
    };

    std::vector<std::pair<std::uint64_t, std::uint64_t>> replaced;
    for (const Edit& e : edits)
      if (e.b < e.e) replaced.emplace_back(e.b, e.e);

    // Re-displace every surviving relative reference.
    bool restart = false;
    std::size_t ri = 0;
    RewriteStatus fail = RewriteStatus::Ok;
    const char* fail_msg = nullptr;
    for (const Slot& s : ix.v) {
      while (ri < replaced.size() && replaced[ri].second <= s.off) ++ri;
      if (ri < replaced.size() && replaced[ri].first <= s.off &&
          s.off < replaced[ri].second)
        continue;
      const bool branch = x86::is_rel_branch(s.in);
      if (!branch && !has_rip_rel(s.in)) continue;
      const std::uint64_t npos = map[s.off];
      const std::int64_t t = static_cast<std::int64_t>(s.end()) + s.in.disp;
      const std::int64_t nd =
          map_sig(t) - static_cast<std::int64_t>(npos + s.in.length);
      if (branch && s.in.disp_bytes == 1) {
        if (!fits_i8(nd)) {
          widened.insert(s.off);
          restart = true;
          continue;
        }
        store_le(nb, npos + s.in.extents.disp_begin,
                 static_cast<std::uint64_t>(nd), 1);
      } else {
        if (!fits_i32(nd)) {
          fail = RewriteStatus::RelocationOverflow;
          fail_msg = branch ? "branch target out of 32-bit range"
                            : "rip-relative reference out of 32-bit range";
          break;
        }
        store_le(nb, npos + s.in.extents.disp_begin,
                 static_cast<std::uint64_t>(nd), 4);
      }
    }
    if (fail != RewriteStatus::Ok) {
      res.status = fail;
      res.error = fail_msg;
      return res;
    }

    // Branches that were widened live inside their replacement bytes now.
    for (const Edit& e : edits) {
      if (!e.widen) continue;
      const Instr wf = rel32_form(e.widen->in);
      const std::uint64_t npos = map[e.b];
      const std::int64_t t =
          static_cast<std::int64_t>(e.widen->end()) + e.widen->in.disp;
      const std::int64_t nd =
          map_sig(t) - static_cast<std::int64_t>(npos + wf.length);
      if (!fits_i32(nd)) {
        res.status = RewriteStatus::RelocationOverflow;
        res.error = "widened branch target out of 32-bit range";
        return res;
      }
      store_le(nb, npos + wf.extents.disp_begin,
               static_cast<std::uint64_t>(nd), 4);
    }

    if (!restart) {
      res.bytes = std::move(nb);
      res.offset_map = std::move(map);
      return res;
    }
  }
  res.status = RewriteStatus::RelocationOverflow;
  res.error = "branch widening did not converge";
  return res;
}

bool slot_disp_dirty(std::span<const std::uint8_t> code, const Slot& s) {
  const std::uint64_t end = std::min<std::uint64_t>(s.end() + 2, code.size());
  for (const auto& occ : scan(code.subspan(s.off, end - s.off), s.off)) {
    const std::uint64_t db = s.off + s.in.extents.disp_begin;
    const std::uint64_t de = s.off + s.in.extents.disp_end;
    if (db != de && occ.offset < de && occ.offset + occ.length > db)
      return true;
  }
  return false;
}

ApplyResult apply_trampoline(std::span<const std::uint8_t> code,
                             const std::vector<RewritePlan>& plans,
                             const Index& ix, std::uint32_t disallow) {
  ApplyResult res;
  const std::uint64_t old_size = code.size();
  res.bytes.assign(code.begin(), code.end());
  res.offset_map.resize(old_size + 1);
  for (std::uint64_t i = 0; i <= old_size; ++i) res.offset_map[i] = i;

  struct TPlan {
    std::uint64_t b = 0, e = 0;
    std::vector<std::uint8_t> repl;
    std::vector<const Slot*> moved;  // re-emitted after repl in the detour
  };

  // Insertions cannot shift anything here; they relocate the instruction
  // they were meant to separate from its neighbour into the detour.
  std::vector<TPlan> tplans;
  for (const auto& p : plans) {
    if (p.begin < p.end) {
      tplans.push_back({p.begin, p.end, p.replacement, {}});
      continue;
    }
    const Slot* after = ix.at(p.begin);
    const Slot* before = nullptr;
    for (const Slot& s : ix.v)
      if (s.end() == p.begin) before = &s;
    const Slot* moved = nullptr;
    if (before && x86::is_rel_branch(before->in) &&
        slot_disp_dirty(code, *before))
      moved = before;
    else if (after && x86::is_rel_branch(after->in) &&
             slot_disp_dirty(code, *after))
      moved = after;
    else if (after)
      moved = after;  // cross-instruction pad: relocate the second half
    else if (before)
      moved = before;
    if (!moved) {
      res.status = RewriteStatus::NoApplicableRule;
      res.error = "insertion point has no instruction to relocate";
      return res;
    }
    tplans.push_back({moved->off, moved->end(), p.replacement, {moved}});
  }

  // Site regions already written by earlier detours must never be absorbed
  // or overwritten again.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> occupied;
  auto overlaps_occupied = [&](std::uint64_t b, std::uint64_t e) {
    for (auto [ob, oe] : occupied)
      if (b < oe && ob < e) return true;
    return false;
  };

  for (const TPlan& tp : tplans) {
    if (overlaps_occupied(tp.b, tp.e)) {
      res.status = RewriteStatus::TargetInsideAbsorbed;
      res.error = "plan range collides with an earlier detour site";
      return res;
    }
    const std::uint64_t range = tp.e - tp.b;
    if (tp.moved.empty() && tp.repl.size() <= range) {
      std::vector<std::uint8_t> site = tp.repl;
      site.resize(static_cast<std::size_t>(range), 0x90);
      std::vector<std::uint8_t> chk;
      const std::uint64_t cb = tp.b >= 2 ? tp.b - 2 : 0;
      chk.insert(chk.end(), res.bytes.begin() + cb, res.bytes.begin() + tp.b);
      chk.insert(chk.end(), site.begin(), site.end());
      const std::uint64_t ce = std::min<std::uint64_t>(tp.e + 2, old_size);
      chk.insert(chk.end(), res.bytes.begin() + tp.e, res.bytes.begin() + ce);
      if (self_clean(chk, disallow)) {
        std::copy(site.begin(), site.end(), res.bytes.begin() + tp.b);
        occupied.emplace_back(tp.b, tp.e);
        continue;
      }
      // otherwise fall through to a detour
    }

    // The site needs five bytes for the detour jump: absorb following
    // instructions until it fits.
    std::uint64_t ar = tp.e;
    std::vector<const Slot*> absorbed;
    while (ar - tp.b < 5) {
      const Slot* nx = ix.at(ar);
      if (!nx) {
        res.status = RewriteStatus::RelocationOverflow;
        res.error = "no room for a detour jump at the site";
        return res;
      }
      bool clash = overlaps_occupied(nx->off, nx->end());
      for (const TPlan& other : tplans)
        if (&other != &tp && nx->off < other.e && other.b < nx->end())
          clash = true;
      if (clash) {
        res.status = RewriteStatus::TargetInsideAbsorbed;
        res.error = "detour would absorb another plan's range";
        return res;
      }
      absorbed.push_back(nx);
      ar = nx->end();
    }

    // A branch landing between the site start and its end would execute
    // pad bytes instead of the displaced instructions.
    for (const Slot& s : ix.v) {
      if (!x86::is_rel_branch(s.in)) continue;
      const std::int64_t t = static_cast<std::int64_t>(s.end()) + s.in.disp;
      if (t > static_cast<std::int64_t>(tp.b) &&
          t < static_cast<std::int64_t>(ar)) {
        res.status = RewriteStatus::TargetInsideAbsorbed;
        res.error = "a branch targets code the detour displaces";
        return res;
      }
    }

    std::vector<const Slot*> outgoing = tp.moved;
    outgoing.insert(outgoing.end(), absorbed.begin(), absorbed.end());

    // A dirty attempt appends a nop to the trampoline area, shifting the
    // detour start and with it every displacement, before retrying.
    bool committed = false;
    for (int attempt = 0; attempt < 16 && !committed; ++attempt) {
      const std::uint64_t t0 = res.bytes.size();
      std::vector<std::uint8_t> tb = tp.repl;
      bool ok = true;
      for (const Slot* s : outgoing) {
        if (x86::is_rel_branch(s->in)) {
          const std::int64_t t =
              static_cast<std::int64_t>(s->end()) + s->in.disp;
          Instr wf = rel32_form(s->in);
          const std::int64_t nd =
              t - static_cast<std::int64_t>(t0 + tb.size() + wf.length);
          if (!fits_i32(nd)) {
            ok = false;
            break;
          }
          wf.disp = static_cast<std::int32_t>(nd);
          emit(tb, wf);
        } else if (has_rip_rel(s->in)) {
          const std::int64_t t =
              static_cast<std::int64_t>(s->end()) + s->in.disp;
          const std::int64_t nd =
              t - static_cast<std::int64_t>(t0 + tb.size() + s->in.length);
          if (!fits_i32(nd)) {
            ok = false;
            break;
          }
          const std::size_t at = tb.size();
          for (std::uint64_t o = s->off; o < s->end(); ++o)
            tb.push_back(code[o]);
          store_le(tb, at + s->in.extents.disp_begin,
                   static_cast<std::uint64_t>(nd), 4);
        } else {
          for (std::uint64_t o = s->off; o < s->end(); ++o)
            tb.push_back(code[o]);
        }
      }
      if (!ok) {
        res.status = RewriteStatus::RelocationOverflow;
        res.error = "detour cannot reach a relative target";
        return res;
      }
      const std::int64_t back = static_cast<std::int64_t>(ar) -
                                static_cast<std::int64_t>(t0 + tb.size() + 5);
      if (!fits_i32(back)) {
        res.status = RewriteStatus::RelocationOverflow;
        res.error = "detour cannot jump back to the site";
        return res;
      }
      emit(tb, build::jmp_rel32(static_cast<std::int32_t>(back)));

      std::vector<std::uint8_t> site;
      emit(site, build::jmp_rel32(static_cast<std::int32_t>(
                     static_cast<std::int64_t>(t0) -
                     static_cast<std::int64_t>(tp.b + 5))));
      site.resize(static_cast<std::size_t>(ar - tp.b), 0x90);

      std::vector<std::uint8_t> chk1;
      const std::uint64_t c1 = t0 >= 2 ? t0 - 2 : 0;
      chk1.insert(chk1.end(), res.bytes.begin() + c1, res.bytes.end());
      chk1.insert(chk1.end(), tb.begin(), tb.end());
      std::vector<std::uint8_t> chk2;
      const std::uint64_t c2 = tp.b >= 2 ? tp.b - 2 : 0;
      chk2.insert(chk2.end(), res.bytes.begin() + c2,
                  res.bytes.begin() + tp.b);
      chk2.insert(chk2.end(), site.begin(), site.end());
      const std::uint64_t c2e = std::min<std::uint64_t>(
          ar + 2, static_cast<std::uint64_t>(res.bytes.size()));
      chk2.insert(chk2.end(), res.bytes.begin() + ar, res.bytes.begin() + c2e);
      if (!self_clean(chk1, disallow) || !self_clean(chk2, disallow)) {
        res.bytes.push_back(0x90);
        continue;
      }

      res.bytes.insert(res.bytes.end(), tb.begin(), tb.end());
      std::copy(site.begin(), site.end(), res.bytes.begin() + tp.b);
      occupied.emplace_back(tp.b, ar);
      ++res.detours;
      committed = true;
    }
    if (!committed) {
      res.status = RewriteStatus::NoApplicableRule;
      res.error = "detour placement always reintroduces a pattern";
      return res;
    }
  }
  return res;
}

ApplyResult apply_with_index(std::span<const std::uint8_t> code,
                             const std::vector<RewritePlan>& plans,
                             GrowthMode mode, const Index& ix,
                             std::uint32_t disallow) {
  if (mode == GrowthMode::Shift) return apply_shift(code, plans, ix);
  return apply_trampoline(code, plans, ix, disallow);
}

}  // namespace

const char* overlap_name(OverlapClass c) {
  return kOverlapNames[static_cast<int>(c)];
}

const char* status_name(RewriteStatus s) {
  return kStatusNames[static_cast<int>(s)];
}

RewriteStatus locate_overlap(std::span<const std::uint8_t> code,
                             std::uint64_t base, const Occurrence& occ,
                             OverlapInfo* out, std::string* why) {
  Index ix;
  if (!build_linear(code, &ix, why)) return RewriteStatus::NotInSubset;
  return locate_with_index(ix, base, occ, out, why);
}

RewriteStatus plan_rewrite(std::span<const std::uint8_t> code,
                           std::uint64_t base, const Occurrence& occ,
                           const RewritePolicy& policy, RewritePlan* out,
                           std::string* why) {
  Index ix;
  if (!build_linear(code, &ix, why)) return RewriteStatus::NotInSubset;
  return plan_with_index(code, ix, base, occ, policy, out, why);
}

ApplyResult apply_plans(std::span<const std::uint8_t> code,
                        std::vector<RewritePlan> plans, GrowthMode mode) {
  ApplyResult res;
  Index ix;
  std::string why;
  if (!build_linear(code, &ix, &why)) {
    res.status = RewriteStatus::NotInSubset;
    res.error = why;
    return res;
  }
  return apply_with_index(code, plans, mode, ix, pkru::kDisallowTrusted);
}

RewriteResult rewrite_all(std::span<const std::uint8_t> code,
                          std::uint64_t base,
                          const std::set<std::uint64_t>& entries,
                          const RewritePolicy& policy, GrowthMode mode) {
  RewriteResult res;
  res.bytes.assign(code.begin(), code.end());
  res.offset_map.resize(code.size() + 1);
  for (std::uint64_t i = 0; i <= code.size(); ++i) res.offset_map[i] = i;

  std::set<std::uint64_t> cur_entries = entries;
  InspectorConfig cfg;
  if (std::find(cfg.accepted_disallow.begin(), cfg.accepted_disallow.end(),
                policy.disallow_constant) == cfg.accepted_disallow.end())
    cfg.accepted_disallow.push_back(policy.disallow_constant);

  for (unsigned iter = 1; iter <= 32; ++iter) {
    cfg.entries = cur_entries;
    auto report = inspect_region(res.bytes, base, cfg);
    std::vector<const SafetyFinding*> unsafe;
    for (const auto& f : report.findings)
      if (!f.safe()) unsafe.push_back(&f);
    if (unsafe.empty()) {
      res.iterations = iter - 1;
      res.entries = cur_entries;
      return res;
    }

    Index ix;
    std::string why;
    if (!build_linear(res.bytes, &ix, &why)) {
      res.status = RewriteStatus::NotInSubset;
      res.error = why;
      return res;
    }

    // One plan per instruction: the first occurrence in an instruction
    // claims it, and the rewrite usually clears its siblings with it.
    std::vector<RewritePlan> plans;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> claimed;
    for (const SafetyFinding* f : unsafe) {
      RewritePlan plan;
      auto st =
          plan_with_index(res.bytes, ix, base, f->occ, policy, &plan, &why);
      if (st != RewriteStatus::Ok) {
        res.status = st;
        res.error = why;
        return res;
      }
      const std::uint64_t cb = plan.begin;
      const std::uint64_t ce = std::max(plan.end, plan.begin + 1);
      bool clash = false;
      for (auto [b, e] : claimed)
        if (cb < e && b < ce) clash = true;
      if (clash) continue;
      claimed.emplace_back(cb, ce);
      res.plans.push_back({iter, plan.rule, plan.cls, plan.begin});
      plans.push_back(std::move(plan));
    }

    auto ap =
        apply_with_index(res.bytes, plans, mode, ix, policy.disallow_constant);
    if (ap.status != RewriteStatus::Ok) {
      res.status = ap.status;
      res.error = ap.error;
      return res;
    }
    const std::uint64_t osz = ap.offset_map.size() - 1;
    res.detours += ap.detours;
    res.bytes = std::move(ap.bytes);
    for (auto& mo : res.offset_map) mo = ap.offset_map[mo];
    std::set<std::uint64_t> remapped;
    for (std::uint64_t e : cur_entries) {
      if (e >= base && e - base <= osz)
        remapped.insert(base + ap.offset_map[e - base]);
      else
        remapped.insert(e);
    }
    cur_entries = std::move(remapped);
  }
  res.status = RewriteStatus::IterationLimit;
  res.error = "rewriting did not reach a fixed point";
  return res;
}

RuntimePageState runtime_page_init(std::vector<std::uint8_t> page) {
  RuntimePageState st;
  st.current.assign(page.size(), 0xCC);
  st.reserve = std::move(page);
  return st;
}

RewriteStatus runtime_rewrite(RuntimePageState& state, std::uint64_t entry,
                              const RewritePolicy& policy, std::string* why) {
  if (entry >= state.reserve.size()) {
    set_why(why, "entry outside the page");
    return RewriteStatus::NotInSubset;
  }
  if (state.entries_done.count(entry)) return RewriteStatus::Ok;

  // Linear sweep from the entry; stops where control cannot fall through.
  // Nothing is committed unless the whole sweep decodes.
  std::map<std::uint64_t, std::uint8_t> fresh;
  std::uint64_t pos = entry;
  const std::span<const std::uint8_t> reserve(state.reserve);
  while (pos < state.reserve.size() && !state.vetted.count(pos) &&
         !fresh.count(pos)) {
    auto dr = x86::decode(reserve, pos);
    if (dr.status != x86::DecodeStatus::Ok) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "cannot decode at page offset 0x%llx",
                    static_cast<unsigned long long>(pos));
      set_why(why, buf);
      return RewriteStatus::NotInSubset;
    }
    fresh.emplace(pos, dr.instr.length);
    const Mn mn = dr.instr.mn;
    pos += dr.instr.length;
    if (mn == Mn::Ret || mn == Mn::Jmp || mn == Mn::Int3) break;
  }
  state.vetted.insert(fresh.begin(), fresh.end());
  state.entries_done.insert(entry);

  const Index ix = from_vetted(reserve, state.vetted);
  auto covered = [&](std::uint64_t off, std::uint64_t len) {
    for (std::uint64_t o = off; o < off + len;) {
      const Slot* s = ix.covering(o);
      if (!s) return false;
      o = s->end();
    }
    return true;
  };

  InspectorConfig icfg;
  if (std::find(icfg.accepted_disallow.begin(), icfg.accepted_disallow.end(),
                policy.disallow_constant) == icfg.accepted_disallow.end())
    icfg.accepted_disallow.push_back(policy.disallow_constant);

  // Occurrences whose window or guard touches unvetted bytes stay masked
  // by traps in the current image and need no plan.
  std::vector<RewritePlan> plans;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> claimed;
  for (const auto& occ : scan(reserve)) {
    if (!covered(occ.offset, occ.length)) continue;
    const Verdict v = classify(reserve, 0, occ, icfg);
    if (v == Verdict::CompareGuard || v == Verdict::BitTestGuard) {
      const std::uint64_t glen =
          v == Verdict::CompareGuard
              ? gates::compare_kill_guard(policy.disallow_constant).size()
              : gates::bittest_kill_guard().size();
      if (covered(occ.offset + occ.length, glen)) continue;
    }
    RewritePlan plan;
    auto st = plan_with_index(reserve, ix, 0, occ, policy, &plan, why);
    if (st != RewriteStatus::Ok) return st;
    const std::uint64_t cb = plan.begin;
    const std::uint64_t ce = std::max(plan.end, plan.begin + 1);
    bool clash = false;
    for (auto [b, e] : claimed)
      if (cb < e && b < ce) clash = true;
    if (clash) continue;
    claimed.emplace_back(cb, ce);
    plans.push_back(std::move(plan));
  }

  auto ap = apply_with_index(reserve, plans, GrowthMode::Trampoline, ix,
                             policy.disallow_constant);
  if (ap.status != RewriteStatus::Ok) {
    if (why) *why = ap.error;
    return ap.status;
  }

  std::vector<std::uint8_t> cur(ap.bytes.size(), 0xCC);
  for (const Slot& s : ix.v)
    std::copy(ap.bytes.begin() + s.off, ap.bytes.begin() + s.end(),
              cur.begin() + s.off);
  std::copy(ap.bytes.begin() + state.reserve.size(), ap.bytes.end(),
            cur.begin() + state.reserve.size());
  state.current = std::move(cur);
  return RewriteStatus::Ok;
}

}  // namespace erim
