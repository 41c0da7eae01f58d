#include "erimforge/interp.hpp"

#include <cassert>

namespace erim {

namespace {

using x86::Instr;
using x86::Mn;
using x86::Operand;
using x86::Reg;
using x86::Width;

std::uint64_t mask_width(std::uint64_t v, Width w) {
  switch (w) {
    case Width::B8: return v & 0xff;
    case Width::B32: return v & 0xffffffffull;
    case Width::B64: return v;
  }
  return v;
}

struct Arith {
  std::uint64_t result;
  Flags flags;
};

Arith do_add(std::uint64_t a, std::uint64_t b, Width w) {
  const int bits = static_cast<int>(w) * 8;
  const std::uint64_t r = mask_width(a + b, w);
  const std::uint64_t sign = 1ull << (bits - 1);
  Arith out;
  out.result = r;
  out.flags.cf = r < mask_width(a, w);
  out.flags.zf = r == 0;
  out.flags.sf = (r & sign) != 0;
  out.flags.of = ((a ^ ~b) & (a ^ r) & sign) != 0;
  return out;
}

Arith do_sub(std::uint64_t a, std::uint64_t b, Width w) {
  const int bits = static_cast<int>(w) * 8;
  a = mask_width(a, w);
  b = mask_width(b, w);
  const std::uint64_t r = mask_width(a - b, w);
  const std::uint64_t sign = 1ull << (bits - 1);
  Arith out;
  out.result = r;
  out.flags.cf = a < b;
  out.flags.zf = r == 0;
  out.flags.sf = (r & sign) != 0;
  out.flags.of = ((a ^ b) & (a ^ r) & sign) != 0;
  return out;
}

Arith do_xor(std::uint64_t a, std::uint64_t b, Width w) {
  const int bits = static_cast<int>(w) * 8;
  const std::uint64_t r = mask_width(a ^ b, w);
  Arith out;
  out.result = r;
  out.flags.cf = false;
  out.flags.of = false;
  out.flags.zf = r == 0;
  out.flags.sf = (r & (1ull << (bits - 1))) != 0;
  return out;
}

struct Stepper {
  MachineState& st;
  Env& env;
  const Instr& in;
  std::uint64_t rip_end;

  StepResult fault(FaultKind k, std::uint64_t addr = 0) {
    StepResult r;
    r.kind = StepKind::Fault;
    r.fault = k;
    r.fault_addr = addr;
    r.mn = in.mn;
    r.length = in.length;
    return r;
  }

  StepResult mem_fault(MemStatus s, std::uint64_t addr) {
    return fault(s == MemStatus::Unmapped ? FaultKind::Unmapped
                                          : FaultKind::Denied,
                 addr);
  }

  std::uint64_t effective_address(const x86::MemRef& m) const {
    if (m.rip_rel) return rip_end + static_cast<std::int64_t>(m.disp);
    std::uint64_t a = static_cast<std::int64_t>(m.disp);
    if (m.base) a += st.reg(*m.base);
    if (m.index) a += st.reg(*m.index) * m.scale;
    return a;
  }

  // Operand read/write. Loads and stores are sized by the instruction width.
  bool read_operand(const Operand& o, std::uint64_t& value, StepResult& err) {
    switch (o.k) {
      case Operand::K::Reg: {
        std::uint64_t v = st.reg(o.reg);
        if (in.width == Width::B8)
          v = o.high8 ? (v >> 8) & 0xff : v & 0xff;
        value = mask_width(v, in.width);
        return true;
      }
      case Operand::K::Imm:
        value = mask_width(static_cast<std::uint64_t>(o.imm), in.width);
        return true;
      case Operand::K::Mem: {
        const std::uint64_t addr = effective_address(o.mem);
        std::uint8_t buf[8] = {};
        const std::size_t n = static_cast<std::size_t>(in.width);
        const MemStatus s = env.load(addr, n, buf);
        if (s != MemStatus::Ok) {
          err = mem_fault(s, addr);
          return false;
        }
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
        value = v;
        return true;
      }
      case Operand::K::None:
        break;
    }
    assert(false);
    return false;
  }

  bool write_operand(const Operand& o, std::uint64_t value, StepResult& err) {
    switch (o.k) {
      case Operand::K::Reg: {
        std::uint64_t& r = st.reg(o.reg);
        switch (in.width) {
          case Width::B8:
            if (o.high8)
              r = (r & ~0xff00ull) | ((value & 0xff) << 8);
            else
              r = (r & ~0xffull) | (value & 0xff);
            break;
          case Width::B32:
            r = value & 0xffffffffull;  // 32-bit writes zero-extend
            break;
          case Width::B64:
            r = value;
            break;
        }
        return true;
      }
      case Operand::K::Mem: {
        const std::uint64_t addr = effective_address(o.mem);
        const std::size_t n = static_cast<std::size_t>(in.width);
        std::uint8_t buf[8];
        for (std::size_t i = 0; i < n; ++i)
          buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
        const MemStatus s = env.store(addr, n, buf);
        if (s != MemStatus::Ok) {
          err = mem_fault(s, addr);
          return false;
        }
        return true;
      }
      default:
        assert(false);
        return false;
    }
  }

  StepResult ok() {
    StepResult r;
    r.mn = in.mn;
    r.length = in.length;
    return r;
  }

  StepResult push64(std::uint64_t v, StepResult on_ok) {
    const std::uint64_t sp = st.reg(Reg::rsp) - 8;
    std::uint8_t buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::uint8_t>(v >> (8 * i));
    const MemStatus s = env.store(sp, 8, buf);
    if (s != MemStatus::Ok) return mem_fault(s, sp);
    st.reg(Reg::rsp) = sp;
    return on_ok;
  }

  StepResult exec() {
    StepResult err;
    switch (in.mn) {
      case Mn::Nop:
        st.rip = rip_end;
        return ok();

      case Mn::Int3:
        return fault(FaultKind::Trap, st.rip);

      case Mn::Mov: {
        std::uint64_t v;
        if (!read_operand(in.src, v, err)) return err;
        if (!write_operand(in.dst, v, err)) return err;
        st.rip = rip_end;
        return ok();
      }

      case Mn::Add:
      case Mn::Sub:
      case Mn::Xor:
      case Mn::Cmp: {
        std::uint64_t a, b;
        if (!read_operand(in.dst, a, err)) return err;
        if (!read_operand(in.src, b, err)) return err;
        Arith res;
        if (in.mn == Mn::Add)
          res = do_add(a, b, in.width);
        else if (in.mn == Mn::Xor)
          res = do_xor(a, b, in.width);
        else
          res = do_sub(a, b, in.width);
        if (in.mn != Mn::Cmp) {
          if (!write_operand(in.dst, res.result, err)) return err;
        }
        st.flags = res.flags;
        st.rip = rip_end;
        return ok();
      }

      case Mn::Bt: {
        std::uint64_t v, bit;
        if (!read_operand(in.dst, v, err)) return err;
        if (!read_operand(in.src, bit, err)) return err;
        const int bits = static_cast<int>(in.width) * 8;
        st.flags.cf = (v >> (bit % bits)) & 1;  // other flags untouched
        st.rip = rip_end;
        return ok();
      }

      case Mn::Push: {
        StepResult r = push64(st.reg(in.dst.reg), ok());
        if (r.kind == StepKind::Fault) return r;
        st.rip = rip_end;
        return r;
      }

      case Mn::Pop: {
        const std::uint64_t sp = st.reg(Reg::rsp);
        std::uint8_t buf[8] = {};
        const MemStatus s = env.load(sp, 8, buf);
        if (s != MemStatus::Ok) return mem_fault(s, sp);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
        st.reg(Reg::rsp) = sp + 8;
        st.reg(in.dst.reg) = v;
        st.rip = rip_end;
        return ok();
      }

      case Mn::Jmp:
      case Mn::Call: {
        std::uint64_t target;
        if (x86::is_rel_branch(in)) {
          target = rip_end + static_cast<std::int64_t>(in.disp);
        } else if (in.dst.k == Operand::K::Reg) {
          target = st.reg(in.dst.reg);
        } else {
          const std::uint64_t addr = effective_address(in.dst.mem);
          std::uint8_t buf[8] = {};
          const MemStatus s = env.load(addr, 8, buf);
          if (s != MemStatus::Ok) return mem_fault(s, addr);
          target = 0;
          for (int i = 0; i < 8; ++i)
            target |= std::uint64_t(buf[i]) << (8 * i);
        }
        env.control(st.rip, target);
        if (in.mn == Mn::Call) {
          StepResult r = push64(rip_end, ok());
          if (r.kind == StepKind::Fault) return r;
        }
        st.rip = target;
        return ok();
      }

      case Mn::Je:
      case Mn::Jne:
      case Mn::Jnc: {
        bool taken;
        if (in.mn == Mn::Je)
          taken = st.flags.zf;
        else if (in.mn == Mn::Jne)
          taken = !st.flags.zf;
        else
          taken = !st.flags.cf;
        if (taken) {
          const std::uint64_t target =
              rip_end + static_cast<std::int64_t>(in.disp);
          env.control(st.rip, target);
          st.rip = target;
        } else {
          st.rip = rip_end;
        }
        return ok();
      }

      case Mn::Ret: {
        const std::uint64_t sp = st.reg(Reg::rsp);
        std::uint8_t buf[8] = {};
        const MemStatus s = env.load(sp, 8, buf);
        if (s != MemStatus::Ok) return mem_fault(s, sp);
        std::uint64_t target = 0;
        for (int i = 0; i < 8; ++i) target |= std::uint64_t(buf[i]) << (8 * i);
        env.control(st.rip, target);
        st.reg(Reg::rsp) = sp + 8;
        st.rip = target;
        return ok();
      }

      case Mn::Syscall: {
        const Env::Sys out = env.syscall(st);
        if (out.exits) {
          StepResult r = ok();
          r.kind = StepKind::Exit;
          r.exit_code = out.exit_code;
          return r;
        }
        st.reg(Reg::rax) = out.rax;
        st.rip = rip_end;
        return ok();
      }

      case Mn::Wrpkru: {
        if ((st.reg(Reg::rcx) & 0xffffffffull) != 0 ||
            (st.reg(Reg::rdx) & 0xffffffffull) != 0)
          return fault(FaultKind::WrpkruOperands, st.rip);
        StepResult r = ok();
        r.pkru_written = true;
        r.pkru_before = st.pkru;
        st.pkru = static_cast<std::uint32_t>(st.reg(Reg::rax));
        st.rip = rip_end;
        return r;
      }

      case Mn::Xrstor: {
        // Models only the PKRU component: requested iff eax bit 9, value
        // read from the first four bytes of the save area. Everything else
        // is a no-op on the reserved area.
        if (st.reg(Reg::rax) & (1u << 9)) {
          const std::uint64_t addr = effective_address(in.dst.mem);
          std::uint8_t buf[4] = {};
          const MemStatus s = env.load(addr, 4, buf);
          if (s != MemStatus::Ok) return mem_fault(s, addr);
          StepResult r = ok();
          r.pkru_written = true;
          r.pkru_before = st.pkru;
          st.pkru = std::uint32_t(buf[0]) | std::uint32_t(buf[1]) << 8 |
                    std::uint32_t(buf[2]) << 16 | std::uint32_t(buf[3]) << 24;
          st.rip = rip_end;
          return r;
        }
        st.rip = rip_end;
        return ok();
      }
    }
    return fault(FaultKind::NotInSubset);
  }
};

}  // namespace

StepResult interp_step(MachineState& st, Env& env) {
  std::uint8_t buf[15];
  MemStatus tail = MemStatus::Ok;
  const std::size_t got = env.fetch(st.rip, sizeof buf, buf, tail);

  const x86::DecodeResult dr = x86::decode({buf, got});
  if (dr.status == x86::DecodeStatus::Truncated) {
    StepResult r;
    r.kind = StepKind::Fault;
    if (got < sizeof buf && tail != MemStatus::Ok) {
      r.fault = tail == MemStatus::Unmapped ? FaultKind::Unmapped
                                            : FaultKind::Denied;
      r.fault_addr = st.rip + got;
    } else {
      r.fault = FaultKind::TruncatedFetch;
      r.fault_addr = st.rip;
    }
    return r;
  }
  if (dr.status == x86::DecodeStatus::NotInSubset) {
    StepResult r;
    r.kind = StepKind::Fault;
    r.fault = FaultKind::NotInSubset;
    r.fault_addr = st.rip;
    return r;
  }

  Stepper s{st, env, dr.instr, st.rip + dr.instr.length};
  return s.exec();
}

RunResult run(MachineState& st, Env& env, std::uint64_t max_steps,
              std::optional<std::uint64_t> watch_pc) {
  RunResult out;
  for (std::uint64_t i = 0; i < max_steps; ++i) {
    if (watch_pc && !out.hit_watch && st.rip == *watch_pc) {
      out.hit_watch = true;
      out.at_watch = st;
    }
    const StepResult r = interp_step(st, env);
    ++out.steps;
    if (r.kind != StepKind::Ok) {
      out.kind = r.kind;
      out.fault = r.fault;
      out.exit_code = r.exit_code;
      return out;
    }
  }
  return out;
}

}  // namespace erim
