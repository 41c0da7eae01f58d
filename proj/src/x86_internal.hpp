#pragma once

#include "erimforge/x86.hpp"

namespace erim::x86::detail {

inline constexpr std::uint8_t kRexW = 0x8, kRexR = 0x4, kRexX = 0x2,
                              kRexB = 0x1;

// Fills length and field extents from the encoding determinants.
inline void layout(Instr& in) {
  std::uint8_t p = 0;
  in.extents = {};
  in.extents.opcode_begin = p;
  p += (in.rex ? 1 : 0) + in.opcode_len;
  in.extents.opcode_end = p;
  in.extents.modrm_begin = in.extents.modrm_end = p;
  if (in.has_modrm) in.extents.modrm_end = ++p;
  in.extents.sib_begin = in.extents.sib_end = p;
  if (in.has_sib) in.extents.sib_end = ++p;
  in.extents.disp_begin = p;
  p += in.disp_bytes;
  in.extents.disp_end = p;
  in.extents.imm_begin = p;
  p += in.imm_bytes;
  in.extents.imm_end = p;
  in.length = p;
}

}  // namespace erim::x86::detail
