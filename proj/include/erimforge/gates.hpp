#pragma once

// Byte sequences for domain-transition call gates and the kill guards that
// make intentional PKRU writes verifiable in place.

#include <cstdint>
#include <vector>

namespace erim::gates {

// MOV eax, 60; SYSCALL. Both guards jump over exactly this stub.
inline constexpr std::size_t kExitStubLength = 7;

// CMP eax, disallow; JE +7; exit stub. Placed directly after a WRPKRU so
// that any attempt to load a value other than `disallow` terminates the
// process. 14 bytes.
std::vector<std::uint8_t> compare_kill_guard(std::uint32_t disallow);

// BT eax, 9; JNC +7; exit stub. Placed directly after an XRSTOR so that a
// restore requesting a PKRU load (XFEATURE bit 9) terminates the process.
// 13 bytes.
std::vector<std::uint8_t> bittest_kill_guard();

// XOR ecx,ecx; XOR edx,edx; MOV eax, allow; WRPKRU. The address after the
// WRPKRU must be registered as a designated entry point.
std::vector<std::uint8_t> enter_sequence(std::uint32_t allow);

// Same prologue with the disallow constant, followed by the compare guard,
// so the transition out of the trusted domain verifies itself.
std::vector<std::uint8_t> exit_sequence(std::uint32_t disallow);

enum class GateKind { Enter, Exit };

// enter -> enter_sequence(allow); exit -> exit_sequence(disallow).
std::vector<std::uint8_t> emit_call_gate(GateKind kind, std::uint32_t allow,
                                         std::uint32_t disallow);

}  // namespace erim::gates
