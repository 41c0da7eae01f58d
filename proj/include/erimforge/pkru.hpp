#pragma once

// PKRU register convention used throughout: bit 2i grants domain i read
// access, bit 2i+1 grants domain i write access. A clear bit denies.

#include <cstdint>

namespace erim::pkru {

inline constexpr unsigned kUntrustedDomain = 0;
inline constexpr unsigned kTrustedDomain = 1;
inline constexpr unsigned kDomainCount = 16;

// Untrusted and trusted both readable and writable.
inline constexpr std::uint32_t kAllowTrusted = 0x0000000f;
// Only the untrusted domain accessible.
inline constexpr std::uint32_t kDisallowTrusted = 0x00000003;
// Trusted domain readable but not writable (integrity-only protection).
inline constexpr std::uint32_t kDisallowTrustedWrites = 0x00000007;

constexpr std::uint32_t read_bit(unsigned domain) { return 1u << (2 * domain); }

constexpr std::uint32_t write_bit(unsigned domain) {
  return 1u << (2 * domain + 1);
}

constexpr bool allows_read(std::uint32_t pkru, unsigned domain) {
  return (pkru & read_bit(domain)) != 0;
}

constexpr bool allows_write(std::uint32_t pkru, unsigned domain) {
  return (pkru & write_bit(domain)) != 0;
}

constexpr bool allows(std::uint32_t pkru, unsigned domain, bool write) {
  return write ? allows_write(pkru, domain) : allows_read(pkru, domain);
}

}  // namespace erim::pkru
