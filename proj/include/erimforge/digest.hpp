#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace erim {

// SHA-256 over a byte buffer, returned as 64 lowercase hex digits.
// Reports embed this so two runs can be compared by a single line.
std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_hex(const std::string& data);

}  // namespace erim
