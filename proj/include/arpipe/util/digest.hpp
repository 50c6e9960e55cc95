#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace arpipe::util {

std::array<std::uint8_t, 32> sha256(std::string_view data);

std::string to_hex(const std::uint8_t* data, std::size_t n);

/// Full 64-char hex digest.
std::string sha256_hex(std::string_view data);

/// First 16 bytes of the digest as 32 hex chars. Identifier-sized, still
/// collision-safe at corpus scale.
std::string sha256_hex16(std::string_view data);

/// First 8 digest bytes as a big-endian u64. Used wherever a stable,
/// platform-independent 64-bit hash is needed (seed derivation, mock RNG).
std::uint64_t stable_hash64(std::string_view data);

/// Seed for a named sub-computation: hash of the base seed and each part,
/// separated by NUL so concatenation ambiguity cannot alias two keys.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::string_view> parts);

} // namespace arpipe::util
