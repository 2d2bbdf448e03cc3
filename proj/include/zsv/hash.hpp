#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

namespace zsv {

inline constexpr std::uint64_t fnv1a64_offset_basis = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t fnv1a64_prime = 0x100000001b3ULL;

// FNV-1a 64-bit. Pass a previous digest as `state` to continue hashing.
constexpr std::uint64_t fnv1a64(std::string_view data, std::uint64_t state = fnv1a64_offset_basis) {
  for (unsigned char c : data) {
    state ^= c;
    state *= fnv1a64_prime;
  }
  return state;
}

inline std::string to_hex16(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

// Digest of several fields. Each field is length-prefixed so that
// ("ab", "c") and ("a", "bc") never collide structurally.
inline std::uint64_t fnv1a64_fields(std::initializer_list<std::string_view> fields) {
  std::uint64_t h = fnv1a64_offset_basis;
  for (auto f : fields) {
    h = fnv1a64(std::to_string(f.size()), h);
    h = fnv1a64(":", h);
    h = fnv1a64(f, h);
  }
  return h;
}

inline std::string content_hash(std::string_view data) { return to_hex16(fnv1a64(data)); }

}  // namespace zsv
