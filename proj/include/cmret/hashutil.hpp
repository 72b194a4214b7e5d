#pragma once

#include <cstdint>
#include <string>

namespace cmret {

inline std::uint64_t fnv1a64(const std::string& data, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t value);

inline std::string fnv1a_hex(const std::string& data) { return to_hex(fnv1a64(data)); }

}  // namespace cmret
