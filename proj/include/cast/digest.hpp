#ifndef CAST_DIGEST_HPP
#define CAST_DIGEST_HPP

#include <cstdint>
#include <string>
#include <string_view>

namespace cast {

// FNV-1a 64-bit over raw bytes. Cheap, stable across platforms, good enough
// for artifact provenance binding (not a cryptographic hash).
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string digest_hex(std::string_view bytes) {
    static const char* hexdig = "0123456789abcdef";
    std::uint64_t h = fnv1a64(bytes);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = hexdig[h & 0xf];
        h >>= 4;
    }
    return out;
}

} // namespace cast

#endif
