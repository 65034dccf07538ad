#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tvkit {

// All randomness in the library flows from one root seed through named
// substreams, so that independent components (data, init, shuffle, masks)
// never consume from each other's streams.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stable 64-bit key for a (seed, stream-name) pair.
inline std::uint64_t stream_key(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = splitmix64(seed ^ 0x5851f42d4c957f2dULL);
    for (unsigned char c : name) h = splitmix64(h ^ c);
    return h;
}

inline std::uint64_t stream_key(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return splitmix64(stream_key(seed, name) ^ splitmix64(index));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view name) {
    return std::mt19937_64(stream_key(seed, name));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return std::mt19937_64(stream_key(seed, name, index));
}

// Counter-based uniform draw: no state, reentrant. Used where masks or
// assignments must be regenerable without being stored.
inline std::uint64_t counter_rand(std::uint64_t key, std::uint64_t counter) {
    return splitmix64(key ^ splitmix64(counter + 0x2545f4914f6cdd1dULL));
}

}  // namespace tvkit
