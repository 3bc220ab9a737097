#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace usvid {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based stream derivation: the same (master, counters...) always yields the
/// same seed, independent of the order in which streams are created.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> counters) {
    std::uint64_t s = splitmix64(master);
    for (auto c : counters) s = splitmix64(s ^ splitmix64(c + 0x632be59bd9b4e019ULL));
    return s;
}

inline std::mt19937_64 make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> counters) {
    return std::mt19937_64(derive_seed(master, counters));
}

// Stream tags, so different consumers of one master seed never share a stream.
enum class Stream : std::uint64_t {
    init = 1,
    clip = 2,
    label = 3,
    split = 4,
    group = 5,
    shuffle = 6,
    sample = 7,
    dropout = 8,
    subsample = 9,
    inspect = 10,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace usvid
