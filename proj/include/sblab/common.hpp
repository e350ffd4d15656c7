#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sblab {

// Error taxonomy. The CLI maps these onto exit codes, so library code should
// throw the most specific type that applies.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct DataFormatError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// splitmix64 finalizer.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Fixed labeled sub-seed derivation: every consumer of randomness hashes its
// own (label, index) pair off a base seed, so adding a consumer never
// perturbs the streams of the others.
inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index = 0) {
    uint64_t s = mix64(base ^ fnv1a64(label));
    return mix64(s ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
}

// Counter-seeded splitmix64 stream. Cheap to construct per item (clip, epoch,
// tensor), which is what keeps generation order-independent.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    static Rng from_words(std::initializer_list<uint64_t> words) {
        uint64_t s = 0x243f6a8885a308d3ULL;
        for (uint64_t w : words) s = mix64(s ^ mix64(w + s));
        return Rng(s);
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1), 53 bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Modulo draw; bias is negligible for the small ranges used here and the
    // result is platform-stable, which is what matters.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// %.17g: shortest text form that round-trips an f64 exactly.
std::string fmt_g17(double v);

}  // namespace sblab
