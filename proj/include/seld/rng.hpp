// Counter-based random number generation. Every source of randomness in the
// toolkit (init, shuffling, dropout, scene sampling) draws from a CounterRng
// so that a (seed, stream) pair fully determines the byte stream on any
// platform. No libc/std distributions are used anywhere.
#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace seld {

namespace detail {

// splitmix64 finalizer; statistically solid for keyed counter mixing.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

class CounterRng {
public:
    CounterRng() : CounterRng(0, 0) {}
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(detail::mix64(detail::mix64(seed) ^ (0x6a09e667f3bcc909ULL + stream))),
          counter_(0) {}

    std::uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

    void set_counter(std::uint64_t c) { counter_ = c; }
    std::uint64_t counter() const { return counter_; }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive range; multiply-shift reduction (bias < range / 2^64).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        const unsigned __int128 wide =
            static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(range);
        return lo + static_cast<std::int64_t>(wide >> 64);
    }

    // One standard normal per call (Box-Muller, cosine branch; two draws consumed).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Fisher-Yates; std::shuffle is not used because its draw sequence is
    // implementation-defined.
    template <typename RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        const std::int64_t n = static_cast<std::int64_t>(last - first);
        for (std::int64_t i = n - 1; i > 0; --i) {
            const std::int64_t j = uniform_int(0, i);
            std::swap(first[i], first[j]);
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace seld
