#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace nava {

// splitmix64; used to derive independent stream seeds from one master seed.
inline uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return mix_seed(seed ^ mix_seed(stream));
}

// Deterministic RNG: the mt19937_64 engine is fully specified by the
// standard, so sequences are identical across platforms. Distributions are
// implemented here (not via std::*_distribution, which is
// implementation-defined) to keep outputs bit-reproducible.
class Rng {
 public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; one value cached between calls.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    // Engine state round-trips exactly through decimal text.
    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << ' ' << (has_cached_ ? 1 : 0);
        if (has_cached_) {
            os.precision(17);
            os << ' ' << cached_;
        }
        return os.str();
    }

    void deserialize(const std::string& text) {
        std::istringstream is(text);
        is >> engine_;
        int flag = 0;
        is >> flag;
        has_cached_ = flag != 0;
        if (has_cached_) is >> cached_;
    }

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && has_cached_ == other.has_cached_ &&
               (!has_cached_ || cached_ == other.cached_);
    }

 private:
    std::mt19937_64 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace nava
