#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace bits {

// Error classes map 1:1 onto process exit codes at the CLI boundary.
enum class ErrCode : int {
    fail = 1,     // generic failure (verify suite, unexpected)
    config = 2,   // config parse / unknown key / bad flag
    data = 3,     // dataset or file format problems
    numeric = 4,  // divergence, NaN, factorization failure
    invalid = 5,  // precondition violation (shape mismatch etc.)
};

// Detail codes for data errors so callers can distinguish failure modes.
enum class DataErr : int {
    none = 0,
    bad_magic = 1,
    truncated = 2,
    inconsistent = 3,
};

class BitsError : public std::runtime_error {
public:
    BitsError(ErrCode code, const std::string& msg, int detail = 0)
        : std::runtime_error(msg), code_(code), detail_(detail) {}
    ErrCode code() const { return code_; }
    int detail() const { return detail_; }

private:
    ErrCode code_;
    int detail_;
};

[[noreturn]] inline void raise(ErrCode code, const std::string& msg, int detail = 0) {
    throw BitsError(code, msg, detail);
}

// Global worker cap for parallel kernels. 0 or 1 means single-threaded.
// Kernels only parallelize over independent outputs, so results are bitwise
// identical for every thread count.
void set_max_threads(int n);
int max_threads();

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seed derivation for the stateless seeding contract:
// per-sample rng = derive_seed(global_seed, epoch, sample_index).
inline uint64_t derive_seed(uint64_t a, uint64_t b = 0x6d5f2a3c9e8b71ULL, uint64_t c = 0) {
    uint64_t x = a;
    uint64_t h = splitmix64(x);
    x ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= splitmix64(x);
    x ^= c + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return splitmix64(x);
}

// xoshiro256++ with splitmix64 seeding. Small serializable state; all
// distributions are derived from the raw stream here so results do not
// depend on any library's distribution internals.
class Rng {
public:
    using State = std::array<uint64_t, 4>;

    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        return n <= 0 ? 0 : int64_t(next_u64() % uint64_t(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller without spare caching so the state alone determines the stream.
    double normal(double mean = 0.0, double stdev = 1.0) {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stdev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Zero-mean normal rejected outside ±clip_stds standard deviations.
    double trunc_normal(double stdev, double clip_stds = 2.0) {
        for (;;) {
            const double v = normal(0.0, stdev);
            if (std::abs(v) <= clip_stds * stdev) return v;
        }
    }

    State state() const { return s_; }
    void set_state(const State& s) { s_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    State s_;
};

}  // namespace bits
