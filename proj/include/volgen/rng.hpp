#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace volgen {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent sub-stream seed for a named purpose (data order, latent draws, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
}

// Deterministic random stream. All distributions are hand-rolled on top of
// mt19937_64 so sequences do not depend on the standard library vendor.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // [0,1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n), n > 0; unbiased via rejection
    std::int64_t uniform_int(std::int64_t n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t r;
        do {
            r = eng_();
        } while (r >= limit);
        return static_cast<std::int64_t>(r % un);
    }

    bool coin() { return (eng_() & 1ULL) != 0; }

    // Standard normal via Box-Muller; two uniforms per draw, partner discarded
    // to keep the stream state a pure function of the draw count.
    double normal() {
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace volgen
