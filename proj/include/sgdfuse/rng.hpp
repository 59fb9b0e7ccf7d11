#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "sgdfuse/tensor.hpp"

namespace sgdfuse {

// splitmix64; used to derive independent stream seeds from (seed, label) pairs.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic RNG. Gaussian sampling uses an explicit Box-Muller transform so
// the value stream does not depend on the standard library's distribution state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    // Independent substream, stable under call-site reordering.
    Rng derive(const std::string& label, std::uint64_t index = 0) const {
        return Rng(mix64(seed_ ^ mix64(hash_str64(label) + 0x9e3779b97f4a7c15ULL * (index + 1))));
    }

    double uniform() { return (static_cast<double>(engine_() >> 11)) * 0x1.0p-53; } // [0,1)

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(Tensor& t) {
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = normal();
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    }

private:
    std::uint64_t seed_ = 0;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace sgdfuse
