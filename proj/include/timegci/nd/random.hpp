#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace timegci::nd {

// splitmix64 finalizer; used to derive independent child seeds from a master
// seed plus stream indices, so parallel or per-rollout streams stay stable no
// matter how many draws the parent has made.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    return mix_seed(mix_seed(base ^ 0x6A09E667F3BCC909ULL) + mix_seed(a) + 0x9E3779B97F4A7C15ULL * b);
}

// Seeded random source. Distribution objects are constructed fresh per draw,
// so the only state is the engine itself (which serializes cleanly).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed)) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    // Index in [0, n).
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be positive");
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

    std::uint64_t next_u64() { return engine_(); }

    Rng split(std::uint64_t stream) const { return Rng(derive_seed(0x243F6A8885A308D3ULL, stream)); }

    std::string serialize() const {
        std::ostringstream out;
        out << engine_;
        return out.str();
    }

    void deserialize(const std::string& state) {
        std::istringstream in(state);
        in >> engine_;
        if (!in) throw std::runtime_error("Rng::deserialize: malformed engine state");
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace timegci::nd
