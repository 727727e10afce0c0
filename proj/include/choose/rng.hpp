#pragma once

#include <cmath>
#include <cstdint>

namespace choose {

// Deterministic xoshiro256++ stream. One master seed; independent sub-streams
// are derived per (purpose, index) so task generation stays reproducible no
// matter how work is split across threads.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : root_(seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) {
            word = splitmix64(sm);
        }
    }

    // Derived stream, independent of draws already made on this one.
    Rng sub(std::uint64_t purpose, std::uint64_t index = 0) const {
        std::uint64_t sm = root_;
        std::uint64_t a = splitmix64(sm);
        sm ^= purpose * 0x9e3779b97f4a7c15ull;
        std::uint64_t b = splitmix64(sm);
        sm ^= index * 0xbf58476d1ce4e5b9ull;
        std::uint64_t c = splitmix64(sm);
        return Rng(a ^ (b + 0x94d049bb133111ebull) ^ c);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; spare kept for the next call
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& s) {
        s += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = s;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t root_ = 0;
    std::uint64_t state_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stream purposes, kept in one place so sub-stream derivation is auditable.
namespace stream {
inline constexpr std::uint64_t kParamInit = 1;
inline constexpr std::uint64_t kTrainTask = 2;
inline constexpr std::uint64_t kEvalTask = 3;
inline constexpr std::uint64_t kGradCheck = 4;
inline constexpr std::uint64_t kBench = 5;
}  // namespace stream

}  // namespace choose
