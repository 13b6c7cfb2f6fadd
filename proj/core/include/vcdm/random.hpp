#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace vcdm {

// splitmix64 finalizer; a bijection on 64-bit words.
std::uint64_t mix64(std::uint64_t x);

// Counter-based split of a parent seed. For a fixed parent the map
// index -> seed is injective, so sibling streams never share a seed.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

// Explicit generator threaded through every stochastic call. Wraps a
// Mersenne engine plus the normal sampler so its full state (including the
// cached second Box-Muller value) can be saved and restored.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    void fill_normal(std::span<double> out);
    std::vector<double> normal_vector(std::size_t n);

    std::mt19937_64& engine() { return engine_; }

    std::string save_state() const;
    void load_state(const std::string& state);

    bool operator==(const Rng& other) const;

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace vcdm
