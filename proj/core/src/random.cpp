#include "vcdm/random.hpp"

#include <sstream>

#include "vcdm/errors.hpp"

namespace vcdm {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
    // parent + (index + 1) * odd constant is injective in index mod 2^64.
    return mix64(parent + (index + 1) * 0xD1B54A32D192ED03ULL);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below requires n > 0");
    std::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
    return dist(engine_);
}

void Rng::fill_normal(std::span<double> out) {
    for (double& v : out) v = normal_(engine_);
}

std::vector<double> Rng::normal_vector(std::size_t n) {
    std::vector<double> v(n);
    fill_normal(v);
    return v;
}

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_ >> normal_ >> uniform_;
    if (!is) throw InvalidArgument("malformed rng state");
}

bool Rng::operator==(const Rng& other) const {
    return engine_ == other.engine_ && normal_ == other.normal_;
}

}  // namespace vcdm
