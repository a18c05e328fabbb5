#pragma once

#include <cstdint>
#include <limits>
#include <random>

#include "bevdiff/tensor.hpp"

namespace bevdiff {

/// Counter-based generator: output i of a stream is a pure hash of (key, i), so any stream can be
/// replayed from its key and child streams derived with split() never overlap their parent.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return mix(key_ + kGamma * ++counter_); }

    /// Independent child stream; does not advance this generator.
    Rng split(std::uint64_t stream) const { return Rng(key_, stream); }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(*this); }
    bool bernoulli(double p) { return uniform() < p; }
    double normal() { return normal_(*this); }

    Tensor normal(const Shape& shape) {
        Tensor t(shape);
        for (auto& v : t.data()) v = normal();
        return t;
    }

private:
    static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Named stream ids so data, parameter init, diffusion noise and dropout never share draws.
enum class Stream : std::uint64_t { Data = 1, Init = 2, Noise = 3, Dropout = 4, Render = 5, Shuffle = 6, Timestep = 7 };

inline Rng make_stream(std::uint64_t seed, Stream s) { return Rng(seed, static_cast<std::uint64_t>(s)); }

}  // namespace bevdiff
