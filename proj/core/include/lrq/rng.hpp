#pragma once

#include <cstdint>
#include <random>

#include "lrq/tensor.hpp"

namespace lrq {

// Deterministic random source. The engine is std::mt19937_64 (its output
// sequence is fully specified by the standard) and every derived variate is
// produced by an explicit transform of raw 64-bit draws, so an identical
// seed yields a bit-identical stream:
//   uniform: top 53 bits of a draw scaled by 2^-53, giving [0, 1)
//   normal:  Box-Muller on two uniforms (the second variate is cached)
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    double next_uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double next_normal();

    // Uniform integer in [0, n) via rejection-free modulo; n is tiny here
    // (batch indices), so modulo bias is irrelevant for sampling quality
    // and the draw stays reproducible.
    int64_t next_below(int64_t n) { return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n)); }

    Tensor normal(std::vector<int64_t> shape, double mean, double stddev);
    Tensor uniform(std::vector<int64_t> shape, double lo, double hi);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lrq
