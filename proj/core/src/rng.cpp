#include "lrq/rng.hpp"

#include <cmath>

namespace lrq {

double Rng::next_normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so log() stays finite.
    const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = next_uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Tensor Rng::normal(std::vector<int64_t> shape, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<float>(mean + stddev * next_normal());
    }
    return t;
}

Tensor Rng::uniform(std::vector<int64_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<float>(lo + (hi - lo) * next_uniform());
    }
    return t;
}

}  // namespace lrq
