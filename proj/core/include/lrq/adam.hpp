#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace lrq {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment state for one parameter tensor (moments in double,
// parameters stay float).
struct AdamSlot {
    std::vector<double> m;
    std::vector<double> v;

    void init(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
    size_t size() const { return m.size(); }
};

// Standard bias-corrected update; t counts steps starting at 1. A zero
// gradient on zero state leaves the parameter untouched.
void adam_update(std::span<float> param, AdamSlot& slot, std::span<const float> grad, const AdamConfig& cfg,
                 int64_t t);

}  // namespace lrq
