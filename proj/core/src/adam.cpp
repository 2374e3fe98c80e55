#include "lrq/adam.hpp"

#include <cmath>

#include "lrq/errors.hpp"

namespace lrq {

void adam_update(std::span<float> param, AdamSlot& slot, std::span<const float> grad, const AdamConfig& cfg,
                 int64_t t) {
    if (param.size() != grad.size() || param.size() != slot.size()) {
        throw dimension_error("adam_update: parameter/gradient/state sizes differ");
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < param.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = slot.m[i] / c1;
        const double vhat = slot.v[i] / c2;
        param[i] = static_cast<float>(static_cast<double>(param[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
}

}  // namespace lrq
