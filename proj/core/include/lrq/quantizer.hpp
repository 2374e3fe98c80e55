#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "lrq/tensor.hpp"

namespace lrq {

enum class Granularity { per_tensor, per_channel, per_token };
enum class RangeMode { dynamic, static_range };

struct QuantSpec {
    int bits = 8;
    Granularity granularity = Granularity::per_tensor;
    int axis = 0;  // per_channel only
    RangeMode mode = RangeMode::dynamic;

    void validate(int target_rank) const;
};

// Affine grid parameters. One entry for per-tensor use, one entry per
// channel/token row otherwise. zero_point holds integral values but is kept
// as float so grid arithmetic stays in one type.
struct QParams {
    std::vector<float> step;
    std::vector<float> zero_point;

    bool per_tensor() const { return step.size() == 1; }
};

struct RangeStats {
    std::vector<float> min;
    std::vector<float> max;
    int64_t sample_count = 0;
};

inline float grid_max(int bits) { return static_cast<float>((1 << bits) - 1); }

// The rounding kernel shared by every quantization path. Ties round away
// from zero (std::round semantics).
inline float fake_quant_scalar(float x, float step, float zp, float qmax) {
    const float q = std::round(x / step);
    float t = q + zp;
    if (t < 0.0f) t = 0.0f;
    if (t > qmax) t = qmax;
    return step * (t - zp);
}

// Asymmetric grid over [lo, hi] widened to contain zero:
//   step = (hi' - lo') / (2^bits - 1), floored at 1e-8
//   zero_point = round(-lo'/step) clamped to the grid
QParams affine_qparams(float lo, float hi, int bits);

// Grid that represents a constant value exactly: the zero point is placed
// so that `value` lands on an adjacent grid node.
QParams constant_qparams(float value, int bits);

// Per-tensor (qp size 1) or per-row (qp size == x.rows()) fake quantization.
Tensor fake_quant(const Tensor& x, const QParams& qp, int bits);

struct RtnResult {
    QParams qp;
    Tensor w_hat;
    double loss = 0.0;  // sum of squared reconstruction error
};

// Rounding-to-nearest initialization: per channel (rows) or per tensor,
// step chosen by a 1-D shrink search (91 candidates, beta in 0.30..1.20)
// minimizing the squared reconstruction error.
RtnResult rtn_init_weight(const Tensor& w, int bits, Granularity granularity);

void accumulate_range(RangeStats& stats, const Tensor& x, const QuantSpec& spec);
RangeStats calibrate_static(const std::vector<Tensor>& stream, const QuantSpec& spec);

// Activation fake quantization: static per-tensor (needs stats) or dynamic
// per-token/per-tensor.
Tensor quant_activation(const Tensor& x, const QuantSpec& spec, const RangeStats* stats = nullptr);

// Per-token asymmetric fake quantization of the cache tensors, independently.
std::pair<Tensor, Tensor> quant_kv_cache(const Tensor& k, const Tensor& v, int bits);

}  // namespace lrq
