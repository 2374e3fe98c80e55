#include "lrq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace lrq {

namespace {

constexpr float kStepFloor = 1e-8f;

void check_bits(int bits) {
    if (bits < 2 || bits > 8) throw config_error("bits must be in [2, 8], got " + std::to_string(bits));
}

struct ChannelRange {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    void update(float v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
};

// One grid candidate for a channel: the min/max range shrunk by beta.
QParams channel_candidate(float lo, float hi, int bits, double beta) {
    return affine_qparams(static_cast<float>(beta * lo), static_cast<float>(beta * hi), bits);
}

double channel_loss(const float* w, int64_t n, float step, float zp, float qmax) {
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(w[i]) - static_cast<double>(fake_quant_scalar(w[i], step, zp, qmax));
        loss += d * d;
    }
    return loss;
}

// Best (step, zero_point) for one contiguous channel of n weights.
void rtn_channel(const float* w, int64_t n, int bits, float& step_out, float& zp_out, double& loss_out) {
    ChannelRange r;
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(w[i])) throw numeric_error("rtn_init_weight: non-finite weight");
        r.update(w[i]);
    }
    const float qmax = grid_max(bits);
    if (r.lo == r.hi) {
        const QParams qp = constant_qparams(r.lo, bits);
        step_out = qp.step[0];
        zp_out = qp.zero_point[0];
        loss_out = channel_loss(w, n, step_out, zp_out, qmax);
        return;
    }
    double best_loss = std::numeric_limits<double>::infinity();
    float best_step = 0.0f, best_zp = 0.0f;
    for (int k = 30; k <= 120; ++k) {
        const double beta = static_cast<double>(k) / 100.0;
        const QParams qp = channel_candidate(r.lo, r.hi, bits, beta);
        const double loss = channel_loss(w, n, qp.step[0], qp.zero_point[0], qmax);
        if (loss < best_loss) {
            best_loss = loss;
            best_step = qp.step[0];
            best_zp = qp.zero_point[0];
        }
    }
    step_out = best_step;
    zp_out = best_zp;
    loss_out = best_loss;
}

QParams row_qparams(const float* row, int64_t n, int bits) {
    ChannelRange r;
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(row[i])) throw numeric_error("quant_activation: non-finite input");
        r.update(row[i]);
    }
    if (r.lo == r.hi) return constant_qparams(r.lo, bits);
    return affine_qparams(r.lo, r.hi, bits);
}

}  // namespace

void QuantSpec::validate(int target_rank) const {
    check_bits(bits);
    if (granularity == Granularity::per_channel && (axis < 0 || axis >= target_rank)) {
        throw config_error("per_channel axis " + std::to_string(axis) + " invalid for rank " +
                           std::to_string(target_rank));
    }
    if (mode == RangeMode::static_range && granularity == Granularity::per_token) {
        throw config_error("per_token quantization is dynamic by construction");
    }
}

QParams affine_qparams(float lo, float hi, int bits) {
    check_bits(bits);
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw numeric_error("affine_qparams: non-finite range");
    if (lo > hi) throw numeric_error("affine_qparams: lo > hi");
    const float lo2 = std::min(lo, 0.0f);
    const float hi2 = std::max(hi, 0.0f);
    const float qmax = grid_max(bits);
    float step = (hi2 - lo2) / qmax;
    if (step < kStepFloor) {
        step = kStepFloor;
        return QParams{{step}, {0.0f}};
    }
    // -lo2/step evaluated in its division-free double form, so exact halves
    // (e.g. 127.5 for [-1,1] at 8 bits) tie away from zero as specified.
    float zp = static_cast<float>(
        std::round(-static_cast<double>(lo2) * static_cast<double>(qmax) / (static_cast<double>(hi2) - static_cast<double>(lo2))));
    zp = std::clamp(zp, 0.0f, qmax);
    return QParams{{step}, {zp}};
}

QParams constant_qparams(float value, int bits) {
    check_bits(bits);
    if (value == 0.0f) {
        return QParams{{kStepFloor}, {static_cast<float>(1 << (bits - 1))}};
    }
    const float step = std::max(std::fabs(value), kStepFloor);
    const float zp = value > 0.0f ? 0.0f : 1.0f;
    return QParams{{step}, {zp}};
}

Tensor fake_quant(const Tensor& x, const QParams& qp, int bits) {
    check_bits(bits);
    const float qmax = grid_max(bits);
    Tensor out(x.shape());
    if (qp.per_tensor()) {
        const float step = qp.step[0], zp = qp.zero_point[0];
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = fake_quant_scalar(x[i], step, zp, qmax);
        return out;
    }
    if (x.rank() != 2 || static_cast<int64_t>(qp.step.size()) != x.rows()) {
        throw dimension_error("fake_quant: per-row params must match tensor rows");
    }
    for (int64_t i = 0; i < x.rows(); ++i) {
        const float step = qp.step[static_cast<size_t>(i)], zp = qp.zero_point[static_cast<size_t>(i)];
        for (int64_t j = 0; j < x.cols(); ++j) out.at(i, j) = fake_quant_scalar(x.at(i, j), step, zp, qmax);
    }
    return out;
}

RtnResult rtn_init_weight(const Tensor& w, int bits, Granularity granularity) {
    check_bits(bits);
    RtnResult res;
    if (granularity == Granularity::per_tensor) {
        float step, zp;
        double loss;
        rtn_channel(w.data(), w.numel(), bits, step, zp, loss);
        res.qp = QParams{{step}, {zp}};
        res.loss = loss;
    } else if (granularity == Granularity::per_channel) {
        if (w.rank() != 2) throw dimension_error("rtn_init_weight: per_channel expects a matrix");
        const int64_t rows = w.rows(), cols = w.cols();
        res.qp.step.resize(static_cast<size_t>(rows));
        res.qp.zero_point.resize(static_cast<size_t>(rows));
        res.loss = 0.0;
        for (int64_t i = 0; i < rows; ++i) {
            double loss;
            rtn_channel(w.data() + i * cols, cols, bits, res.qp.step[static_cast<size_t>(i)],
                        res.qp.zero_point[static_cast<size_t>(i)], loss);
            res.loss += loss;
        }
    } else {
        throw config_error("rtn_init_weight: weights use per_tensor or per_channel granularity");
    }
    res.w_hat = fake_quant(w, res.qp, bits);
    return res;
}

void accumulate_range(RangeStats& stats, const Tensor& x, const QuantSpec& spec) {
    if (spec.granularity != Granularity::per_tensor) {
        throw config_error("calibrate_static: only per_tensor ranges are calibrated");
    }
    if (stats.min.empty()) {
        stats.min.assign(1, std::numeric_limits<float>::infinity());
        stats.max.assign(1, -std::numeric_limits<float>::infinity());
    }
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (!std::isfinite(x[i])) throw numeric_error("calibrate_static: non-finite activation");
        stats.min[0] = std::min(stats.min[0], x[i]);
        stats.max[0] = std::max(stats.max[0], x[i]);
    }
    stats.sample_count += 1;
}

RangeStats calibrate_static(const std::vector<Tensor>& stream, const QuantSpec& spec) {
    if (spec.mode != RangeMode::static_range) throw config_error("calibrate_static: spec.mode must be static");
    if (stream.empty()) throw config_error("calibrate_static: empty calibration stream");
    RangeStats stats;
    for (const Tensor& x : stream) accumulate_range(stats, x, spec);
    return stats;
}

Tensor quant_activation(const Tensor& x, const QuantSpec& spec, const RangeStats* stats) {
    spec.validate(x.rank());
    if (spec.granularity == Granularity::per_channel) {
        throw config_error("quant_activation: per_channel granularity is for weights");
    }
    if (spec.mode == RangeMode::static_range) {
        if (stats == nullptr || stats->sample_count < 1) {
            throw config_error("quant_activation: static mode requires calibrated stats");
        }
        const QParams qp = stats->min[0] == stats->max[0] ? constant_qparams(stats->min[0], spec.bits)
                                                          : affine_qparams(stats->min[0], stats->max[0], spec.bits);
        return fake_quant(x, qp, spec.bits);
    }
    if (spec.granularity == Granularity::per_tensor) {
        ChannelRange r;
        for (int64_t i = 0; i < x.numel(); ++i) {
            if (!std::isfinite(x[i])) throw numeric_error("quant_activation: non-finite input");
            r.update(x[i]);
        }
        const QParams qp = r.lo == r.hi ? constant_qparams(r.lo, spec.bits) : affine_qparams(r.lo, r.hi, spec.bits);
        return fake_quant(x, qp, spec.bits);
    }
    // dynamic per-token: an independent grid per row
    if (x.rank() != 2) throw dimension_error("quant_activation: per_token expects [tokens x features]");
    Tensor out(x.shape());
    const float qmax = grid_max(spec.bits);
    for (int64_t i = 0; i < x.rows(); ++i) {
        const QParams qp = row_qparams(x.data() + i * x.cols(), x.cols(), spec.bits);
        for (int64_t j = 0; j < x.cols(); ++j) {
            out.at(i, j) = fake_quant_scalar(x.at(i, j), qp.step[0], qp.zero_point[0], qmax);
        }
    }
    return out;
}

std::pair<Tensor, Tensor> quant_kv_cache(const Tensor& k, const Tensor& v, int bits) {
    QuantSpec spec;
    spec.bits = bits;
    spec.granularity = Granularity::per_token;
    spec.mode = RangeMode::dynamic;
    return {quant_activation(k, spec), quant_activation(v, spec)};
}

}  // namespace lrq
