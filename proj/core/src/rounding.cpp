#include "lrq/rounding.hpp"

#include <cmath>
#include <string>

namespace lrq {

LrqParams init_lrq(const Tensor& w, int bits, int rank, Rng& rng, float u2_std) {
    if (w.rank() != 2) throw dimension_error("init_lrq: expected a weight matrix");
    const int64_t c_out = w.rows(), c_in = w.cols();
    const int64_t min_dim = std::min(c_out, c_in);
    if (rank < 1 || rank > min_dim) {
        throw config_error("init_lrq: rank " + std::to_string(rank) + " outside [1, " + std::to_string(min_dim) +
                           "] for a " + std::to_string(c_out) + "x" + std::to_string(c_in) + " layer");
    }
    LrqParams p;
    p.s1 = rtn_init_weight(w, bits, Granularity::per_channel).qp;
    p.l2 = Tensor({c_out, rank});
    p.u2 = rng.normal({rank, c_in}, 0.0, u2_std);
    p.r2 = Tensor({c_out, 1});
    p.c2 = Tensor({1, c_in});
    p.rank = rank;
    return p;
}

FlexParams init_flexround(const Tensor& w, int bits) {
    if (w.rank() != 2) throw dimension_error("init_flexround: expected a weight matrix");
    FlexParams p;
    p.s1 = rtn_init_weight(w, bits, Granularity::per_channel).qp;
    p.s2 = Tensor({w.rows(), w.cols()});
    return p;
}

Tensor scale_matrix(const LrqParams& p) {
    return broadcast_add_rc(matmul(p.l2, p.u2), p.r2, p.c2);
}

Tensor dequantize_scaled(const Tensor& w, const QParams& s1, const Tensor& s, int bits, RoundKind rk) {
    return dequantize_scaled_cached(w, s1, s, bits, rk).w_hat;
}

DequantCache dequantize_scaled_cached(const Tensor& w, const QParams& s1, const Tensor& s, int bits, RoundKind rk) {
    if (w.rank() != 2 || !w.same_shape(s)) throw dimension_error("dequantize: scale matrix shape mismatch");
    if (static_cast<int64_t>(s1.step.size()) != w.rows()) {
        throw dimension_error("dequantize: s1 must be per output channel");
    }
    const float qmax = grid_max(bits);
    DequantCache cache{Tensor(w.shape()), Tensor(w.shape()), Tensor(w.shape()), Tensor(w.shape())};
    for (int64_t i = 0; i < w.rows(); ++i) {
        const float step = s1.step[static_cast<size_t>(i)];
        const float zp = s1.zero_point[static_cast<size_t>(i)];
        for (int64_t j = 0; j < w.cols(); ++j) {
            const float denom = step * std::exp(s.at(i, j));
            const float u = w.at(i, j) / denom;
            const float q = rk == RoundKind::nearest ? std::round(u) : u;
            const float t = q + zp;
            const bool inside = t >= 0.0f && t <= qmax;
            // v == q inside the grid, exactly; the clamped codes are integers
            const float v = inside ? q : (t < 0.0f ? -zp : qmax - zp);
            cache.u.at(i, j) = u;
            cache.mask.at(i, j) = inside ? 1.0f : 0.0f;
            cache.v.at(i, j) = v;
            cache.w_hat.at(i, j) = step * v;
        }
    }
    return cache;
}

Tensor dequantize_lrq(const Tensor& w, const LrqParams& p, int bits) {
    return dequantize_scaled(w, p.s1, scale_matrix(p), bits);
}

Tensor dequantize_flexround(const Tensor& w, const FlexParams& p, int bits) {
    return dequantize_scaled(w, p.s1, p.s2, bits);
}

RatioResult learnable_param_ratio(const std::vector<LayerDims>& dims, int64_t rank) {
    if (rank < 0) throw config_error("learnable_param_ratio: rank must be non-negative");
    RatioResult res;
    for (const LayerDims& d : dims) {
        if (d.c_out <= 0 || d.c_in <= 0 || d.count <= 0) {
            throw config_error("learnable_param_ratio: dimensions must be positive");
        }
        res.weight_count += d.count * d.c_out * d.c_in;
        res.l2u2_count += d.count * (d.c_out * rank + rank * d.c_in);
        res.full_count += d.count * (d.c_out * rank + rank * d.c_in + 2 * d.c_out + d.c_in);
    }
    res.l2u2_percent = 100.0 * static_cast<double>(res.l2u2_count) / static_cast<double>(res.weight_count);
    res.full_percent = 100.0 * static_cast<double>(res.full_count) / static_cast<double>(res.weight_count);
    return res;
}

}  // namespace lrq
