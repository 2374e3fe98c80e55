#pragma once

#include <vector>

#include "lrq/quantizer.hpp"
#include "lrq/rng.hpp"
#include "lrq/tensor.hpp"

namespace lrq {

enum class RoundVariant { rtn, flexround, lrq, lrq_no_bias };

// Rounding used inside the dequantization kernel. pass_through replaces
// round(u) with u itself; it exists so the hand-written backward pass can be
// checked against finite differences of a differentiable surrogate.
enum class RoundKind { nearest, pass_through };

// Learnable rounding state for one linear layer W [C_out x C_in]:
// a per-output-channel step s1 plus the scale matrix exp(L2 U2 + r2 + c2).
struct LrqParams {
    QParams s1;
    Tensor l2;  // [C_out x rank]
    Tensor u2;  // [rank x C_in]
    Tensor r2;  // [C_out x 1]
    Tensor c2;  // [1 x C_in]
    int rank = 0;
};

// Full weight-scaling variant: one learnable scale per weight.
struct FlexParams {
    QParams s1;
    Tensor s2;  // [C_out x C_in]
};

// s1 from RTN; L2, r2, c2 zero; U2 ~ Normal(0, u2_std^2). The composite
// scale matrix starts at zero, so dequantization at init reproduces RTN
// bit-exactly.
LrqParams init_lrq(const Tensor& w, int bits, int rank, Rng& rng, float u2_std);
FlexParams init_flexround(const Tensor& w, int bits);

// L2 U2 + r2 + c2 with numpy-style broadcasting of the two vectors.
Tensor scale_matrix(const LrqParams& p);

// w_hat = s1 * (clamp(round(W / (s1 * exp(S))) + zp, 0, 2^bits-1) - zp),
// s1 broadcast per output channel. S = 0 reduces to plain fake_quant.
Tensor dequantize_scaled(const Tensor& w, const QParams& s1, const Tensor& s, int bits,
                         RoundKind rk = RoundKind::nearest);
Tensor dequantize_lrq(const Tensor& w, const LrqParams& p, int bits);
Tensor dequantize_flexround(const Tensor& w, const FlexParams& p, int bits);

// Forward pass with the intermediates the STE backward needs.
struct DequantCache {
    Tensor w_hat;
    Tensor u;     // W / (s1 * exp(S))
    Tensor mask;  // 1 where round(u)+zp stayed inside the grid
    Tensor v;     // clamp(round(u)+zp) - zp
};
DequantCache dequantize_scaled_cached(const Tensor& w, const QParams& s1, const Tensor& s, int bits,
                                      RoundKind rk = RoundKind::nearest);

struct LayerDims {
    int64_t c_out = 0;
    int64_t c_in = 0;
    int64_t count = 1;
};

struct RatioResult {
    int64_t weight_count = 0;
    int64_t l2u2_count = 0;   // L2 and U2 entries only (the published ratio)
    int64_t full_count = 0;   // plus r2, c2 and the s1 step vector
    double l2u2_percent = 0.0;
    double full_percent = 0.0;
};

RatioResult learnable_param_ratio(const std::vector<LayerDims>& dims, int64_t rank);

}  // namespace lrq
