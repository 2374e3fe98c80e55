#include "lrq/reconstruct.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

namespace lrq {

namespace {

constexpr float kStepFloor = 1e-8f;

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

Tensor rmsnorm_cached(const Tensor& x, const Tensor& gain, float eps, Tensor& rstd_out) {
    Tensor out(x.shape());
    rstd_out = Tensor({x.rows(), 1});
    const int64_t d = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += double(x.at(i, j)) * double(x.at(i, j));
        const float r = float(1.0 / std::sqrt(ss / double(d) + double(eps)));
        rstd_out[i] = r;
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * r * gain[j];
    }
    return out;
}

Tensor rmsnorm_backward(const Tensor& x, const Tensor& gain, const Tensor& rstd, const Tensor& g_y) {
    Tensor g_x(x.shape());
    const int64_t d = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        const double r = double(rstd[i]);
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += double(g_y.at(i, j)) * double(gain[j]) * double(x.at(i, j));
        const double coef = r * r * r / double(d) * dot;
        for (int64_t j = 0; j < d; ++j) {
            g_x.at(i, j) = float(double(gain[j]) * double(g_y.at(i, j)) * r - double(x.at(i, j)) * coef);
        }
    }
    return g_x;
}

// Inverse rotation: transpose of the forward rotary transform.
void rope_backward_inplace(Tensor& x, int64_t n_heads, float base, int64_t pos0) {
    const int64_t d = x.cols();
    const int64_t dh = d / n_heads;
    for (int64_t t = 0; t < x.rows(); ++t) {
        const double pos = double(pos0 + t);
        for (int64_t h = 0; h < n_heads; ++h) {
            float* head = x.data() + t * d + h * dh;
            for (int64_t i = 0; i < dh / 2; ++i) {
                const double freq = std::pow(double(base), -2.0 * double(i) / double(dh));
                const float c = float(std::cos(pos * freq));
                const float s = float(std::sin(pos * freq));
                const float g0 = head[2 * i], g1 = head[2 * i + 1];
                head[2 * i] = g0 * c + g1 * s;
                head[2 * i + 1] = -g0 * s + g1 * c;
            }
        }
    }
}

// Activation tensor after one insertion point, with the clamp mask the STE
// backward needs. An empty mask means the site was not applied.
struct SiteTensors {
    Tensor y;
    Tensor mask;
};

Tensor mask_mul(const Tensor& g, const Tensor& mask) {
    if (mask.numel() == 0) return g;
    return hadamard(g, mask);
}

struct ActRuntime {
    const BlockActQuant* act = nullptr;
    const SiteDrops* drops = nullptr;

    bool enabled(ActSite s) const {
        if (act == nullptr || act->bits <= 0) return false;
        if (drops != nullptr && (*drops)[size_t(s)]) return false;
        return true;
    }

    SiteTensors apply(const Tensor& t, ActSite s) const {
        if (!enabled(s)) return {t, Tensor()};
        const RangeStats& r = act->ranges[size_t(s)];
        if (r.sample_count < 1) throw config_error("reconstruct: uncalibrated activation site");
        const QParams qp = r.min[0] == r.max[0] ? constant_qparams(r.min[0], act->bits)
                                                : affine_qparams(r.min[0], r.max[0], act->bits);
        const float step = qp.step[0], zp = qp.zero_point[0], qmax = grid_max(act->bits);
        SiteTensors out{Tensor(t.shape()), Tensor(t.shape())};
        for (int64_t i = 0; i < t.numel(); ++i) {
            const float q = std::round(t[i] / step) + zp;
            const bool inside = q >= 0.0f && q <= qmax;
            const float qc = inside ? q : (q < 0.0f ? 0.0f : qmax);
            out.y[i] = step * (qc - zp);
            out.mask[i] = inside ? 1.0f : 0.0f;
        }
        return out;
    }
};

struct SampleCache {
    Tensor x;
    Tensor rstd1, n1;
    SiteTensors a;
    Tensor v0;  // value projections pre-site
    SiteTensors qs, ks, vs;
    std::vector<Tensor> probs_fp;     // per head, causal rows
    std::vector<SiteTensors> probs;   // per head post-site
    Tensor ctx;
    SiteTensors cs;
    Tensor h2;
    Tensor rstd2, n2;
    SiteTensors fs;
    Tensor g0, u0;  // gate pre-activation, up projection
    SiteTensors ms;
    Tensor out;
};

// Quantized-path forward with every intermediate the backward needs.
void recon_forward(const ModelConfig& cfg, const std::array<Tensor, kBlockLayers>& w_hat,
                   const TransformerBlock& blk, const Tensor& x, const ActRuntime& rt, SampleCache& c) {
    const int64_t T = x.rows(), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    c.x = x;
    c.n1 = rmsnorm_cached(x, blk.attn_norm, cfg.norm_eps, c.rstd1);
    c.a = rt.apply(c.n1, ActSite::attn_in);

    Tensor q = matmul_bt(c.a.y, w_hat[0]);
    Tensor k = matmul_bt(c.a.y, w_hat[1]);
    c.v0 = matmul_bt(c.a.y, w_hat[2]);
    rope_inplace(q, H, cfg.rope_base, 0);
    rope_inplace(k, H, cfg.rope_base, 0);
    c.qs = rt.apply(q, ActSite::q_bmm);
    c.ks = rt.apply(k, ActSite::k_bmm);
    c.vs = rt.apply(c.v0, ActSite::v_bmm);

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    c.ctx = Tensor({T, d});
    c.probs_fp.assign(size_t(H), Tensor());
    c.probs.assign(size_t(H), SiteTensors());
    for (int64_t h = 0; h < H; ++h) {
        const int64_t off = h * dh;
        Tensor probs({T, T});
        for (int64_t i = 0; i < T; ++i) {
            double row_max = -1e300;
            std::vector<double> sc(size_t(i) + 1);
            for (int64_t j = 0; j <= i; ++j) {
                double dot = 0.0;
                for (int64_t e = 0; e < dh; ++e) dot += double(c.qs.y.at(i, off + e)) * double(c.ks.y.at(j, off + e));
                sc[size_t(j)] = dot * inv_sqrt_dh;
                row_max = std::max(row_max, sc[size_t(j)]);
            }
            double denom = 0.0;
            for (int64_t j = 0; j <= i; ++j) denom += std::exp(sc[size_t(j)] - row_max);
            for (int64_t j = 0; j <= i; ++j) probs.at(i, j) = float(std::exp(sc[size_t(j)] - row_max) / denom);
        }
        c.probs_fp[size_t(h)] = probs;
        c.probs[size_t(h)] = rt.apply(probs, ActSite::probs);
        const Tensor& pq = c.probs[size_t(h)].y;
        for (int64_t i = 0; i < T; ++i) {
            for (int64_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (int64_t j = 0; j <= i; ++j) acc += double(pq.at(i, j)) * double(c.vs.y.at(j, off + e));
                c.ctx.at(i, off + e) = float(acc);
            }
        }
    }

    c.cs = rt.apply(c.ctx, ActSite::attn_out_in);
    c.h2 = add(x, matmul_bt(c.cs.y, w_hat[3]));

    c.n2 = rmsnorm_cached(c.h2, blk.ffn_norm, cfg.norm_eps, c.rstd2);
    c.fs = rt.apply(c.n2, ActSite::ffn_in);
    c.g0 = matmul_bt(c.fs.y, w_hat[4]);
    c.u0 = matmul_bt(c.fs.y, w_hat[5]);
    Tensor mgate(c.g0.shape());
    for (int64_t i = 0; i < mgate.numel(); ++i) {
        mgate[i] = c.g0[i] * sigmoid(c.g0[i]) * c.u0[i];
    }
    c.ms = rt.apply(mgate, ActSite::ffn_act);
    c.out = add(c.h2, matmul_bt(c.ms.y, w_hat[6]));
}

// Reverse pass; accumulates dL/dW_hat for each of the seven layers.
void recon_backward(const ModelConfig& cfg, const std::array<Tensor, kBlockLayers>& w_hat,
                    const TransformerBlock& blk, const SampleCache& c, const Tensor& grad_out,
                    std::array<Tensor, kBlockLayers>& accum) {
    const int64_t T = c.x.rows(), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();

    // FFN
    Tensor g_h2 = grad_out;
    const Tensor& g_dn = grad_out;
    accum[6] = add(accum[6], matmul_at(g_dn, c.ms.y));
    Tensor g_m = mask_mul(matmul(g_dn, w_hat[6]), c.ms.mask);
    Tensor g_g0(c.g0.shape()), g_u0(c.u0.shape());
    for (int64_t i = 0; i < g_m.numel(); ++i) {
        const float s = sigmoid(c.g0[i]);
        const float silu = c.g0[i] * s;
        g_g0[i] = g_m[i] * c.u0[i] * s * (1.0f + c.g0[i] * (1.0f - s));
        g_u0[i] = g_m[i] * silu;
    }
    accum[4] = add(accum[4], matmul_at(g_g0, c.fs.y));
    accum[5] = add(accum[5], matmul_at(g_u0, c.fs.y));
    Tensor g_n2 = mask_mul(add(matmul(g_g0, w_hat[4]), matmul(g_u0, w_hat[5])), c.fs.mask);
    g_h2 = add(g_h2, rmsnorm_backward(c.h2, blk.ffn_norm, c.rstd2, g_n2));

    // attention output projection
    accum[3] = add(accum[3], matmul_at(g_h2, c.cs.y));
    Tensor g_ctx = mask_mul(matmul(g_h2, w_hat[3]), c.cs.mask);

    // attention core
    Tensor g_qq({T, d}), g_kq({T, d}), g_vq({T, d});
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    for (int64_t h = 0; h < H; ++h) {
        const int64_t off = h * dh;
        const Tensor& pq = c.probs[size_t(h)].y;
        const Tensor& pfp = c.probs_fp[size_t(h)];
        Tensor g_pq({T, T});
        for (int64_t i = 0; i < T; ++i) {
            for (int64_t j = 0; j <= i; ++j) {
                double acc = 0.0;
                for (int64_t e = 0; e < dh; ++e) acc += double(g_ctx.at(i, off + e)) * double(c.vs.y.at(j, off + e));
                g_pq.at(i, j) = float(acc);
            }
        }
        for (int64_t j = 0; j < T; ++j) {
            for (int64_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (int64_t i = j; i < T; ++i) acc += double(pq.at(i, j)) * double(g_ctx.at(i, off + e));
                g_vq.at(j, off + e) += float(acc);
            }
        }
        Tensor g_p = mask_mul(g_pq, c.probs[size_t(h)].mask);
        Tensor g_sc({T, T});
        for (int64_t i = 0; i < T; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j <= i; ++j) dot += double(g_p.at(i, j)) * double(pfp.at(i, j));
            for (int64_t j = 0; j <= i; ++j) {
                g_sc.at(i, j) = float(double(pfp.at(i, j)) * (double(g_p.at(i, j)) - dot));
            }
        }
        for (int64_t i = 0; i < T; ++i) {
            for (int64_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (int64_t j = 0; j <= i; ++j) acc += double(g_sc.at(i, j)) * double(c.ks.y.at(j, off + e));
                g_qq.at(i, off + e) += float(acc * inv_sqrt_dh);
            }
        }
        for (int64_t j = 0; j < T; ++j) {
            for (int64_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (int64_t i = j; i < T; ++i) acc += double(g_sc.at(i, j)) * double(c.qs.y.at(i, off + e));
                g_kq.at(j, off + e) += float(acc * inv_sqrt_dh);
            }
        }
    }

    Tensor g_q = mask_mul(g_qq, c.qs.mask);
    Tensor g_k = mask_mul(g_kq, c.ks.mask);
    Tensor g_v = mask_mul(g_vq, c.vs.mask);
    rope_backward_inplace(g_q, H, cfg.rope_base, 0);
    rope_backward_inplace(g_k, H, cfg.rope_base, 0);
    accum[0] = add(accum[0], matmul_at(g_q, c.a.y));
    accum[1] = add(accum[1], matmul_at(g_k, c.a.y));
    accum[2] = add(accum[2], matmul_at(g_v, c.a.y));
    // gradient toward the block input is a dead end for the learnables
}

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + salt;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

uint64_t block_seed(uint64_t base_seed, int64_t block_index) {
    return mix_seed(base_seed, uint64_t(block_index) + 0xb10c);
}

const char* pipeline_mode_name(PipelineMode m) {
    switch (m) {
        case PipelineMode::per_tensor_static_wa: return "per-tensor-static";
        case PipelineMode::per_token_wa: return "per-token";
        case PipelineMode::weight_only: return "weight-only";
    }
    return "?";
}

void ReconConfig::validate() const {
    if (iterations < 1) throw config_error("recon: iterations must be >= 1");
    if (batch_size < 1) throw config_error("recon: batch_size must be >= 1");
    if (lr <= 0.0) throw config_error("recon: lr must be positive");
    if (quant_drop_prob > 1.0) throw config_error("recon: quant_drop_prob must be in [0, 1]");
    if (bits_w < 2 || bits_w > 8) throw config_error("recon: bits_w must be in [2, 8]");
    if (rank < 0) throw config_error("recon: rank must be >= 0");
    if (eval_interval < 1) throw config_error("recon: eval_interval must be >= 1");
}

double ReconConfig::effective_drop_prob(PipelineMode mode) const {
    if (quant_drop_prob >= 0.0) return quant_drop_prob;
    return mode == PipelineMode::per_tensor_static_wa ? 0.5 : 0.0;
}

Tensor LayerRounding::scale(int64_t c_out, int64_t c_in) const {
    switch (variant) {
        case RoundVariant::rtn: return Tensor({c_out, c_in});
        case RoundVariant::flexround: return s2;
        case RoundVariant::lrq:
        case RoundVariant::lrq_no_bias: return broadcast_add_rc(matmul(l2, u2), r2, c2);
    }
    return Tensor({c_out, c_in});
}

Tensor LayerRounding::dequantize(const Tensor& w, RoundKind rk) const {
    return dequantize_scaled(w, s1, scale(w.rows(), w.cols()), bits, rk);
}

DequantCache LayerRounding::dequantize_cached(const Tensor& w, RoundKind rk) const {
    return dequantize_scaled_cached(w, s1, scale(w.rows(), w.cols()), bits, rk);
}

int64_t LayerRounding::learnable_count() const {
    switch (variant) {
        case RoundVariant::rtn: return 0;
        case RoundVariant::flexround: return int64_t(s1.step.size()) + s2.numel();
        case RoundVariant::lrq:
            return int64_t(s1.step.size()) + l2.numel() + u2.numel() + r2.numel() + c2.numel();
        case RoundVariant::lrq_no_bias: return int64_t(s1.step.size()) + l2.numel() + u2.numel();
    }
    return 0;
}

LayerRounding init_layer_rounding(const Tensor& w, RoundVariant variant, int bits, int rank, float u2_std,
                                  Rng& init_rng) {
    LayerRounding st;
    st.variant = variant;
    st.bits = bits;
    if (variant == RoundVariant::rtn) {
        st.s1 = rtn_init_weight(w, bits, Granularity::per_channel).qp;
    } else if (variant == RoundVariant::flexround) {
        FlexParams f = init_flexround(w, bits);
        st.s1 = std::move(f.s1);
        st.s2 = std::move(f.s2);
    } else {
        const int64_t min_dim = std::min(w.rows(), w.cols());
        const int r = rank == 0 ? int(min_dim) : rank;
        LrqParams p = init_lrq(w, bits, r, init_rng, u2_std);
        st.s1 = std::move(p.s1);
        st.l2 = std::move(p.l2);
        st.u2 = std::move(p.u2);
        st.r2 = std::move(p.r2);
        st.c2 = std::move(p.c2);
    }
    return st;
}

LayerGrads dequant_backward(const Tensor& w, const LayerRounding& state, const DequantCache& cache,
                            const Tensor& grad_w_hat) {
    (void)w;
    const int64_t rows = grad_w_hat.rows(), cols = grad_w_hat.cols();
    LayerGrads g;
    if (state.variant == RoundVariant::rtn) return g;

    // d w_hat / d step_i = v - mask * u  (outer multiply plus inner divide)
    g.s1_step = Tensor({rows, 1});
    for (int64_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            acc += double(grad_w_hat.at(i, j)) *
                   (double(cache.v.at(i, j)) - double(cache.mask.at(i, j)) * double(cache.u.at(i, j)));
        }
        g.s1_step[i] = float(acc);
    }

    // d w_hat / d S = -step * mask * u
    Tensor g_s({rows, cols});
    for (int64_t i = 0; i < rows; ++i) {
        const float step = state.s1.step[size_t(i)];
        for (int64_t j = 0; j < cols; ++j) {
            g_s.at(i, j) = -grad_w_hat.at(i, j) * step * cache.mask.at(i, j) * cache.u.at(i, j);
        }
    }

    if (state.variant == RoundVariant::flexround) {
        g.s2 = std::move(g_s);
        return g;
    }
    g.l2 = matmul_bt(g_s, state.u2);
    g.u2 = matmul_at(state.l2, g_s);
    if (state.variant == RoundVariant::lrq) {
        g.r2 = Tensor({rows, 1});
        g.c2 = Tensor({1, cols});
        for (int64_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < cols; ++j) acc += double(g_s.at(i, j));
            g.r2[i] = float(acc);
        }
        for (int64_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < rows; ++i) acc += double(g_s.at(i, j));
            g.c2[j] = float(acc);
        }
    }
    return g;
}

LayerLossGrads layer_recon_gradients(const Tensor& w, const LayerRounding& state, const Tensor& x_fp,
                                     const Tensor& x_q, RoundKind rk) {
    if (x_fp.cols() != w.cols() || !x_fp.same_shape(x_q)) {
        throw dimension_error("layer_recon_gradients: input shape mismatch");
    }
    const DequantCache cache = state.dequantize_cached(w, rk);
    const Tensor y_fp = matmul_bt(x_fp, w);
    const Tensor y_q = matmul_bt(x_q, cache.w_hat);
    const double n = double(y_fp.numel());
    double loss = 0.0;
    Tensor g_y(y_fp.shape());
    for (int64_t i = 0; i < y_fp.numel(); ++i) {
        const double r = double(y_q[i]) - double(y_fp[i]);
        loss += r * r;
        g_y[i] = float(2.0 * r / n);
    }
    LayerLossGrads out;
    out.loss = loss / n;
    out.grads = dequant_backward(w, state, cache, matmul_at(g_y, x_q));
    return out;
}

const char* block_layer_name(int i) {
    static const char* names[kBlockLayers] = {"attn_q", "attn_k", "attn_v", "attn_o",
                                              "ffn_gate", "ffn_up", "ffn_down"};
    return names[i];
}

std::array<const Tensor*, kBlockLayers> block_weights(const TransformerBlock& b) {
    return {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_gate, &b.w_up, &b.w_down};
}

int64_t BlockRounding::learnable_count() const {
    int64_t n = 0;
    for (const LayerRounding& l : layers) n += l.learnable_count();
    return n;
}

namespace {

std::array<Tensor, kBlockLayers> bake_w_hat(const TransformerBlock& blk, const BlockRounding& state, RoundKind rk,
                                            std::array<DequantCache, kBlockLayers>* caches) {
    const auto ws = block_weights(blk);
    std::array<Tensor, kBlockLayers> w_hat;
    for (int i = 0; i < kBlockLayers; ++i) {
        DequantCache c = state.layers[size_t(i)].dequantize_cached(*ws[size_t(i)], rk);
        w_hat[size_t(i)] = c.w_hat;
        if (caches != nullptr) (*caches)[size_t(i)] = std::move(c);
    }
    return w_hat;
}

// Block reconstruction loss on given samples with the current weights,
// activations kept FP (the recorded-loss convention shared by all modes).
double block_eval_loss(const TransformerBlock& blk, const ModelConfig& cfg, const BlockRounding& state,
                       const std::vector<const Tensor*>& x_q, const std::vector<const Tensor*>& y_fp) {
    const std::array<Tensor, kBlockLayers> w_hat = bake_w_hat(blk, state, RoundKind::nearest, nullptr);
    ActRuntime rt;
    double loss = 0.0;
    double n = 0.0;
    SampleCache c;
    for (size_t s = 0; s < x_q.size(); ++s) {
        recon_forward(cfg, w_hat, blk, *x_q[s], rt, c);
        for (int64_t i = 0; i < c.out.numel(); ++i) {
            const double r = double(c.out[i]) - double((*y_fp[s])[i]);
            loss += r * r;
        }
        n += double(c.out.numel());
    }
    return loss / n;
}

BlockLossGrads block_loss_grads(const TransformerBlock& blk, const ModelConfig& cfg, const BlockRounding& state,
                                const std::vector<const Tensor*>& x_q, const std::vector<const Tensor*>& y_fp,
                                const BlockActQuant* act, const std::vector<SiteDrops>* drops, RoundKind rk) {
    std::array<DequantCache, kBlockLayers> caches;
    const std::array<Tensor, kBlockLayers> w_hat = bake_w_hat(blk, state, rk, &caches);
    const auto ws = block_weights(blk);

    std::array<Tensor, kBlockLayers> g_what;
    for (int i = 0; i < kBlockLayers; ++i) g_what[size_t(i)] = Tensor(ws[size_t(i)]->shape());

    double total_elems = 0.0;
    for (size_t s = 0; s < x_q.size(); ++s) total_elems += double(x_q[s]->numel());

    BlockLossGrads out;
    SampleCache c;
    for (size_t s = 0; s < x_q.size(); ++s) {
        ActRuntime rt{act, drops == nullptr ? nullptr : &(*drops)[s]};
        recon_forward(cfg, w_hat, blk, *x_q[s], rt, c);
        Tensor g_out(c.out.shape());
        for (int64_t i = 0; i < c.out.numel(); ++i) {
            const double r = double(c.out[i]) - double((*y_fp[s])[i]);
            out.loss += r * r;
            g_out[i] = float(2.0 * r / total_elems);
        }
        recon_backward(cfg, w_hat, blk, c, g_out, g_what);
    }
    out.loss /= total_elems;

    for (int i = 0; i < kBlockLayers; ++i) {
        out.grads[size_t(i)] = dequant_backward(*ws[size_t(i)], state.layers[size_t(i)], caches[size_t(i)],
                                                g_what[size_t(i)]);
    }
    return out;
}

struct LayerAdam {
    AdamSlot s1, l2, u2, r2, c2, s2;
};

void adam_step_layer(LayerRounding& st, LayerAdam& ad, const LayerGrads& g, const AdamConfig& cfg, int64_t t) {
    if (st.variant == RoundVariant::rtn) return;
    if (ad.s1.size() == 0) {
        ad.s1.init(st.s1.step.size());
        if (st.variant == RoundVariant::flexround) {
            ad.s2.init(size_t(st.s2.numel()));
        } else {
            ad.l2.init(size_t(st.l2.numel()));
            ad.u2.init(size_t(st.u2.numel()));
            if (st.variant == RoundVariant::lrq) {
                ad.r2.init(size_t(st.r2.numel()));
                ad.c2.init(size_t(st.c2.numel()));
            }
        }
    }
    adam_update(st.s1.step, ad.s1, {g.s1_step.data(), size_t(g.s1_step.numel())}, cfg, t);
    for (float& s : st.s1.step) s = std::max(s, kStepFloor);  // keep the grid valid
    auto span_of = [](Tensor& x) { return std::span<float>(x.data(), size_t(x.numel())); };
    auto cspan_of = [](const Tensor& x) { return std::span<const float>(x.data(), size_t(x.numel())); };
    if (st.variant == RoundVariant::flexround) {
        adam_update(span_of(st.s2), ad.s2, cspan_of(g.s2), cfg, t);
        return;
    }
    adam_update(span_of(st.l2), ad.l2, cspan_of(g.l2), cfg, t);
    adam_update(span_of(st.u2), ad.u2, cspan_of(g.u2), cfg, t);
    if (st.variant == RoundVariant::lrq) {
        adam_update(span_of(st.r2), ad.r2, cspan_of(g.r2), cfg, t);
        adam_update(span_of(st.c2), ad.c2, cspan_of(g.c2), cfg, t);
    }
}

}  // namespace

BlockLossGrads ste_gradients(const TransformerBlock& blk, const ModelConfig& cfg, const BlockRounding& state,
                             const std::vector<const Tensor*>& x_fp, const std::vector<const Tensor*>& x_q,
                             const BlockActQuant* act, const std::vector<SiteDrops>* drops, RoundKind rk) {
    if (x_fp.size() != x_q.size() || x_fp.empty()) throw dimension_error("ste_gradients: bad batch");
    std::vector<Tensor> targets(x_fp.size());
    std::vector<const Tensor*> target_ptrs(x_fp.size());
    for (size_t s = 0; s < x_fp.size(); ++s) {
        targets[s] = block_forward(blk, *x_fp[s], cfg);
        target_ptrs[s] = &targets[s];
    }
    BlockLossGrads out = block_loss_grads(blk, cfg, state, x_q, target_ptrs, act, drops, rk);
    if (!std::isfinite(out.loss)) throw numeric_error("ste_gradients: non-finite loss");
    return out;
}

BlockReconResult reconstruct_block(const TransformerBlock& blk, const ModelConfig& cfg,
                                   const std::vector<Tensor>& x_fp, const std::vector<Tensor>& x_q,
                                   const ReconConfig& rc, PipelineMode mode, const BlockActQuant* act,
                                   int64_t block_index) {
    rc.validate();
    if (x_fp.empty() || x_fp.size() != x_q.size()) throw config_error("reconstruct_block: calibration batches missing");
    const auto t_start = std::chrono::steady_clock::now();
    const int64_t n_samples = int64_t(x_fp.size());

    Rng init_rng(mix_seed(rc.seed, 0x5eed0001));
    Rng batch_rng(mix_seed(rc.seed, 0x5eed0002));
    Rng drop_rng(mix_seed(rc.seed, 0x5eed0003));

    BlockReconResult res;
    res.report.index = block_index;
    const auto ws = block_weights(blk);
    for (int i = 0; i < kBlockLayers; ++i) {
        res.state.layers[size_t(i)] =
            init_layer_rounding(*ws[size_t(i)], rc.variant, rc.bits_w, rc.rank, rc.u2_std, init_rng);
    }

    // FP targets, computed once per sample
    std::vector<Tensor> targets(static_cast<size_t>(n_samples));
    for (int64_t s = 0; s < n_samples; ++s) targets[size_t(s)] = block_forward(blk, x_fp[size_t(s)], cfg);

    // fixed held-in batch: the leading samples
    const int64_t held = std::min<int64_t>(rc.batch_size, n_samples);
    std::vector<const Tensor*> held_x, held_y;
    for (int64_t s = 0; s < held; ++s) {
        held_x.push_back(&x_q[size_t(s)]);
        held_y.push_back(&targets[size_t(s)]);
    }

    const double initial = block_eval_loss(blk, cfg, res.state, held_x, held_y);
    res.report.initial_loss = initial;
    res.report.trajectory.emplace_back(0, initial);

    if (rc.variant == RoundVariant::rtn) {
        res.report.final_loss = initial;
        res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        return res;
    }

    const double drop_p = rc.effective_drop_prob(mode);
    const bool use_act = mode == PipelineMode::per_tensor_static_wa && act != nullptr;
    const AdamConfig adam_cfg{rc.lr, rc.adam_beta1, rc.adam_beta2, rc.adam_eps};
    std::array<LayerAdam, kBlockLayers> adam{};

    BlockRounding best = res.state;
    double best_loss = initial;

    for (int64_t it = 1; it <= rc.iterations; ++it) {
        std::vector<const Tensor*> bx, by;
        for (int64_t b = 0; b < rc.batch_size; ++b) {
            const int64_t idx = batch_rng.next_below(n_samples);
            bx.push_back(&x_q[size_t(idx)]);
            by.push_back(&targets[size_t(idx)]);
        }
        std::vector<SiteDrops> drops;
        if (use_act) {
            drops.resize(size_t(rc.batch_size));
            for (auto& sd : drops) {
                for (int s = 0; s < kNumActSites; ++s) sd[size_t(s)] = drop_rng.next_uniform() < drop_p;
            }
        }
        BlockLossGrads bg = block_loss_grads(blk, cfg, res.state, bx, by, use_act ? act : nullptr,
                                             use_act ? &drops : nullptr, RoundKind::nearest);
        if (!std::isfinite(bg.loss)) {
            throw numeric_error("block " + std::to_string(block_index) + ": non-finite loss at iteration " +
                                std::to_string(it));
        }
        if (bg.loss > 1e6 * std::max(initial, 1e-30)) {
            throw numeric_error("block " + std::to_string(block_index) + ": reconstruction diverged at iteration " +
                                std::to_string(it) + " (loss " + std::to_string(bg.loss) + ")");
        }
        for (int i = 0; i < kBlockLayers; ++i) {
            adam_step_layer(res.state.layers[size_t(i)], adam[size_t(i)], bg.grads[size_t(i)], adam_cfg, it);
        }
        if (it % rc.eval_interval == 0 || it == rc.iterations) {
            const double le = block_eval_loss(blk, cfg, res.state, held_x, held_y);
            res.report.trajectory.emplace_back(it, le);
            if (le < best_loss) {
                best_loss = le;
                best = res.state;
            }
        }
    }

    res.state = std::move(best);
    res.report.final_loss = best_loss;
    res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

namespace {

std::array<RangeStats, kNumActSites> calibrate_block_sites(const TransformerBlock& blk, const ModelConfig& cfg,
                                                           const std::vector<Tensor>& x_q) {
    std::array<RangeStats, kNumActSites> ranges;
    QuantSpec spec;
    spec.granularity = Granularity::per_tensor;
    spec.mode = RangeMode::static_range;
    std::array<Tensor, kBlockLayers> w_fp;
    const auto ws = block_weights(blk);
    for (int i = 0; i < kBlockLayers; ++i) w_fp[size_t(i)] = *ws[size_t(i)];
    ActRuntime rt;  // FP pass; the cache holds the pre-quant site inputs
    SampleCache c;
    for (const Tensor& x : x_q) {
        recon_forward(cfg, w_fp, blk, x, rt, c);
        accumulate_range(ranges[size_t(ActSite::attn_in)], c.n1, spec);
        accumulate_range(ranges[size_t(ActSite::q_bmm)], c.qs.y, spec);
        accumulate_range(ranges[size_t(ActSite::k_bmm)], c.ks.y, spec);
        accumulate_range(ranges[size_t(ActSite::v_bmm)], c.v0, spec);
        for (const Tensor& p : c.probs_fp) accumulate_range(ranges[size_t(ActSite::probs)], p, spec);
        accumulate_range(ranges[size_t(ActSite::attn_out_in)], c.ctx, spec);
        accumulate_range(ranges[size_t(ActSite::ffn_in)], c.n2, spec);
        accumulate_range(ranges[size_t(ActSite::ffn_act)], c.ms.y, spec);
    }
    return ranges;
}

void bake_block(Model& qm, int64_t k, const TransformerBlock& fp_blk, const BlockRounding& state) {
    TransformerBlock& qb = qm.blocks[size_t(k)];
    const auto ws = block_weights(fp_blk);
    const auto qws = block_weights(qb);
    for (int i = 0; i < kBlockLayers; ++i) {
        const LayerRounding& st = state.layers[size_t(i)];
        Tensor w_hat = st.dequantize(*ws[size_t(i)]);
        *const_cast<Tensor*>(qws[size_t(i)]) = std::move(w_hat);

        const std::string prefix = "blk." + std::to_string(k) + "." + block_layer_name(i) + ".";
        const int64_t c_out = ws[size_t(i)]->rows();
        qm.extra_tensors[prefix + "qs.step"] = Tensor({c_out}, std::vector<float>(st.s1.step));
        qm.extra_tensors[prefix + "qs.zp"] = Tensor({c_out}, std::vector<float>(st.s1.zero_point));
        if (st.variant == RoundVariant::flexround) {
            qm.extra_tensors[prefix + "flex.s2"] = st.s2;
        } else if (st.variant != RoundVariant::rtn) {
            qm.extra_tensors[prefix + "lrq.l2"] = st.l2;
            qm.extra_tensors[prefix + "lrq.u2"] = st.u2;
            qm.extra_tensors[prefix + "lrq.r2"] = st.r2;
            qm.extra_tensors[prefix + "lrq.c2"] = st.c2;
        }
    }
}

}  // namespace

QuantizeResult quantize_model(const Model& fp, const CalibrationSet& calib, const ReconConfig& rc,
                              PipelineMode mode) {
    rc.validate();
    if (calib.sequences.empty()) throw config_error("quantize_model: empty calibration set");
    if (calib.vocab_size > fp.config.vocab_size) throw config_error("quantize_model: calibration vocab exceeds model");

    QuantizeResult out;
    out.model = fp;
    out.model.quant = InferenceQuant{};
    out.model.extra_tensors.clear();
    out.report.mode = mode;
    out.report.variant = rc.variant;

    const int64_t n = int64_t(calib.sequences.size());
    std::vector<Tensor> x_fp(static_cast<size_t>(n)), x_q(static_cast<size_t>(n));
    for (int64_t s = 0; s < n; ++s) {
        x_fp[size_t(s)] = embed(fp, calib.sequences[size_t(s)]);
        x_q[size_t(s)] = x_fp[size_t(s)];
    }

    for (int64_t k = 0; k < fp.config.n_layers; ++k) {
        BlockActQuant act;
        const BlockActQuant* act_ptr = nullptr;
        if (mode == PipelineMode::per_tensor_static_wa) {
            act.bits = rc.bits_a;
            act.per_token = false;
            act.ranges = calibrate_block_sites(fp.blocks[size_t(k)], fp.config, x_q);
            act_ptr = &act;
        }

        ReconConfig block_rc = rc;
        block_rc.seed = block_seed(rc.seed, k);
        BlockReconResult res;
        try {
            res = reconstruct_block(fp.blocks[size_t(k)], fp.config, x_fp, x_q, block_rc, mode, act_ptr, k);
        } catch (const numeric_error& e) {
            throw numeric_error("quantize_model: block " + std::to_string(k) + " failed: " + e.what());
        }
        out.report.blocks.push_back(res.report);

        bake_block(out.model, k, fp.blocks[size_t(k)], res.state);
        if (mode == PipelineMode::per_tensor_static_wa) out.model.quant.act.push_back(act);

        // advance both streams past the finalized block
        for (int64_t s = 0; s < n; ++s) {
            x_fp[size_t(s)] = block_forward(fp.blocks[size_t(k)], x_fp[size_t(s)], fp.config, nullptr, 0, k);
            x_q[size_t(s)] =
                block_forward(out.model.blocks[size_t(k)], x_q[size_t(s)], fp.config, act_ptr, 0, k);
        }
    }

    // post-hoc activation / KV quantization per mode
    if (mode == PipelineMode::per_token_wa) {
        for (int64_t k = 0; k < fp.config.n_layers; ++k) {
            BlockActQuant a;
            a.bits = rc.bits_a;
            a.per_token = true;
            out.model.quant.act.push_back(a);
        }
        out.model.quant.kv_bits = rc.bits_kv;
    } else if (mode == PipelineMode::per_tensor_static_wa) {
        out.model.quant.kv_bits = rc.bits_kv;
    }
    return out;
}

std::vector<double> accumulated_rmse(const Model& fp_model, const Model& q_model,
                                     const std::vector<std::vector<int32_t>>& sequences) {
    const ModelConfig& a = fp_model.config;
    const ModelConfig& b = q_model.config;
    if (a.vocab_size != b.vocab_size || a.d_model != b.d_model || a.n_layers != b.n_layers ||
        a.n_heads != b.n_heads || a.d_ff != b.d_ff) {
        throw config_error("accumulated_rmse: model architectures differ");
    }
    if (sequences.empty()) throw config_error("accumulated_rmse: no samples");

    std::vector<double> sumsq(size_t(a.n_layers), 0.0);
    std::vector<double> count(size_t(a.n_layers), 0.0);
    for (const auto& seq : sequences) {
        Tensor x_fp = embed(fp_model, seq);
        Tensor x_q = embed(q_model, seq);
        for (int64_t k = 0; k < a.n_layers; ++k) {
            x_fp = block_forward(fp_model.blocks[size_t(k)], x_fp, a, nullptr, 0, k);
            x_q = block_forward(q_model.blocks[size_t(k)], x_q, b, q_model.quant.block(k), 0, k);
            for (int64_t i = 0; i < x_fp.numel(); ++i) {
                const double d = double(x_fp[i]) - double(x_q[i]);
                sumsq[size_t(k)] += d * d;
            }
            count[size_t(k)] += double(x_fp.numel());
        }
    }
    std::vector<double> curve(size_t(a.n_layers));
    for (size_t k = 0; k < curve.size(); ++k) curve[k] = std::sqrt(sumsq[k] / count[k]);
    return curve;
}

}  // namespace lrq
