#include "lrq/model.hpp"

#include <cmath>
#include <string>

#include "lrq/rng.hpp"

namespace lrq {

namespace {

QuantSpec per_token_spec(int bits) {
    QuantSpec s;
    s.bits = bits;
    s.granularity = Granularity::per_token;
    s.mode = RangeMode::dynamic;
    return s;
}

// Fake-quantize an activation tensor at one insertion point. KV bits take
// over the k/v sites (the cache write points); otherwise the block's
// activation scheme applies; FP when neither is configured.
Tensor apply_site(const Tensor& t, ActSite site, const BlockActQuant* act, int kv_bits) {
    const bool kv_site = site == ActSite::k_bmm || site == ActSite::v_bmm;
    if (kv_site && kv_bits > 0) {
        return quant_activation(t, per_token_spec(kv_bits));
    }
    if (act != nullptr && act->bits > 0) {
        if (act->per_token) {
            return quant_activation(t, per_token_spec(act->bits));
        }
        QuantSpec s;
        s.bits = act->bits;
        s.granularity = Granularity::per_tensor;
        s.mode = RangeMode::static_range;
        return quant_activation(t, s, &act->ranges[static_cast<size_t>(site)]);
    }
    return t;
}

void check_finite(const Tensor& t, const char* site, int64_t block_index) {
    if (!t.all_finite()) {
        throw numeric_error("block " + std::to_string(block_index) + ": non-finite values at " + site);
    }
}

float silu(float x) { return x * (1.0f / (1.0f + std::exp(-x))); }

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 2) throw config_error("model: vocab_size must be >= 2");
    if (d_model < 1 || n_heads < 1 || d_ff < 1) throw config_error("model: dimensions must be positive");
    if (n_layers < 0) throw config_error("model: n_layers must be >= 0");
    if (d_model % n_heads != 0) throw config_error("model: d_model must divide into heads");
    if (head_dim() % 2 != 0) throw config_error("model: head_dim must be even for rotary pairs");
}

const char* act_site_name(ActSite site) {
    switch (site) {
        case ActSite::attn_in: return "attn_in";
        case ActSite::q_bmm: return "q_bmm";
        case ActSite::k_bmm: return "k_bmm";
        case ActSite::v_bmm: return "v_bmm";
        case ActSite::probs: return "probs";
        case ActSite::attn_out_in: return "attn_out_in";
        case ActSite::ffn_in: return "ffn_in";
        case ActSite::ffn_act: return "ffn_act";
    }
    return "?";
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps) {
    if (x.rank() != 2 || gain.numel() != x.cols()) throw dimension_error("rmsnorm: gain size mismatch");
    Tensor out(x.shape());
    const int64_t d = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += double(x.at(i, j)) * double(x.at(i, j));
        const float r = float(1.0 / std::sqrt(ss / double(d) + double(eps)));
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * r * gain[j];
    }
    return out;
}

void rope_inplace(Tensor& x, int64_t n_heads, float base, int64_t pos0) {
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
                const float x0 = head[2 * i], x1 = head[2 * i + 1];
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

Tensor block_forward(const TransformerBlock& blk, const Tensor& x, const ModelConfig& cfg, const BlockActQuant* act,
                     int kv_bits, int64_t block_index) {
    check_finite(x, "input", block_index);
    const int64_t T = x.rows(), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();

    Tensor a = apply_site(rmsnorm(x, blk.attn_norm, cfg.norm_eps), ActSite::attn_in, act, kv_bits);
    Tensor q = matmul_bt(a, blk.wq);
    Tensor k = matmul_bt(a, blk.wk);
    Tensor v = matmul_bt(a, blk.wv);
    rope_inplace(q, H, cfg.rope_base, 0);
    rope_inplace(k, H, cfg.rope_base, 0);
    q = apply_site(q, ActSite::q_bmm, act, kv_bits);
    k = apply_site(k, ActSite::k_bmm, act, kv_bits);
    v = apply_site(v, ActSite::v_bmm, act, kv_bits);

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    Tensor ctx({T, d});
    for (int64_t h = 0; h < H; ++h) {
        const int64_t off = h * dh;
        // causal scores and probabilities; entries above the diagonal stay 0
        Tensor probs({T, T});
        for (int64_t i = 0; i < T; ++i) {
            double row_max = -1e300;
            std::vector<double> sc(size_t(i) + 1);
            for (int64_t j = 0; j <= i; ++j) {
                double dot = 0.0;
                for (int64_t e = 0; e < dh; ++e) dot += double(q.at(i, off + e)) * double(k.at(j, off + e));
                sc[size_t(j)] = dot * inv_sqrt_dh;
                row_max = std::max(row_max, sc[size_t(j)]);
            }
            double denom = 0.0;
            for (int64_t j = 0; j <= i; ++j) denom += std::exp(sc[size_t(j)] - row_max);
            for (int64_t j = 0; j <= i; ++j) probs.at(i, j) = float(std::exp(sc[size_t(j)] - row_max) / denom);
        }
        probs = apply_site(probs, ActSite::probs, act, kv_bits);
        for (int64_t i = 0; i < T; ++i) {
            for (int64_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (int64_t j = 0; j <= i; ++j) acc += double(probs.at(i, j)) * double(v.at(j, off + e));
                ctx.at(i, off + e) = float(acc);
            }
        }
    }

    Tensor h2 = add(x, matmul_bt(apply_site(ctx, ActSite::attn_out_in, act, kv_bits), blk.wo));
    check_finite(h2, "attention", block_index);

    Tensor f = apply_site(rmsnorm(h2, blk.ffn_norm, cfg.norm_eps), ActSite::ffn_in, act, kv_bits);
    Tensor gate = matmul_bt(f, blk.w_gate);
    Tensor up = matmul_bt(f, blk.w_up);
    for (int64_t i = 0; i < gate.numel(); ++i) gate[i] = silu(gate[i]) * up[i];
    Tensor out = add(h2, matmul_bt(apply_site(gate, ActSite::ffn_act, act, kv_bits), blk.w_down));
    check_finite(out, "ffn", block_index);
    return out;
}

Tensor block_forward_step(const TransformerBlock& blk, const Tensor& x_row, const ModelConfig& cfg, KvCache& cache,
                          const BlockActQuant* act, int kv_bits) {
    const int64_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const int64_t pos = cache.len;
    if (pos >= cache.k.rows()) throw dimension_error("block_forward_step: KV cache capacity exceeded");

    Tensor a = apply_site(rmsnorm(x_row, blk.attn_norm, cfg.norm_eps), ActSite::attn_in, act, kv_bits);
    Tensor q = matmul_bt(a, blk.wq);
    Tensor k = matmul_bt(a, blk.wk);
    Tensor v = matmul_bt(a, blk.wv);
    rope_inplace(q, H, cfg.rope_base, pos);
    rope_inplace(k, H, cfg.rope_base, pos);
    q = apply_site(q, ActSite::q_bmm, act, kv_bits);
    k = apply_site(k, ActSite::k_bmm, act, kv_bits);
    v = apply_site(v, ActSite::v_bmm, act, kv_bits);
    for (int64_t e = 0; e < d; ++e) {
        cache.k.at(pos, e) = k.at(0, e);
        cache.v.at(pos, e) = v.at(0, e);
    }
    cache.len += 1;

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    Tensor ctx({1, d});
    for (int64_t h = 0; h < H; ++h) {
        const int64_t off = h * dh;
        Tensor probs({1, pos + 1});
        double row_max = -1e300;
        std::vector<double> sc(size_t(pos) + 1);
        for (int64_t j = 0; j <= pos; ++j) {
            double dot = 0.0;
            for (int64_t e = 0; e < dh; ++e) dot += double(q.at(0, off + e)) * double(cache.k.at(j, off + e));
            sc[size_t(j)] = dot * inv_sqrt_dh;
            row_max = std::max(row_max, sc[size_t(j)]);
        }
        double denom = 0.0;
        for (int64_t j = 0; j <= pos; ++j) denom += std::exp(sc[size_t(j)] - row_max);
        for (int64_t j = 0; j <= pos; ++j) probs.at(0, j) = float(std::exp(sc[size_t(j)] - row_max) / denom);
        probs = apply_site(probs, ActSite::probs, act, kv_bits);
        for (int64_t e = 0; e < dh; ++e) {
            double acc = 0.0;
            for (int64_t j = 0; j <= pos; ++j) acc += double(probs.at(0, j)) * double(cache.v.at(j, off + e));
            ctx.at(0, off + e) = float(acc);
        }
    }

    Tensor h2 = add(x_row, matmul_bt(apply_site(ctx, ActSite::attn_out_in, act, kv_bits), blk.wo));
    Tensor f = apply_site(rmsnorm(h2, blk.ffn_norm, cfg.norm_eps), ActSite::ffn_in, act, kv_bits);
    Tensor gate = matmul_bt(f, blk.w_gate);
    Tensor up = matmul_bt(f, blk.w_up);
    for (int64_t i = 0; i < gate.numel(); ++i) gate[i] = silu(gate[i]) * up[i];
    return add(h2, matmul_bt(apply_site(gate, ActSite::ffn_act, act, kv_bits), blk.w_down));
}

ModelKvState make_kv_state(const Model& m, int64_t capacity) {
    ModelKvState st;
    st.blocks.resize(m.blocks.size());
    for (auto& c : st.blocks) {
        c.k = Tensor({capacity, m.config.d_model});
        c.v = Tensor({capacity, m.config.d_model});
        c.len = 0;
    }
    return st;
}

Tensor embed(const Model& m, const std::vector<int32_t>& tokens) {
    const int64_t d = m.config.d_model;
    Tensor x({int64_t(tokens.size()), d});
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < 0 || tokens[t] >= m.config.vocab_size) throw config_error("embed: token id out of range");
        for (int64_t e = 0; e < d; ++e) x.at(int64_t(t), e) = m.tok_emb.at(tokens[t], e);
    }
    return x;
}

Tensor model_logits(const Model& m, const std::vector<int32_t>& tokens) {
    Tensor x = embed(m, tokens);
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        x = block_forward(m.blocks[i], x, m.config, m.quant.block(int64_t(i)), m.quant.kv_bits, int64_t(i));
    }
    return matmul_bt(rmsnorm(x, m.final_norm, m.config.norm_eps), m.lm_head);
}

Tensor model_step_logits(const Model& m, ModelKvState& state, int32_t token) {
    Tensor x = embed(m, {token});
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        x = block_forward_step(m.blocks[i], x, m.config, state.blocks[i], m.quant.block(int64_t(i)), m.quant.kv_bits);
    }
    state.len += 1;
    return matmul_bt(rmsnorm(x, m.final_norm, m.config.norm_eps), m.lm_head);
}

Model make_toy_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng(seed);
    const double ws = 1.0 / std::sqrt(double(cfg.d_model));
    const double ds = 1.0 / std::sqrt(double(cfg.d_ff));
    m.tok_emb = rng.normal({cfg.vocab_size, cfg.d_model}, 0.0, 1.0);
    m.blocks.resize(size_t(cfg.n_layers));
    for (auto& b : m.blocks) {
        b.wq = rng.normal({cfg.d_model, cfg.d_model}, 0.0, ws);
        b.wk = rng.normal({cfg.d_model, cfg.d_model}, 0.0, ws);
        b.wv = rng.normal({cfg.d_model, cfg.d_model}, 0.0, ws);
        b.wo = rng.normal({cfg.d_model, cfg.d_model}, 0.0, ws);
        b.w_gate = rng.normal({cfg.d_ff, cfg.d_model}, 0.0, ws);
        b.w_up = rng.normal({cfg.d_ff, cfg.d_model}, 0.0, ws);
        b.w_down = rng.normal({cfg.d_model, cfg.d_ff}, 0.0, ds);
        b.attn_norm = Tensor::full({cfg.d_model}, 1.0f);
        b.ffn_norm = Tensor::full({cfg.d_model}, 1.0f);
    }
    m.final_norm = Tensor::full({cfg.d_model}, 1.0f);
    m.lm_head = rng.normal({cfg.vocab_size, cfg.d_model}, 0.0, ws);
    return m;
}

}  // namespace lrq
