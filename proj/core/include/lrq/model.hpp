#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lrq/quantizer.hpp"
#include "lrq/tensor.hpp"

namespace lrq {

struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 0;
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t d_ff = 0;
    float rope_base = 10000.0f;
    float norm_eps = 1e-5f;

    int64_t head_dim() const { return d_model / n_heads; }
    void validate() const;
};

// One pre-norm decoder block: four attention projections and the three
// gated-FFN matrices, plus the two norm gains.
struct TransformerBlock {
    Tensor wq, wk, wv, wo;  // [d x d]
    Tensor w_gate, w_up;    // [d_ff x d]
    Tensor w_down;          // [d x d_ff]
    Tensor attn_norm, ffn_norm;  // [d]
};

// Activation fake-quant insertion points. Softmax and norm inputs are never
// on this list; they stay FP.
enum class ActSite : int {
    attn_in = 0,   // normalized input feeding Wq/Wk/Wv
    q_bmm,         // queries after rotary, first BMM input
    k_bmm,         // keys after rotary (also the K cache write point)
    v_bmm,         // values (also the V cache write point)
    probs,         // softmax output feeding the second BMM
    attn_out_in,   // attention context feeding Wo
    ffn_in,        // normalized input feeding gate/up
    ffn_act,       // gated activation feeding W_down
};
constexpr int kNumActSites = 8;
const char* act_site_name(ActSite site);

// Inference-time activation quantization for one block.
struct BlockActQuant {
    int bits = 0;            // 0: activations stay FP
    bool per_token = false;  // false: static per-tensor using `ranges`
    std::array<RangeStats, kNumActSites> ranges;
};

struct InferenceQuant {
    int kv_bits = 0;  // 0: KV cache stays FP
    std::vector<BlockActQuant> act;

    const BlockActQuant* block(int64_t i) const {
        return act.empty() ? nullptr : &act[static_cast<size_t>(i)];
    }
};

struct Model {
    ModelConfig config;
    Tensor tok_emb;      // [V x d]
    std::vector<TransformerBlock> blocks;
    Tensor final_norm;   // [d]
    Tensor lm_head;      // [V x d]
    InferenceQuant quant;
    // Named tensors carried alongside the weights (learned rounding
    // parameters of a quantized model); round-trips through the container.
    std::map<std::string, Tensor> extra_tensors;
};

Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps);
void rope_inplace(Tensor& x, int64_t n_heads, float base, int64_t pos0);

// Per-block KV cache: rows are token positions, already rotary-encoded
// (and fake-quantized when kv_bits is set at the write point).
struct KvCache {
    Tensor k;  // [capacity x d]
    Tensor v;
    int64_t len = 0;
};

struct ModelKvState {
    std::vector<KvCache> blocks;
    int64_t len = 0;
};
ModelKvState make_kv_state(const Model& m, int64_t capacity);

// Full-sequence forward through one block with causal attention. `act` and
// `kv_bits` select the fake-quant behavior at the insertion points; pass
// nullptr/0 for the FP path. `block_index` only labels errors.
Tensor block_forward(const TransformerBlock& blk, const Tensor& x, const ModelConfig& cfg,
                     const BlockActQuant* act = nullptr, int kv_bits = 0, int64_t block_index = -1);

// Incremental forward for one new token row at position `cache.len`.
Tensor block_forward_step(const TransformerBlock& blk, const Tensor& x_row, const ModelConfig& cfg, KvCache& cache,
                          const BlockActQuant* act = nullptr, int kv_bits = 0);

Tensor embed(const Model& m, const std::vector<int32_t>& tokens);
// Teacher-forced logits [T x V], honoring the model's embedded quant config.
Tensor model_logits(const Model& m, const std::vector<int32_t>& tokens);
// One autoregressive step; appends to the caches and returns [1 x V] logits.
Tensor model_step_logits(const Model& m, ModelKvState& state, int32_t token);

// Deterministic toy model: Gaussian weights scaled by fan-in, unit norms.
Model make_toy_model(const ModelConfig& cfg, uint64_t seed);

}  // namespace lrq
