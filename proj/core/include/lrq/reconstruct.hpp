#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "lrq/adam.hpp"
#include "lrq/calibration.hpp"
#include "lrq/model.hpp"
#include "lrq/rounding.hpp"

namespace lrq {

enum class PipelineMode { per_tensor_static_wa, per_token_wa, weight_only };
const char* pipeline_mode_name(PipelineMode m);

struct ReconConfig {
    int64_t iterations = 5000;
    int64_t batch_size = 2;
    double lr = 3e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    // Probability that a sample skips activation fake-quant at one insertion
    // point for one iteration. Negative means the default: 0.5 when
    // activation quantization participates in reconstruction, else 0.
    double quant_drop_prob = -1.0;
    uint64_t seed = 0;
    RoundVariant variant = RoundVariant::lrq;
    int rank = 0;  // 0: per-layer min(C_out, C_in)
    int bits_w = 4;
    int bits_a = 8;
    int bits_kv = 8;
    float u2_std = 0.01f;
    int64_t eval_interval = 10;

    void validate() const;
    double effective_drop_prob(PipelineMode mode) const;
};

// Learnable rounding state of one linear layer.
struct LayerRounding {
    RoundVariant variant = RoundVariant::rtn;
    int bits = 4;
    QParams s1;
    Tensor l2, u2, r2, c2;  // lrq / lrq_no_bias
    Tensor s2;              // flexround

    Tensor scale(int64_t c_out, int64_t c_in) const;  // composite S (zeros for rtn)
    Tensor dequantize(const Tensor& w, RoundKind rk = RoundKind::nearest) const;
    DequantCache dequantize_cached(const Tensor& w, RoundKind rk = RoundKind::nearest) const;
    int64_t learnable_count() const;
};

LayerRounding init_layer_rounding(const Tensor& w, RoundVariant variant, int bits, int rank, float u2_std,
                                  Rng& init_rng);

// Gradients for one layer's learnables; unused slots stay empty.
struct LayerGrads {
    Tensor s1_step;  // [C_out x 1]
    Tensor l2, u2, r2, c2;
    Tensor s2;
};

// Maps dL/dW_hat onto the learnables through the STE convention
// (round' := 1, clamp' := inside-mask; exp and matmul exact).
LayerGrads dequant_backward(const Tensor& w, const LayerRounding& state, const DequantCache& cache,
                            const Tensor& grad_w_hat);

// Single linear layer reconstruction: loss = mean((X W^T - X~ W_hat^T)^2)
// plus its gradients. RoundKind::pass_through turns the forward into the
// differentiable surrogate used by the finite-difference checks.
struct LayerLossGrads {
    double loss = 0.0;
    LayerGrads grads;
};
LayerLossGrads layer_recon_gradients(const Tensor& w, const LayerRounding& state, const Tensor& x_fp,
                                     const Tensor& x_q, RoundKind rk = RoundKind::nearest);

// The seven quantized linear layers of one block, in fixed order:
// attn_q, attn_k, attn_v, attn_o, ffn_gate, ffn_up, ffn_down.
constexpr int kBlockLayers = 7;
const char* block_layer_name(int i);
std::array<const Tensor*, kBlockLayers> block_weights(const TransformerBlock& b);

struct BlockRounding {
    std::array<LayerRounding, kBlockLayers> layers;
    int64_t learnable_count() const;
};

using SiteDrops = std::array<bool, kNumActSites>;

struct BlockLossGrads {
    double loss = 0.0;
    std::array<LayerGrads, kBlockLayers> grads;
};

// STE gradients of the block reconstruction loss over a batch. The FP
// targets are the plain FP forward on x_fp; nothing on that path is ever
// quantized. `act` (static per-tensor, with per-sample `drops`) applies
// activation fake-quant at the insertion points on the quantized path.
BlockLossGrads ste_gradients(const TransformerBlock& blk, const ModelConfig& cfg, const BlockRounding& state,
                             const std::vector<const Tensor*>& x_fp, const std::vector<const Tensor*>& x_q,
                             const BlockActQuant* act = nullptr, const std::vector<SiteDrops>* drops = nullptr,
                             RoundKind rk = RoundKind::nearest);

struct BlockReport {
    int64_t index = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<std::pair<int64_t, double>> trajectory;  // (iteration, held-in loss)
    double wall_seconds = 0.0;  // reported to the console only, never serialized
};

struct ReconReport {
    PipelineMode mode = PipelineMode::weight_only;
    RoundVariant variant = RoundVariant::lrq;
    std::vector<BlockReport> blocks;
};

struct BlockReconResult {
    BlockRounding state;
    BlockReport report;
};

// Adam-optimizes one block's rounding parameters on seeded random batches,
// retaining the lowest held-in-loss iterate (so final <= initial always).
// The recorded losses quantize weights only; QDrop-style activation quant
// applies to the training iterations when `act` is given.
BlockReconResult reconstruct_block(const TransformerBlock& blk, const ModelConfig& cfg,
                                   const std::vector<Tensor>& x_fp, const std::vector<Tensor>& x_q,
                                   const ReconConfig& rc, PipelineMode mode, const BlockActQuant* act,
                                   int64_t block_index);

struct QuantizeResult {
    Model model;
    ReconReport report;
};

// Seed used for block k inside quantize_model; exposed so a block's
// reconstruction can be replayed externally.
uint64_t block_seed(uint64_t base_seed, int64_t block_index);

// Sequential block-by-block pipeline: maintains the FP stream X and the
// quantized stream X~ per calibration sample, reconstructs each block in
// order, then applies the mode's post-hoc activation/KV quantization.
QuantizeResult quantize_model(const Model& fp, const CalibrationSet& calib, const ReconConfig& rc,
                              PipelineMode mode);

// Accumulated per-block RMSE between the FP stream outputs and the
// quantized stream outputs (KV quantization excluded from the replay).
std::vector<double> accumulated_rmse(const Model& fp_model, const Model& q_model,
                                     const std::vector<std::vector<int32_t>>& sequences);

}  // namespace lrq
