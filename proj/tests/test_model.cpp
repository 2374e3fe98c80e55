#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "lrq/calibration.hpp"
#include "lrq/container.hpp"
#include "lrq/model.hpp"
#include "lrq/perplexity.hpp"
#include "lrq/quantizer.hpp"
#include "test_util.hpp"

using namespace lrq;
using testutil::bit_equal;

namespace {

// Double-precision scalar reference of the FP block forward, written
// independently of the library implementation.
std::vector<double> ref_block_forward(const TransformerBlock& b, const ModelConfig& cfg,
                                      const std::vector<double>& x) {
    const int64_t d = cfg.d_model, H = cfg.n_heads, dh = d / H, F = cfg.d_ff;
    const int64_t T = int64_t(x.size()) / d;
    auto matvecT = [](const Tensor& w, const std::vector<double>& in, int64_t T_, int64_t cin, int64_t cout) {
        std::vector<double> out(size_t(T_ * cout), 0.0);
        for (int64_t t = 0; t < T_; ++t) {
            for (int64_t o = 0; o < cout; ++o) {
                double acc = 0.0;
                for (int64_t i = 0; i < cin; ++i) acc += double(w.at(o, i)) * in[size_t(t * cin + i)];
                out[size_t(t * cout + o)] = acc;
            }
        }
        return out;
    };
    auto norm = [&](const std::vector<double>& in, const Tensor& gain) {
        std::vector<double> out(in.size());
        for (int64_t t = 0; t < T; ++t) {
            double ss = 0.0;
            for (int64_t j = 0; j < d; ++j) ss += in[size_t(t * d + j)] * in[size_t(t * d + j)];
            double r = 1.0 / std::sqrt(ss / double(d) + double(cfg.norm_eps));
            for (int64_t j = 0; j < d; ++j) out[size_t(t * d + j)] = in[size_t(t * d + j)] * r * double(gain[j]);
        }
        return out;
    };
    auto rope = [&](std::vector<double>& v) {
        for (int64_t t = 0; t < T; ++t) {
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t i = 0; i < dh / 2; ++i) {
                    double freq = std::pow(double(cfg.rope_base), -2.0 * double(i) / double(dh));
                    double c = std::cos(double(t) * freq), s = std::sin(double(t) * freq);
                    double* p = &v[size_t(t * d + h * dh + 2 * i)];
                    double a0 = p[0], a1 = p[1];
                    p[0] = a0 * c - a1 * s;
                    p[1] = a0 * s + a1 * c;
                }
            }
        }
    };

    std::vector<double> n1 = norm(x, b.attn_norm);
    std::vector<double> q = matvecT(b.wq, n1, T, d, d);
    std::vector<double> k = matvecT(b.wk, n1, T, d, d);
    std::vector<double> v = matvecT(b.wv, n1, T, d, d);
    rope(q);
    rope(k);
    std::vector<double> ctx(size_t(T * d), 0.0);
    for (int64_t h = 0; h < H; ++h) {
        for (int64_t i = 0; i < T; ++i) {
            std::vector<double> sc(size_t(i) + 1);
            double mx = -1e300;
            for (int64_t j = 0; j <= i; ++j) {
                double dot = 0.0;
                for (int64_t e = 0; e < dh; ++e) {
                    dot += q[size_t(i * d + h * dh + e)] * k[size_t(j * d + h * dh + e)];
                }
                sc[size_t(j)] = dot / std::sqrt(double(dh));
                mx = std::max(mx, sc[size_t(j)]);
            }
            double denom = 0.0;
            for (int64_t j = 0; j <= i; ++j) denom += std::exp(sc[size_t(j)] - mx);
            for (int64_t j = 0; j <= i; ++j) {
                double p = std::exp(sc[size_t(j)] - mx) / denom;
                for (int64_t e = 0; e < dh; ++e) ctx[size_t(i * d + h * dh + e)] += p * v[size_t(j * d + h * dh + e)];
            }
        }
    }
    std::vector<double> h2 = matvecT(b.wo, ctx, T, d, d);
    for (size_t i = 0; i < h2.size(); ++i) h2[i] += x[i];
    std::vector<double> n2 = norm(h2, b.ffn_norm);
    std::vector<double> gate = matvecT(b.w_gate, n2, T, d, F);
    std::vector<double> up = matvecT(b.w_up, n2, T, d, F);
    for (size_t i = 0; i < gate.size(); ++i) gate[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
    std::vector<double> down = matvecT(b.w_down, gate, T, F, d);
    for (size_t i = 0; i < down.size(); ++i) down[i] += h2[i];
    return down;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("block_forward with zero weights is the identity on x") {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    Model m = make_toy_model(cfg, 5);
    TransformerBlock b = m.blocks[0];
    b.wq = Tensor({8, 8});
    b.wk = Tensor({8, 8});
    b.wv = Tensor({8, 8});
    b.wo = Tensor({8, 8});
    b.w_gate = Tensor({16, 8});
    b.w_up = Tensor({16, 8});
    b.w_down = Tensor({8, 16});
    Rng rng(3);
    Tensor x = rng.normal({5, 8}, 0.0, 1.0);
    CHECK(bit_equal(block_forward(b, x, cfg), x));
}

TEST_CASE("block_forward matches a scalar reference") {
    for (auto [T, d, H, F] : {std::array<int64_t, 4>{1, 4, 1, 8}, {3, 4, 2, 8}, {5, 8, 2, 12}}) {
        ModelConfig cfg;
        cfg.vocab_size = 8;
        cfg.d_model = d;
        cfg.n_layers = 1;
        cfg.n_heads = H;
        cfg.d_ff = F;
        Model m = make_toy_model(cfg, 17 + uint64_t(T));
        Rng rng(23 + uint64_t(T));
        Tensor x = rng.normal({T, d}, 0.0, 1.0);
        std::vector<double> xd(x.data(), x.data() + x.numel());
        std::vector<double> want = ref_block_forward(m.blocks[0], cfg, xd);
        Tensor got = block_forward(m.blocks[0], x, cfg);
        for (int64_t i = 0; i < got.numel(); ++i) {
            CHECK(std::fabs(double(got[i]) - want[size_t(i)]) < 1e-5);
        }
    }
}

TEST_CASE("KV cache path matches the full forward over autoregressive steps") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    for (int kv_bits : {0, 8}) {
        Model m = make_toy_model(cfg, 77);
        m.quant.kv_bits = kv_bits;
        std::vector<int32_t> tokens = {3, 11, 25};
        ModelKvState state = make_kv_state(m, 16);
        Tensor step_logits;
        for (int32_t t : tokens) step_logits = model_step_logits(m, state, t);
        for (int step = 0; step < 8; ++step) {
            Tensor full = model_logits(m, tokens);
            for (int64_t j = 0; j < cfg.vocab_size; ++j) {
                CHECK(std::fabs(full.at(full.rows() - 1, j) - step_logits.at(0, j)) < 1e-5);
            }
            int32_t next = 0;
            for (int64_t j = 1; j < cfg.vocab_size; ++j) {
                if (full.at(full.rows() - 1, j) > full.at(full.rows() - 1, next)) next = int32_t(j);
            }
            tokens.push_back(next);
            step_logits = model_step_logits(m, state, next);
        }
    }
}

TEST_CASE("disabled quant hooks leave the FP path bit-exact") {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    Model m = make_toy_model(cfg, 29);
    Rng rng(30);
    Tensor x = rng.normal({6, 8}, 0.0, 1.0);
    BlockActQuant disabled;  // bits = 0
    CHECK(bit_equal(block_forward(m.blocks[0], x, cfg, &disabled, 0), block_forward(m.blocks[0], x, cfg)));
}

TEST_CASE("causality: later tokens never affect earlier logits") {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    Model m = make_toy_model(cfg, 31);
    std::vector<int32_t> tokens = {1, 5, 9, 2, 7};
    Tensor base = model_logits(m, tokens);
    std::vector<int32_t> perturbed = tokens;
    perturbed[3] = 14;
    perturbed[4] = 0;
    Tensor pert = model_logits(m, perturbed);
    for (int64_t t = 0; t < 3; ++t) {
        for (int64_t j = 0; j < cfg.vocab_size; ++j) CHECK(base.at(t, j) == pert.at(t, j));
    }
}

TEST_CASE("container round-trip is bit-exact including extra tensors") {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    Model m = make_toy_model(cfg, 41);
    Rng rng(42);
    m.extra_tensors["blk.0.attn_q.lrq.l2"] = rng.normal({8, 2}, 0.0, 1.0);
    m.extra_tensors["blk.0.attn_q.qs.step"] = rng.uniform({8}, 0.01, 0.2);
    m.quant.kv_bits = 8;
    BlockActQuant a;
    a.bits = 8;
    a.per_token = true;
    m.quant.act = {a, a};

    const std::string path = temp_path("lrq_roundtrip.lrqm");
    save_model(m, path);
    Model l = load_model(path);
    CHECK(bit_equal(l.tok_emb, m.tok_emb));
    CHECK(bit_equal(l.lm_head, m.lm_head));
    CHECK(bit_equal(l.blocks[1].w_down, m.blocks[1].w_down));
    CHECK(bit_equal(l.extra_tensors.at("blk.0.attn_q.lrq.l2"), m.extra_tensors.at("blk.0.attn_q.lrq.l2")));
    CHECK(bit_equal(l.extra_tensors.at("blk.0.attn_q.qs.step"), m.extra_tensors.at("blk.0.attn_q.qs.step")));
    CHECK(l.quant.kv_bits == 8);
    REQUIRE(l.quant.act.size() == 2);
    CHECK(l.quant.act[0].per_token);

    // save -> load -> save reproduces the file byte for byte
    const std::string path2 = temp_path("lrq_roundtrip2.lrqm");
    save_model(l, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("container rejects malformed files") {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 8;
    Model m = make_toy_model(cfg, 43);
    const std::string path = temp_path("lrq_corrupt.lrqm");
    save_model(m, path);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    SUBCASE("bad magic") {
        std::string b = bytes;
        b[0] = 'X';
        std::ofstream(path, std::ios::binary) << b;
        CHECK_THROWS_AS(load_model(path), io_error);
    }
    SUBCASE("truncated payload") {
        std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 64);
        CHECK_THROWS_AS(load_model(path), io_error);
    }
    SUBCASE("out-of-bounds offset") {
        // rewrite the header with one offset pushed past the payload
        uint64_t hlen;
        std::memcpy(&hlen, bytes.data() + 8, 8);
        std::string htext = bytes.substr(16, hlen);
        auto pos = htext.find("\"offset\":0");
        REQUIRE(pos != std::string::npos);
        htext.replace(pos, 10, "\"offset\":9");  // same length, misaligned+oob for the big tensor
        std::string b = bytes;
        b.replace(16, hlen, htext);
        std::ofstream(path, std::ios::binary) << b;
        CHECK_THROWS_AS(load_model(path), io_error);
    }
    std::remove(path.c_str());
}

TEST_CASE("container header order-independence") {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 8;
    Model m = make_toy_model(cfg, 47);
    const std::string path = temp_path("lrq_reorder.lrqm");
    save_model(m, path);

    // Rebuild the file with the header's top-level keys in reverse insertion
    // order; tensors must load identically.
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    nlohmann::ordered_json hdr = nlohmann::ordered_json::parse(bytes.substr(16, hlen));
    nlohmann::ordered_json re;
    for (auto it = hdr.rbegin(); it != hdr.rend(); ++it) re[it.key()] = it.value();
    std::string htext = re.dump();
    // keep the header the same length so payload offsets stay valid
    REQUIRE(htext.size() <= hlen);
    htext.append(size_t(hlen) - htext.size(), ' ');
    std::string b = bytes;
    b.replace(16, hlen, htext);
    std::ofstream(path, std::ios::binary) << b;

    Model l = load_model(path);
    CHECK(bit_equal(l.tok_emb, m.tok_emb));
    CHECK(bit_equal(l.blocks[0].wq, m.blocks[0].wq));
    std::remove(path.c_str());
}

TEST_CASE("make_calibration synthetic determinism and errors") {
    CalibrationSet a = make_calibration_synthetic(64, 4, 16, 9);
    CalibrationSet b = make_calibration_synthetic(64, 4, 16, 9);
    CHECK(a.sequences == b.sequences);
    for (const auto& s : a.sequences) {
        for (int32_t id : s) CHECK(id < 64);
    }
    CHECK_THROWS_AS(make_calibration_synthetic(64, 0, 16, 9), config_error);
}

TEST_CASE("make_calibration text mode matches the byte-identity golden") {
    const std::string path = temp_path("lrq_calib.txt");
    std::string text = "The quick brown fox jumps over the lazy dog. 0123456789!";
    std::ofstream(path, std::ios::binary) << text;
    CalibrationSet set = make_calibration_text(path, 3, 16);
    CHECK(set.vocab_size == 256);
    // byte-level tokenizer: ids are exactly the file's bytes, in order
    for (int s = 0; s < 3; ++s) {
        for (int t = 0; t < 16; ++t) {
            CHECK(set.sequences[size_t(s)][size_t(t)] == int32_t(uint8_t(text[size_t(s * 16 + t)])));
        }
    }
    CHECK_THROWS_AS(make_calibration_text(path, 10, 16), io_error);
    std::remove(path.c_str());
}

TEST_CASE("uniform logits give perplexity equal to vocab size") {
    ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    Model m = make_toy_model(cfg, 53);
    m.lm_head = Tensor({24, 8});  // all-zero head -> uniform distribution
    CalibrationSet corpus = make_calibration_synthetic(24, 3, 12, 10);
    PplResult r = evaluate_ppl(m, corpus);
    CHECK(r.ppl == doctest::Approx(24.0).epsilon(1e-3));
}

TEST_CASE("perplexity: FP model beats 2-bit RTN weights") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_ff = 64;
    Model fp = make_toy_model(cfg, 71);
    CalibrationSet corpus = testutil::make_self_corpus(fp, 6, 24, 11);
    double ppl_fp = evaluate_ppl(fp, corpus).ppl;
    CHECK(ppl_fp < 16.0);  // the model predicts its own greedy continuations

    Model q = fp;
    for (auto& b : q.blocks) {
        for (Tensor* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_gate, &b.w_up, &b.w_down}) {
            *w = rtn_init_weight(*w, 2, Granularity::per_channel).w_hat;
        }
    }
    double ppl_q = evaluate_ppl(q, corpus).ppl;
    CHECK(ppl_fp <= ppl_q);
}

TEST_CASE("perplexity is independent of corpus partitioning") {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    Model m = make_toy_model(cfg, 73);
    CalibrationSet corpus = make_calibration_synthetic(16, 6, 10, 12);
    PplResult whole = evaluate_ppl(m, corpus);
    PplResult h1 = evaluate_ppl_range(m, corpus, 0, 2);
    PplResult h2 = evaluate_ppl_range(m, corpus, 2, 6);
    double merged = std::exp((h1.nll_sum + h2.nll_sum) / double(h1.tokens + h2.tokens));
    CHECK(std::fabs(merged - whole.ppl) <= 1e-6 * whole.ppl);
}
