#include <doctest.h>

#include <cmath>
#include <vector>

#include "lrq/rounding.hpp"
#include "test_util.hpp"

using namespace lrq;
using testutil::bit_equal;
using testutil::random_matrix;

namespace {

// Scalar oracle evaluating the dequantization formula elementwise.
Tensor dequant_oracle(const Tensor& w, const QParams& s1, const Tensor& s, int bits) {
    Tensor out(w.shape());
    float qmax = float((1 << bits) - 1);
    for (int64_t i = 0; i < w.rows(); ++i) {
        float step = s1.step[size_t(i)], zp = s1.zero_point[size_t(i)];
        for (int64_t j = 0; j < w.cols(); ++j) {
            float t = std::round(w.at(i, j) / (step * std::exp(s.at(i, j)))) + zp;
            if (t < 0.0f) t = 0.0f;
            if (t > qmax) t = qmax;
            out.at(i, j) = step * (t - zp);
        }
    }
    return out;
}

// Gauss-Jordan inverse in double; test-only helper for the rank-ceiling check.
std::vector<double> invert(const Tensor& m) {
    const int n = int(m.rows());
    std::vector<double> a(size_t(n) * n), inv(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        inv[size_t(i) * n + i] = 1.0;
        for (int j = 0; j < n; ++j) a[size_t(i) * n + j] = double(m.at(i, j));
    }
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r) {
            if (std::fabs(a[size_t(r) * n + col]) > std::fabs(a[size_t(pivot) * n + col])) pivot = r;
        }
        for (int j = 0; j < n; ++j) {
            std::swap(a[size_t(col) * n + j], a[size_t(pivot) * n + j]);
            std::swap(inv[size_t(col) * n + j], inv[size_t(pivot) * n + j]);
        }
        double d = a[size_t(col) * n + col];
        REQUIRE(std::fabs(d) > 1e-12);
        for (int j = 0; j < n; ++j) {
            a[size_t(col) * n + j] /= d;
            inv[size_t(col) * n + j] /= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a[size_t(r) * n + col];
            for (int j = 0; j < n; ++j) {
                a[size_t(r) * n + j] -= f * a[size_t(col) * n + j];
                inv[size_t(r) * n + j] -= f * inv[size_t(col) * n + j];
            }
        }
    }
    return inv;
}

QParams per_row_params(float step, float zp, int64_t rows) {
    QParams qp;
    qp.step.assign(size_t(rows), step);
    qp.zero_point.assign(size_t(rows), zp);
    return qp;
}

}  // namespace

TEST_CASE("init_lrq starts from a zero scale matrix and reproduces RTN") {
    Rng rng(101);
    Tensor w = rng.normal({6, 5}, 0.0, 1.0);
    Rng init_rng(7);
    LrqParams p = init_lrq(w, 4, 3, init_rng, 0.01f);

    Tensor s = scale_matrix(p);
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s[i] == 0.0f);

    RtnResult rtn = rtn_init_weight(w, 4, Granularity::per_channel);
    CHECK(bit_equal(dequantize_lrq(w, p, 4), rtn.w_hat));

    Rng init_rng2(7);
    LrqParams p2 = init_lrq(w, 4, 3, init_rng2, 0.01f);
    CHECK(bit_equal(p.u2, p2.u2));

    CHECK_THROWS_AS(init_lrq(w, 4, 0, init_rng, 0.01f), config_error);
    CHECK_THROWS_AS(init_lrq(w, 4, 6, init_rng, 0.01f), config_error);  // > min(6,5)
}

TEST_CASE("RTN equivalence at init across seeds and variants") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed * 7919 + 1);
        int64_t rows = 2 + int64_t(rng.next_below(15));
        int64_t cols = 2 + int64_t(rng.next_below(15));
        Tensor w = rng.normal({rows, cols}, 0.0, 1.0);
        int bits = 2 + int(rng.next_below(7));
        Tensor rtn_hat = rtn_init_weight(w, bits, Granularity::per_channel).w_hat;

        Rng init_rng(seed);
        LrqParams p = init_lrq(w, bits, int(std::min(rows, cols)), init_rng, 0.01f);
        CHECK(bit_equal(dequantize_lrq(w, p, bits), rtn_hat));

        FlexParams f = init_flexround(w, bits);
        CHECK(bit_equal(dequantize_flexround(w, f, bits), rtn_hat));
    }
}

TEST_CASE("scale_matrix broadcasting") {
    LrqParams p;
    p.l2 = Tensor({2, 1});
    p.u2 = Tensor({1, 2});
    p.r2 = Tensor({2, 1}, {1, 2});
    p.c2 = Tensor({1, 2}, {10, 20});
    p.rank = 1;
    Tensor s = scale_matrix(p);
    CHECK(s.at(0, 0) == 11);
    CHECK(s.at(0, 1) == 21);
    CHECK(s.at(1, 0) == 12);
    CHECK(s.at(1, 1) == 22);
}

TEST_CASE("scale_matrix matches elementwise double-loop oracle") {
    Rng rng(103);
    LrqParams p;
    p.l2 = random_matrix(rng, 5, 2);
    p.u2 = random_matrix(rng, 2, 7);
    p.r2 = random_matrix(rng, 5, 1);
    p.c2 = random_matrix(rng, 1, 7);
    p.rank = 2;
    Tensor got = scale_matrix(p);
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 7; ++j) {
            double lu = 0.0;
            for (int64_t k = 0; k < 2; ++k) lu += double(p.l2.at(i, k)) * double(p.u2.at(k, j));
            CHECK(got.at(i, j) == float(lu) + p.r2[i] + p.c2[j]);
        }
    }
}

TEST_CASE("dequantize_lrq forced example") {
    Tensor w({1, 1}, {4.0f});
    QParams s1 = per_row_params(1.0f, 0.0f, 1);
    Tensor s({1, 1}, {float(std::log(2.0))});
    Tensor got = dequantize_scaled(w, s1, s, 2);
    CHECK(got[0] == 2.0f);
}

TEST_CASE("dequantize matches scalar-loop oracle exactly") {
    Rng rng(107);
    for (int trial = 0; trial < 20; ++trial) {
        int64_t rows = 2 + int64_t(rng.next_below(6));
        int64_t cols = 2 + int64_t(rng.next_below(6));
        Tensor w = rng.normal({rows, cols}, 0.0, 1.0);
        int bits = 2 + int(rng.next_below(7));
        QParams s1 = rtn_init_weight(w, bits, Granularity::per_channel).qp;
        Tensor s = rng.normal({rows, cols}, 0.0, 0.2);
        CHECK(bit_equal(dequantize_scaled(w, s1, s, bits), dequant_oracle(w, s1, s, bits)));
    }
}

TEST_CASE("flexround with the composed scale equals lrq dequantization") {
    Rng rng(109);
    Tensor w = rng.normal({6, 6}, 0.0, 1.0);
    Rng init_rng(3);
    LrqParams p = init_lrq(w, 4, 2, init_rng, 0.01f);
    p.l2 = rng.normal({6, 2}, 0.0, 0.3);
    p.r2 = rng.normal({6, 1}, 0.0, 0.1);
    p.c2 = rng.normal({1, 6}, 0.0, 0.1);
    FlexParams f{p.s1, scale_matrix(p)};
    CHECK(bit_equal(dequantize_flexround(w, f, 4), dequantize_lrq(w, p, 4)));
}

TEST_CASE("dequantized weights sit on the per-channel grid") {
    Rng rng(131);
    Tensor w = rng.normal({6, 8}, 0.0, 1.0);
    for (int bits : {3, 8}) {
        QParams s1 = rtn_init_weight(w, bits, Granularity::per_channel).qp;
        Tensor s = rng.normal({6, 8}, 0.0, 0.3);
        Tensor w_hat = dequantize_scaled(w, s1, s, bits);
        for (int64_t i = 0; i < 6; ++i) {
            for (int64_t j = 0; j < 8; ++j) {
                double code = double(w_hat.at(i, j)) / double(s1.step[size_t(i)]) + double(s1.zero_point[size_t(i)]);
                CHECK(std::fabs(code - std::round(code)) < 1e-5);
                CHECK(code > -1e-5);
                CHECK(code < double((1 << bits) - 1) + 1e-5);
            }
        }
    }
}

TEST_CASE("positivity: exp of scale never zero, dequantize finite") {
    Rng rng(113);
    Tensor w = rng.normal({4, 4}, 0.0, 1.0);
    QParams s1 = rtn_init_weight(w, 4, Granularity::per_channel).qp;
    Tensor s = rng.normal({4, 4}, 0.0, 5.0);
    Tensor es = exp_elem(s);
    for (int64_t i = 0; i < es.numel(); ++i) CHECK(es[i] > 0.0f);
    CHECK(dequantize_scaled(w, s1, s, 4).all_finite());
}

TEST_CASE("rank ceiling reaches any full scale matrix") {
    Rng rng(127);
    const int64_t n = 8;
    Tensor w = rng.normal({n, n}, 0.0, 1.0);
    Tensor target_s2 = rng.normal({n, n}, 0.0, 0.3);
    QParams s1 = rtn_init_weight(w, 4, Granularity::per_channel).qp;

    Tensor u2 = rng.normal({n, n}, 0.0, 1.0);  // full rank w.h.p.
    std::vector<double> u2_inv = invert(u2);
    LrqParams p;
    p.rank = int(n);
    p.s1 = s1;
    p.u2 = u2;
    p.r2 = Tensor({n, 1});
    p.c2 = Tensor({1, n});
    p.l2 = Tensor({n, n});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < n; ++k) acc += double(target_s2.at(i, k)) * u2_inv[size_t(k) * n + j];
            p.l2.at(i, j) = float(acc);
        }
    }

    Tensor via_lrq = dequantize_lrq(w, p, 4);
    Tensor via_flex = dequantize_flexround(w, FlexParams{s1, target_s2}, 4);
    CHECK(testutil::max_abs_diff(via_lrq, via_flex) < 1e-4);
}

TEST_CASE("learnable_param_ratio reproduces the published table") {
    auto pct = [](std::vector<LayerDims> dims, int64_t rank) { return learnable_param_ratio(dims, rank).l2u2_percent; };
    CHECK(pct({{4096, 4096, 4}, {4096, 11008, 3}}, 1024) == doctest::Approx(39.51).epsilon(0.000127));
    CHECK(pct({{5120, 5120, 4}, {5120, 13824, 3}}, 1024) == doctest::Approx(31.57).epsilon(0.000159));
    CHECK(pct({{6656, 6656, 4}, {6656, 17920, 3}}, 2048) == doctest::Approx(48.60).epsilon(0.000103));
    CHECK(pct({{8192, 8192, 4}, {8192, 22016, 3}}, 2048) == doctest::Approx(39.51).epsilon(0.000127));

    CHECK(pct({{64, 64, 7}}, 0) == 0.0);
    RatioResult r = learnable_param_ratio({{64, 64, 1}}, 8);
    CHECK(r.full_count == 64 * 8 + 8 * 64 + 2 * 64 + 64);
    CHECK_THROWS_AS(learnable_param_ratio({{0, 4, 1}}, 2), config_error);
}
