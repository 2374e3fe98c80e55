#include "lrq/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>
#include <utility>

namespace lrq {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw dimension_error("negative dimension in shape");
        n *= d;
    }
    return n;
}

void require_matrix(const Tensor& t, const char* name) {
    if (t.rank() != 2) throw dimension_error(std::string(name) + ": expected a 2-D tensor");
}

template <typename Fn>
void parallel_rows(int64_t rows, Fn&& fn) {
    int nt = thread_count();
    if (nt <= 1 || rows < 2 * nt) {
        fn(0, rows);
        return;
    }
    if (nt > rows) nt = static_cast<int>(rows);
    int64_t chunk = rows / nt;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(nt - 1));
    for (int t = 0; t < nt - 1; ++t) {
        workers.emplace_back(fn, t * chunk, (t + 1) * chunk);
    }
    fn((nt - 1) * chunk, rows);
    for (auto& w : workers) w.join();
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0f) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw dimension_error("tensor data size does not match shape");
    }
}

Tensor Tensor::full(std::vector<int64_t> shape, float value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

int thread_count() {
    static int n = [] {
        const char* env = std::getenv("LRQ_THREADS");
        if (env == nullptr) return 1;
        int v = std::atoi(env);
        return v < 1 ? 1 : v;
    }();
    return n;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) throw dimension_error("matmul: inner dimensions disagree");
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    parallel_rows(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) {
                    acc += static_cast<double>(a.at(i, p)) * static_cast<double>(b.at(p, j));
                }
                c.at(i, j) = static_cast<float>(acc);
            }
        }
    });
    return c;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_bt");
    require_matrix(b, "matmul_bt");
    if (a.cols() != b.cols()) throw dimension_error("matmul_bt: inner dimensions disagree");
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c({m, n});
    parallel_rows(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float* arow = a.data() + i * k;
            for (int64_t j = 0; j < n; ++j) {
                const float* brow = b.data() + j * k;
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) {
                    acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
                }
                c.at(i, j) = static_cast<float>(acc);
            }
        }
    });
    return c;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_at");
    require_matrix(b, "matmul_at");
    if (a.rows() != b.rows()) throw dimension_error("matmul_at: inner dimensions disagree");
    const int64_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor c({m, n});
    parallel_rows(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) {
                    acc += static_cast<double>(a.at(p, i)) * static_cast<double>(b.at(p, j));
                }
                c.at(i, j) = static_cast<float>(acc);
            }
        }
    });
    return c;
}

Tensor broadcast_add_rc(const Tensor& m, const Tensor& r, const Tensor& c) {
    require_matrix(m, "broadcast_add_rc");
    if (r.rank() != 2 || r.rows() != m.rows() || r.cols() != 1) {
        throw dimension_error("broadcast_add_rc: row vector must be [rows x 1]");
    }
    if (c.rank() != 2 || c.rows() != 1 || c.cols() != m.cols()) {
        throw dimension_error("broadcast_add_rc: column vector must be [1 x cols]");
    }
    Tensor out({m.rows(), m.cols()});
    for (int64_t i = 0; i < m.rows(); ++i) {
        const float ri = r[i];
        for (int64_t j = 0; j < m.cols(); ++j) {
            out.at(i, j) = m.at(i, j) + ri + c[j];
        }
    }
    return out;
}

double rmse(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dimension_error("rmse: shapes differ");
    double acc = 0.0;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return n == 0 ? 0.0 : std::sqrt(acc / static_cast<double>(n));
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dimension_error("add: shapes differ");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dimension_error("sub: shapes differ");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dimension_error("hadamard: shapes differ");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scaled(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor exp_elem(const Tensor& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a[i]);
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    Tensor out({a.cols(), a.rows()});
    for (int64_t i = 0; i < a.rows(); ++i) {
        for (int64_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    }
    return out;
}

}  // namespace lrq
