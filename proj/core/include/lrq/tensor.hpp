#pragma once

#include <cstdint>
#include <vector>

#include "lrq/errors.hpp"

namespace lrq {

// Dense row-major float32 tensor. Immutable-by-convention value type:
// operations return fresh tensors, reductions and matmul accumulate in
// double before narrowing back to float.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<float> data);

    static Tensor full(std::vector<int64_t> shape, float value);

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    // 2-D accessors.
    int64_t rows() const { return shape_[0]; }
    int64_t cols() const { return shape_[1]; }
    float& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    float at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

// Number of worker threads for row-parallel loops. Reads LRQ_THREADS once
// (default 1, the bit-deterministic test mode). Row splitting never changes
// per-element arithmetic, so results are identical for any thread count.
int thread_count();

// c[i,j] = sum_k a[i,k] * b[k,j], accumulated in double.
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x k] * b[n x k]^T -> [m x n]; row-major friendly form used by layers.
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// a[k x m]^T * b[k x n] -> [m x n]; used by gradient accumulation.
Tensor matmul_at(const Tensor& a, const Tensor& b);

// out[i,j] = m[i,j] + r[i,0] + c[0,j]
Tensor broadcast_add_rc(const Tensor& m, const Tensor& r, const Tensor& c);

// sqrt(mean((a-b)^2)) accumulated in double.
double rmse(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, float s);
Tensor exp_elem(const Tensor& a);
Tensor transpose(const Tensor& a);

}  // namespace lrq
