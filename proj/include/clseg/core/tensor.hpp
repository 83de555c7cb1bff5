#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "clseg/core/error.hpp"

namespace clseg {

/// Dense row-major n-d array. The scalar type is a template parameter so the
/// same code path can run in float for training and double for
/// finite-difference checks.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(compute_numel(shape_), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        CLSEG_CHECK(data_.size() == compute_numel(shape_), ErrorCode::ShapeMismatch,
                    "tensor data size does not match shape");
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(size_t i) const { return shape_[i]; }
    size_t ndim() const { return shape_.size(); }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        CLSEG_CHECK(compute_numel(shape) == numel(), ErrorCode::ShapeMismatch, "reshape changes element count");
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min_value() const { return data_.empty() ? T(0) : *std::min_element(data_.begin(), data_.end()); }
    T max_value() const { return data_.empty() ? T(0) : *std::max_element(data_.begin(), data_.end()); }

    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

    static size_t compute_numel(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            CLSEG_CHECK(d >= 0, ErrorCode::ShapeMismatch, "negative dimension");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<EigenRowMat<T>> as_matrix(Tensor<T>& t, int rows, int cols) {
    return Eigen::Map<EigenRowMat<T>>(t.data(), rows, cols);
}

template <typename T>
Eigen::Map<const EigenRowMat<T>> as_matrix(const Tensor<T>& t, int rows, int cols) {
    return Eigen::Map<const EigenRowMat<T>>(t.data(), rows, cols);
}

/// C[m,n] = A[m,k] * B[k,n], optionally transposing either input view.
template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool trans_a = false, bool trans_b = false) {
    using Map = Eigen::Map<const EigenRowMat<T>>;
    Eigen::Map<EigenRowMat<T>> cm(c, m, n);
    if (!trans_a && !trans_b)
        cm.noalias() = Map(a, m, k) * Map(b, k, n);
    else if (trans_a && !trans_b)
        cm.noalias() = Map(a, k, m).transpose() * Map(b, k, n);
    else if (!trans_a && trans_b)
        cm.noalias() = Map(a, m, k) * Map(b, n, k).transpose();
    else
        cm.noalias() = Map(a, k, m).transpose() * Map(b, n, k).transpose();
}

/// Same as gemm but accumulates into C.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n, bool trans_a = false, bool trans_b = false) {
    using Map = Eigen::Map<const EigenRowMat<T>>;
    Eigen::Map<EigenRowMat<T>> cm(c, m, n);
    if (!trans_a && !trans_b)
        cm.noalias() += Map(a, m, k) * Map(b, k, n);
    else if (trans_a && !trans_b)
        cm.noalias() += Map(a, k, m).transpose() * Map(b, k, n);
    else if (!trans_a && trans_b)
        cm.noalias() += Map(a, m, k) * Map(b, n, k).transpose();
    else
        cm.noalias() += Map(a, k, m).transpose() * Map(b, n, k).transpose();
}

}  // namespace clseg
