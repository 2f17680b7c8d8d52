#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "codl/errors.hpp"
#include "codl/rng.hpp"

namespace codl {

using Scalar = double;

// Dense row-major tensor of doubles. All shapes in this codebase are small
// enough that plain owned storage is fine; views are not needed.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<Scalar> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        CODL_CHECK(static_cast<int64_t>(data_.size()) == numel_of(shape_), ShapeError,
                   "tensor data size does not match shape");
    }

    static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, Scalar v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, Scalar stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = stddev * rng.normal();
        return t;
    }

    static Tensor rand_uniform(std::vector<int> shape, Rng& rng, Scalar lo, Scalar hi) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = rng.uniform(lo, hi);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    std::vector<Scalar>& vec() { return data_; }
    const std::vector<Scalar>& vec() const { return data_; }

    Scalar& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    Scalar operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Indexing helpers for the common ranks.
    Scalar& at2(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    Scalar at2(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    Scalar& at3(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    Scalar at3(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    Scalar& at4(int i, int j, int k, int l) {
        return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    Scalar at4(int i, int j, int k, int l) const {
        return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    Tensor reshaped(std::vector<int> new_shape) const {
        CODL_CHECK(numel_of(new_shape) == numel(), ShapeError, "reshape changes element count");
        return Tensor(std::move(new_shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (Scalar v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Scalar max_abs() const {
        Scalar m = 0.0;
        for (Scalar v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            CODL_CHECK(d >= 0, ShapeError, "negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<Scalar> data_;
};

inline Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    CODL_CHECK(a.same_shape(b), ShapeError, "max_abs_diff: shape mismatch");
    Scalar m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace codl
