#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

// Dense double-precision tensor, row-major in the last dimension.
// Feature maps are stored [C, H, W]; matrices [rows, cols]; vectors [n].
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> dims, double fill = 0.0) : dims_(std::move(dims)) {
        std::int64_t n = 1;
        for (int d : dims_) {
            if (d <= 0) throw DimensionError("tensor dims must be positive");
            n *= d;
        }
        data_.assign(static_cast<std::size_t>(n), fill);
    }

    static Tensor scalar(double v) {
        Tensor t(std::vector<int>{1});
        t.data_[0] = v;
        return t;
    }

    int rank() const { return static_cast<int>(dims_.size()); }
    int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
    const std::vector<int>& dims() const { return dims_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // rank-3 [C,H,W] accessors
    double& at(int c, int y, int x) {
        return data_[static_cast<std::size_t>((static_cast<std::int64_t>(c) * dims_[1] + y) * dims_[2] + x)];
    }
    double at(int c, int y, int x) const {
        return data_[static_cast<std::size_t>((static_cast<std::int64_t>(c) * dims_[1] + y) * dims_[2] + x)];
    }
    // rank-2 [rows,cols]
    double& at(int i, int j) { return data_[static_cast<std::size_t>(static_cast<std::int64_t>(i) * dims_[1] + j)]; }
    double at(int i, int j) const { return data_[static_cast<std::size_t>(static_cast<std::int64_t>(i) * dims_[1] + j)]; }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(dims_[i]);
        }
        return s + "]";
    }

    bool operator==(const Tensor& o) const { return dims_ == o.dims_ && data_ == o.data_; }

private:
    std::vector<int> dims_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace sgdfuse
