#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "kpdet/errors.hpp"

namespace kpdet {

/// Dense n-dimensional array of 64-bit floats, row-major.
/// Tensors are plain values: every operation returns a fresh tensor and
/// existing ones are never mutated in place (safe to share across threads).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D / 3-D accessors; bounds are the caller's responsibility.
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool all_finite() const;
    /// Throws NumericError naming `what` if any element is NaN/Inf.
    void require_finite(const char* what) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_size(const std::vector<std::size_t>& shape);

/// Standard matrix product a[m,k] * b[k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Gradients of matmul: ga += gout * b^T, gb += a^T * gout.
void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& gout,
                     Tensor& ga, Tensor& gb);

/// Softmax along `axis`, stabilized by max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Gradient of softmax given its output y and upstream gout.
Tensor softmax_backward(const Tensor& y, const Tensor& gout, std::size_t axis);

/// Little-endian binary layout: u32 rank, u64 extents, f64 payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace kpdet
