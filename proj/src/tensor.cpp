#include "kpdet/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

namespace kpdet {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
        throw DimensionError("tensor data length does not match shape product");
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw DimensionError("axis out of range");
    return shape_[axis];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::require_finite(const char* what) const {
    if (!all_finite()) {
        throw NumericError(std::string("non-finite values in ") + what);
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 tensors");
    const std::size_t m = a.extent(0), k = a.extent(1);
    if (b.extent(0) != k) throw DimensionError("matmul inner dimensions disagree");
    const std::size_t n = b.extent(1);
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            if (aik == 0.0) continue;
            const double* brow = pb + kk * n;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& gout,
                     Tensor& ga, Tensor& gb) {
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (gout.extent(0) != m || gout.extent(1) != n) {
        throw DimensionError("matmul_backward gradient shape mismatch");
    }
    if (!ga.same_shape(a)) ga = Tensor::zeros(a.shape());
    if (!gb.same_shape(b)) gb = Tensor::zeros(b.shape());
    // ga = gout * b^T
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double g = gout.at(i, j);
            if (g == 0.0) continue;
            for (std::size_t kk = 0; kk < k; ++kk) ga.at(i, kk) += g * b.at(kk, j);
        }
    }
    // gb = a^T * gout
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a.at(i, kk);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb.at(kk, j) += av * gout.at(i, j);
        }
    }
}

namespace {

// Iterates the tensor as [outer, axis_len, inner].
struct AxisView {
    std::size_t outer, len, inner;
};

AxisView axis_view(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax axis out of range");
    AxisView v{1, x.shape()[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) v.outer *= x.shape()[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) v.inner *= x.shape()[i];
    return v;
}

} // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisView v = axis_view(x, axis);
    Tensor y(x.shape());
    const double* px = x.data();
    double* py = y.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < v.len; ++i) mx = std::max(mx, px[base + i * v.inner]);
            double sum = 0.0;
            for (std::size_t i = 0; i < v.len; ++i) {
                const double e = std::exp(px[base + i * v.inner] - mx);
                py[base + i * v.inner] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t i = 0; i < v.len; ++i) py[base + i * v.inner] *= inv;
        }
    }
    return y;
}

Tensor softmax_backward(const Tensor& y, const Tensor& gout, std::size_t axis) {
    if (!y.same_shape(gout)) throw DimensionError("softmax_backward shape mismatch");
    const AxisView v = axis_view(y, axis);
    Tensor gx(y.shape());
    const double* py = y.data();
    const double* pg = gout.data();
    double* px = gx.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double dot = 0.0;
            for (std::size_t i = 0; i < v.len; ++i) {
                dot += py[base + i * v.inner] * pg[base + i * v.inner];
            }
            for (std::size_t i = 0; i < v.len; ++i) {
                const std::size_t at = base + i * v.inner;
                px[at] = py[at] * (pg[at] - dot);
            }
        }
    }
    return gx;
}

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("truncated tensor stream");
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) write_le<std::uint64_t>(os, static_cast<std::uint64_t>(e));
    for (std::size_t i = 0; i < t.size(); ++i) write_le<double>(os, t[i]);
}

Tensor read_tensor(std::istream& is) {
    const auto rank = read_le<std::uint32_t>(is);
    if (rank > 8) throw IoError("tensor rank implausibly large; corrupt stream");
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(read_le<std::uint64_t>(is));
    const std::size_t n = shape_size(shape);
    if (n > (std::size_t{1} << 30)) throw IoError("tensor size implausibly large; corrupt stream");
    std::vector<double> data(n);
    for (auto& v : data) v = read_le<double>(is);
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tensor(os, t);
    if (!os) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    return read_tensor(is);
}

} // namespace kpdet
