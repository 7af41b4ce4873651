#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "kpdet/autograd.hpp"
#include "kpdet/grad_check.hpp"
#include "kpdet/rng.hpp"
#include "kpdet/tensor.hpp"

namespace kpdet::testutil {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
    return t;
}

inline Tensor random_uniform_tensor(std::vector<std::size_t> shape, Rng& rng, double lo,
                                    double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// Independent triple-loop matrix product.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) s += a.at(i, kk) * b.at(kk, j);
            c.at(i, j) = s;
        }
    }
    return c;
}

/// Fixed random projection to a scalar so every output element participates
/// in a gradient check.
inline Tensor projection_weights(const std::vector<std::size_t>& shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor w(shape);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    return w;
}

inline ag::Var project_to_scalar(const ag::Var& y, const Tensor& w) {
    return ag::sum_all(ag::mul(y, ag::constant(w)));
}

/// Finite-difference check of d(scalar)/d(param) for a graph builder
/// `build : Var(param) -> Var(scalar)`.
template <typename BuildFn>
GradCheckReport check_grad(const Tensor& init, BuildFn build, double eps = 1e-5,
                           double tol = 1e-4) {
    auto f = [&build](const Tensor& p) {
        ag::Var x = ag::leaf(p);
        return build(x)->value[0];
    };
    auto grad_f = [&build](const Tensor& p) {
        ag::Var x = ag::leaf(p);
        ag::Var y = build(x);
        ag::backward(y);
        return x->grad.same_shape(p) ? x->grad : Tensor::zeros(p.shape());
    };
    return grad_check(f, grad_f, init, eps, tol);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace kpdet::testutil
