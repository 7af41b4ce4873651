#pragma once

#include "kpdet/autograd.hpp"
#include "kpdet/tensor.hpp"

namespace kpdet::ssm {

/// Continuous-time state-space parameters.
///
///   x_{t+1} = A x_t + B u_t + w_t
///   y_t     = C x_t + D u_t + v_t
///
/// A, B, C, D define the dynamics and observation model; the step size
/// `delta` sets the zero-order-hold resolution. The process/observation
/// noise terms w_t, v_t (covariance Q) are carried by the equations above
/// for documentation but are fixed to zero here: the backbone is
/// deterministic.
struct SsmParams {
    Tensor A;     // [n,n], or [n] when diagonal_a
    bool diagonal_a = true;
    Tensor B;     // [n, d_in]
    Tensor C;     // [d_out, n]
    Tensor D;     // [d_out, d_in]
    double delta = 1.0;
};

struct DiscreteSsm {
    Tensor A_bar;  // exp(delta*A); [n,n] or [n]
    bool diagonal_a = true;
    Tensor B_bar;  // (delta*A)^-1 (exp(delta*A) - I) delta*B
    Tensor C;
    Tensor D;
};

/// Matrix exponential by scaling-and-squaring with a Taylor series.
Tensor expm(const Tensor& m);
/// phi1(M) = sum_k M^k/(k+1)!, so that B_bar = phi1(delta*A) * delta*B.
Tensor phi1m(const Tensor& m);

/// Zero-order-hold discretization. Uses elementwise exponentials for
/// diagonal A and the matrix exponential otherwise; falls back to the
/// analytic limit B_bar = delta*B when ||delta*A|| < 1e-8.
DiscreteSsm discretize_zoh(const SsmParams& p);

/// Sequential evaluation: y_t = C x_t + D u_t with x_{t+1} = A_bar x_t + B_bar u_t.
/// O(T) time, O(d_state) working state. x0 defaults to zeros.
Tensor scan_recurrent(const DiscreteSsm& d, const Tensor& u, const Tensor* x0 = nullptr);

/// Same map evaluated through an associative prefix scan over
/// (multiplier, accumulated input) pairs; requires x0 = 0.
Tensor scan_parallel(const DiscreteSsm& d, const Tensor& u);

struct ScanGrads {
    Tensor a_bar, b_bar, c, d;
    Tensor u;
    Tensor x0;
};

/// Adjoint of the linear recurrence: gradients of sum(gy .* y) with respect
/// to the discretized parameters, the input sequence, and x0.
ScanGrads scan_backward(const DiscreteSsm& d, const Tensor& u, const Tensor* x0,
                        const Tensor& gy);

enum class ScanMode { Recurrent, ChunkedParallel };

/// Selective scan over independent channels (diagonal A), with
/// per-timestep step size and input/output projections:
///
///   h[t,ch,s] = exp(dt[t,ch] a[s]) h[t-1,ch,s] + phi(dt[t,ch], a[s]) B[t,s] u[t,ch]
///   y[t,ch]   = sum_s C[t,s] h[t,ch,s] + D[ch] u[t,ch]
///
/// where phi(d, a) = (exp(d a) - 1)/a (ZOH input coefficient). Both modes
/// compute the identical map; ChunkedParallel uses a two-phase prefix scan
/// (per-chunk local scans, then carry propagation).
///
/// Shapes: u [T,ch], dt [T,ch], b [T,n], c [T,n], a [n], d [ch] -> y [T,ch].
ag::Var selective_scan(const ag::Var& u, const ag::Var& dt, const ag::Var& b,
                       const ag::Var& c, const ag::Var& a, const ag::Var& d,
                       ScanMode mode);

} // namespace kpdet::ssm
