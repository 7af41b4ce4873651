#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kpdet/tensor.hpp"

namespace kpdet::ag {

struct Node;
using Var = std::shared_ptr<Node>;

/// One recorded operation: its output value and the backward rule that
/// pushes this node's gradient into its parents. Reverse-mode gradients are
/// per-operation forward/backward pairs; `backward()` replays them in
/// reverse topological order.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_op;

    Tensor& ensure_grad() {
        if (!grad.same_shape(value)) grad = Tensor::zeros(value.shape());
        return grad;
    }
    void add_grad(const Tensor& g) {
        Tensor& acc = ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
};

/// Trainable parameter; participates in gradient accumulation.
Var leaf(Tensor value);
/// Fixed input; no gradient is tracked through it.
Var constant(Tensor value);
/// Register a custom op node. `backward` may be empty when no parent needs grads.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// While alive, newly built nodes record neither parents nor backward rules.
/// Inference paths use this so prediction stays cheap and reentrant.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

/// Reverse accumulation from a scalar root, seeding d(root)/d(root) = seed.
void backward(const Var& root, double seed = 1.0);

// ----- elementwise -----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var vdiv(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var square(const Var& a);
Var vabs(const Var& a);
Var vexp(const Var& a);
Var vlog(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);

// ----- linear algebra -----
Var matmul(const Var& a, const Var& b);
/// a[m,k] * b[n,k]^T -> [m,n]
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_row_bias(const Var& x, const Var& b);
Var linear(const Var& x, const Var& w, const Var& b);

// ----- reductions / shape -----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const Var& a, const Var& b);
Var slice_rows(const Var& a, std::size_t start, std::size_t len);
Var slice_cols(const Var& a, std::size_t start, std::size_t len);
Var gather_rows(const Var& a, std::vector<std::size_t> indices);

// ----- rows = tokens -----
Var softmax_rows(const Var& a);
Var rms_norm_rows(const Var& x, const Var& gain, double eps = 1e-6);
/// Mean over rows of -log p(target_i); logits [m, C].
Var cross_entropy_rows(const Var& logits, std::vector<int> targets);

} // namespace kpdet::ag
