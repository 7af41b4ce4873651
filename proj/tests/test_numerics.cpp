#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kpdet/autograd.hpp"
#include "kpdet/grad_check.hpp"
#include "kpdet/tensor.hpp"
#include "test_util.hpp"

using namespace kpdet;
using testutil::check_grad;
using testutil::max_abs_diff;
using testutil::projection_weights;
using testutil::project_to_scalar;
using testutil::random_tensor;

TEST_CASE("tensor constructor enforces shape/data agreement") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DimensionError);
    Tensor t({2, 2}, {1, 2, 3, 4});
    CHECK(t.size() == 4);
    CHECK(t.at(1, 0) == 3.0);
}

TEST_CASE("require_finite flags NaN and Inf") {
    Tensor t({2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(t.require_finite("t"), NumericError);
    Tensor ok({2}, {1.0, 2.0});
    CHECK_NOTHROW(ok.require_finite("ok"));
}

TEST_CASE("matmul identity cases") {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor i2 = Tensor::identity(2);
    const Tensor left = matmul(i2, a);
    const Tensor right = matmul(a, i2);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(left[k] == a[k]);
        CHECK(right[k] == a[k]);
    }
}

TEST_CASE("matmul 1x2 by 2x1 analytic") {
    const Tensor a({1, 2}, {1, 2});
    const Tensor b({2, 1}, {3, 4});
    const Tensor c = matmul(a, b);
    CHECK(c.size() == 1);
    CHECK(c[0] == 11.0);
}

TEST_CASE("matmul random vs triple-loop oracle") {
    Rng rng(11);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 2}, rng);
    const Tensor got = matmul(a, b);
    const Tensor want = testutil::matmul_oracle(a, b);
    CHECK(max_abs_diff(got, want) == 0.0);  // same additions in the same order
}

TEST_CASE("matmul shape mismatch throws") {
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 2})), DimensionError);
}

TEST_CASE("softmax uniform input") {
    const Tensor y = softmax(Tensor({3}), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax is stabilized against overflow") {
    const Tensor y = softmax(Tensor({2}, {1000.0, 0.0}), 0);
    CHECK(y.all_finite());
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax output is a probability vector") {
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        const Tensor x = random_tensor({17}, rng, 3.0);
        const Tensor y = softmax(x, 0);
        double sum = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            CHECK(y[i] >= 0.0);
            sum += y[i];
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax across a middle axis") {
    Rng rng(6);
    const Tensor x = random_tensor({2, 3, 4}, rng);
    const Tensor y = softmax(x, 1);
    for (std::size_t o = 0; o < 2; ++o) {
        for (std::size_t in = 0; in < 4; ++in) {
            double sum = 0.0;
            for (std::size_t i = 0; i < 3; ++i) sum += y.at(o, i, in);
            CHECK(std::fabs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("grad_check on sum of squares") {
    auto f = [](const Tensor& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * x[i];
        return s;
    };
    auto g = [](const Tensor& x) {
        Tensor out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = 2.0 * x[i];
        return out;
    };
    const Tensor x({2}, {1.0, 2.0});
    const Tensor analytic = g(x);
    CHECK(analytic[0] == 2.0);
    CHECK(analytic[1] == 4.0);
    const auto rep = grad_check(f, g, x, 1e-5, 1e-6);
    CHECK(rep.pass);
}

TEST_CASE("grad_check on a constant function") {
    auto f = [](const Tensor&) { return 3.5; };
    auto g = [](const Tensor& x) { return Tensor::zeros(x.shape()); };
    const auto rep = grad_check(f, g, Tensor({3}, {1, 2, 3}), 1e-5, 1e-12);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err == 0.0);
}

TEST_CASE("grad_check rejects non-positive eps and non-finite objectives") {
    auto f = [](const Tensor&) { return 1.0; };
    auto g = [](const Tensor& x) { return Tensor::zeros(x.shape()); };
    CHECK_THROWS_AS(grad_check(f, g, Tensor({1}), 0.0, 1e-4), ParameterError);
    auto bad = [](const Tensor&) { return std::nan(""); };
    CHECK_THROWS_AS(grad_check(bad, g, Tensor({1}), 1e-5, 1e-4), NumericError);
}

TEST_CASE("tensor serialization round-trips exactly") {
    Rng rng(7);
    for (const auto& shape :
         std::vector<std::vector<std::size_t>>{{1}, {5}, {3, 4}, {2, 3, 4}, {1, 1, 1, 1}}) {
        const Tensor t = random_tensor(shape, rng, 100.0);
        std::ostringstream os(std::ios::binary);
        write_tensor(os, t);
        std::istringstream is(os.str(), std::ios::binary);
        const Tensor back = read_tensor(is);
        REQUIRE(back.shape() == t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
    }
}

TEST_CASE("tensor serialization layout is rank/extents/payload") {
    const Tensor t({1, 2}, {1.0, 2.0});
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    const std::string bytes = os.str();
    CHECK(bytes.size() == 4 + 2 * 8 + 2 * 8);
    CHECK(static_cast<unsigned char>(bytes[0]) == 2);  // rank, little-endian
    std::istringstream truncated(bytes.substr(0, bytes.size() - 3), std::ios::binary);
    CHECK_THROWS_AS(read_tensor(truncated), IoError);
}

// ----- gradient checks for every tape op -----

TEST_CASE("tape: matmul gradients (both operands)") {
    Rng rng(21);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 2}, rng);
    const Tensor w = projection_weights({3, 2}, 99);
    CHECK(check_grad(a, [&](ag::Var v) {
              return project_to_scalar(ag::matmul(v, ag::constant(b)), w);
          }).pass);
    CHECK(check_grad(b, [&](ag::Var v) {
              return project_to_scalar(ag::matmul(ag::constant(a), v), w);
          }).pass);
}

TEST_CASE("tape: matmul_nt and transpose gradients") {
    Rng rng(22);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({5, 4}, rng);
    const Tensor w = projection_weights({3, 5}, 98);
    CHECK(check_grad(a, [&](ag::Var v) {
              return project_to_scalar(ag::matmul_nt(v, ag::constant(b)), w);
          }).pass);
    CHECK(check_grad(b, [&](ag::Var v) {
              return project_to_scalar(ag::matmul_nt(ag::constant(a), v), w);
          }).pass);
    const Tensor wt = projection_weights({4, 3}, 97);
    CHECK(check_grad(a, [&](ag::Var v) {
              return project_to_scalar(ag::transpose(v), wt);
          }).pass);
}

TEST_CASE("tape: elementwise op gradients") {
    Rng rng(23);
    const Tensor x = random_tensor({4, 3}, rng);
    const Tensor other = random_tensor({4, 3}, rng);
    const Tensor w = projection_weights({4, 3}, 96);
    using UnaryFn = ag::Var (*)(const ag::Var&);
    const UnaryFn unary_cases[] = {
        [](const ag::Var& v) { return ag::square(v); },
        [](const ag::Var& v) { return ag::softplus(v); },
        [](const ag::Var& v) { return ag::sigmoid(v); },
        [](const ag::Var& v) { return ag::silu(v); },
        [](const ag::Var& v) { return ag::vexp(v); },
        [](const ag::Var& v) { return ag::neg(v); },
        [](const ag::Var& v) { return ag::scale(v, 2.5); },
        [](const ag::Var& v) { return ag::add_scalar(v, 0.7); },
    };
    for (auto fn : unary_cases) {
        CHECK(check_grad(x, [&](ag::Var v) { return project_to_scalar(fn(v), w); }).pass);
    }
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::add(v, ag::constant(other)), w);
          }).pass);
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::sub(ag::constant(other), v), w);
          }).pass);
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::mul(v, ag::constant(other)), w);
          }).pass);
}

TEST_CASE("tape: vlog, vabs and vdiv gradients away from kinks") {
    Rng rng(24);
    const Tensor pos = testutil::random_uniform_tensor({3, 3}, rng, 0.5, 2.0);
    const Tensor x = testutil::random_uniform_tensor({3, 3}, rng, 0.2, 1.5);
    const Tensor w = projection_weights({3, 3}, 95);
    CHECK(check_grad(pos, [&](ag::Var v) { return project_to_scalar(ag::vlog(v), w); }).pass);
    CHECK(check_grad(x, [&](ag::Var v) { return project_to_scalar(ag::vabs(v), w); }).pass);
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::vdiv(v, ag::constant(pos)), w);
          }).pass);
    CHECK(check_grad(pos, [&](ag::Var v) {
              return project_to_scalar(ag::vdiv(ag::constant(x), v), w);
          }).pass);
}

TEST_CASE("tape: softmax_rows gradient") {
    Rng rng(25);
    const Tensor x = random_tensor({3, 5}, rng, 2.0);
    const Tensor w = projection_weights({3, 5}, 94);
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::softmax_rows(v), w);
          }).pass);
}

TEST_CASE("tape: bias, norm and reduction gradients") {
    Rng rng(26);
    const Tensor x = random_tensor({4, 6}, rng);
    const Tensor bias = random_tensor({6}, rng);
    const Tensor gain = testutil::random_uniform_tensor({6}, rng, 0.5, 1.5);
    const Tensor w = projection_weights({4, 6}, 93);
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::add_row_bias(v, ag::constant(bias)), w);
          }).pass);
    CHECK(check_grad(bias, [&](ag::Var v) {
              return project_to_scalar(ag::add_row_bias(ag::constant(x), v), w);
          }).pass);
    CHECK(check_grad(x, [&](ag::Var v) {
              return project_to_scalar(ag::rms_norm_rows(v, ag::constant(gain)), w);
          }).pass);
    CHECK(check_grad(gain, [&](ag::Var v) {
              return project_to_scalar(ag::rms_norm_rows(ag::constant(x), v), w);
          }).pass);
    CHECK(check_grad(x, [&](ag::Var v) { return ag::sum_all(v); }).pass);
    CHECK(check_grad(x, [&](ag::Var v) { return ag::mean_all(ag::square(v)); }).pass);
}

TEST_CASE("tape: shape op gradients") {
    Rng rng(27);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({2, 4}, rng);
    const Tensor c = random_tensor({3, 2}, rng);
    CHECK(check_grad(a, [&](ag::Var v) {
              const Tensor w = projection_weights({5, 4}, 92);
              return project_to_scalar(ag::concat_rows({v, ag::constant(b)}), w);
          }).pass);
    CHECK(check_grad(a, [&](ag::Var v) {
              const Tensor w = projection_weights({3, 6}, 91);
              return project_to_scalar(ag::concat_cols(v, ag::constant(c)), w);
          }).pass);
    CHECK(check_grad(a, [&](ag::Var v) {
              const Tensor w = projection_weights({2, 4}, 90);
              return project_to_scalar(ag::slice_rows(v, 1, 2), w);
          }).pass);
    CHECK(check_grad(a, [&](ag::Var v) {
              const Tensor w = projection_weights({3, 2}, 89);
              return project_to_scalar(ag::slice_cols(v, 1, 2), w);
          }).pass);
    CHECK(check_grad(a, [&](ag::Var v) {
              const Tensor w = projection_weights({5, 4}, 88);
              // repeated row exercises gradient accumulation in the scatter
              return project_to_scalar(ag::gather_rows(v, {0, 2, 1, 2, 0}), w);
          }).pass);
    CHECK(check_grad(a, [&](ag::Var v) {
              const Tensor w = projection_weights({12}, 87);
              return project_to_scalar(ag::reshape(v, {12}), w);
          }).pass);
}

TEST_CASE("tape: cross_entropy_rows gradient and value") {
    Rng rng(28);
    const Tensor logits = random_tensor({4, 3}, rng, 2.0);
    const std::vector<int> targets{0, 2, 1, 2};
    ag::Var l = ag::constant(logits);
    const ag::Var ce = ag::cross_entropy_rows(l, targets);
    // reference: mean -log softmax[target]
    double want = 0.0;
    const Tensor probs = softmax(logits, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        want -= std::log(probs.at(i, static_cast<std::size_t>(targets[i])));
    }
    want /= 4.0;
    CHECK(ce->value[0] == doctest::Approx(want).epsilon(1e-12));
    CHECK(check_grad(logits, [&](ag::Var v) {
              return ag::cross_entropy_rows(v, targets);
          }).pass);
    CHECK_THROWS_AS(ag::cross_entropy_rows(l, std::vector<int>{0, 1, 2, 3}), ParameterError);
}

TEST_CASE("backward accumulates through shared subexpressions") {
    // y = x*x + x  ->  dy/dx = 2x + 1
    const Tensor x0({1}, {3.0});
    ag::Var x = ag::leaf(x0);
    ag::Var y = ag::add(ag::mul(x, x), x);
    ag::backward(y);
    CHECK(x->grad[0] == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("no-grad mode skips graph recording") {
    ag::Var x = ag::leaf(Tensor({1}, {2.0}));
    ag::NoGradGuard ng;
    ag::Var y = ag::mul(x, x);
    CHECK(y->parents.empty());
    CHECK_FALSE(y->requires_grad);
}
