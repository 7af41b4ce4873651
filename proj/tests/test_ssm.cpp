#include <doctest.h>

#include <cmath>

#include "kpdet/backbone.hpp"
#include "kpdet/ssm.hpp"
#include "test_util.hpp"

using namespace kpdet;
using namespace kpdet::ssm;
using testutil::check_grad;
using testutil::max_abs_diff;
using testutil::projection_weights;
using testutil::project_to_scalar;
using testutil::random_tensor;
using testutil::random_uniform_tensor;

namespace {

// High-order Taylor series for exp(M), no scaling tricks; the independent
// oracle for the production scaling-and-squaring path.
Tensor expm_series_oracle(const Tensor& m, int terms = 60) {
    const std::size_t n = m.extent(0);
    Tensor acc = Tensor::identity(n);
    Tensor term = Tensor::identity(n);
    for (int k = 1; k <= terms; ++k) {
        term = matmul(term, m);
        for (std::size_t i = 0; i < term.size(); ++i) term[i] /= static_cast<double>(k);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += term[i];
    }
    return acc;
}

// phi1(M) = sum_{k>=0} M^k / (k+1)! by direct series
// (term_k = term_{k-1} * M / (k+1)).
Tensor phi1_series_oracle(const Tensor& m, int terms = 60) {
    const std::size_t n = m.extent(0);
    Tensor acc = Tensor::identity(n);
    Tensor term = Tensor::identity(n);
    for (int k = 1; k <= terms; ++k) {
        term = matmul(term, m);
        for (std::size_t i = 0; i < term.size(); ++i) term[i] /= static_cast<double>(k + 1);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += term[i];
    }
    return acc;
}

SsmParams random_params(Rng& rng, std::size_t n, std::size_t d_in, std::size_t d_out,
                        bool diagonal) {
    SsmParams p;
    p.diagonal_a = diagonal;
    if (diagonal) {
        p.A = random_uniform_tensor({n}, rng, -2.0, -0.05);
    } else {
        // Keep the spectrum in a tame range for the series oracle.
        p.A = random_uniform_tensor({n, n}, rng, -0.5, 0.5);
        for (std::size_t i = 0; i < n; ++i) p.A.at(i, i) -= 1.0;
    }
    p.B = random_tensor({n, d_in}, rng);
    p.C = random_tensor({d_out, n}, rng);
    p.D = random_tensor({d_out, d_in}, rng);
    p.delta = rng.uniform(0.05, 1.0);
    return p;
}

} // namespace

TEST_CASE("discretize_zoh scalar zero dynamics hits the analytic limit") {
    SsmParams p;
    p.diagonal_a = true;
    p.A = Tensor({1}, {0.0});
    p.B = Tensor({1, 1}, {2.0});
    p.C = Tensor({1, 1}, {1.0});
    p.D = Tensor({1, 1}, {0.0});
    p.delta = 0.5;
    const DiscreteSsm d = discretize_zoh(p);
    CHECK(d.A_bar[0] == 1.0);
    CHECK(d.B_bar[0] == 1.0);  // limit branch: delta * B
}

TEST_CASE("discretize_zoh diagonal exponential") {
    SsmParams p;
    p.diagonal_a = true;
    p.A = Tensor({1}, {-1.0});
    p.B = Tensor({1, 1}, {1.0});
    p.C = Tensor({1, 1}, {1.0});
    p.D = Tensor({1, 1}, {0.0});
    p.delta = 1.0;
    const DiscreteSsm d = discretize_zoh(p);
    CHECK(d.A_bar[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
}

TEST_CASE("discretize_zoh rejects non-positive delta") {
    SsmParams p;
    p.diagonal_a = true;
    p.A = Tensor({1}, {-1.0});
    p.B = Tensor({1, 1}, {1.0});
    p.C = Tensor({1, 1}, {1.0});
    p.D = Tensor({1, 1}, {0.0});
    p.delta = 0.0;
    CHECK_THROWS_AS(discretize_zoh(p), ParameterError);
    p.delta = -0.3;
    CHECK_THROWS_AS(discretize_zoh(p), ParameterError);
}

TEST_CASE("discretize_zoh diagonal matches the Taylor-series oracle") {
    Rng rng(31);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(8);
        SsmParams p = random_params(rng, n, 2, 2, true);
        const DiscreteSsm d = discretize_zoh(p);
        for (std::size_t s = 0; s < n; ++s) {
            // scalar series for exp(delta*a) and phi = (exp(da)-1)/a
            const double da = p.delta * p.A[s];
            double abar = 1.0, term = 1.0, phi = 1.0, pterm = 1.0;
            for (int k = 1; k <= 40; ++k) {
                term *= da / k;
                abar += term;
                pterm *= da / (k + 1);
                phi += pterm;
            }
            phi *= p.delta;
            CHECK(std::fabs(d.A_bar[s] - abar) <= 1e-10);
            for (std::size_t j = 0; j < 2; ++j) {
                CHECK(std::fabs(d.B_bar.at(s, j) - phi * p.B.at(s, j)) <= 1e-10);
            }
        }
    }
}

TEST_CASE("expm and full-matrix ZOH match the series oracle") {
    Rng rng(32);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t n = 2 + rng.uniform_index(5);
        const Tensor m = random_uniform_tensor({n, n}, rng, -0.8, 0.8);
        const Tensor got = expm(m);
        const Tensor want = expm_series_oracle(m);
        CHECK(max_abs_diff(got, want) <= 1e-12);
    }
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t n = 2 + rng.uniform_index(4);
        SsmParams p = random_params(rng, n, 3, 2, false);
        const DiscreteSsm d = discretize_zoh(p);
        Tensor da = p.A;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] *= p.delta;
        CHECK(max_abs_diff(d.A_bar, expm_series_oracle(da)) <= 1e-11);
        Tensor db = p.B;
        for (std::size_t i = 0; i < db.size(); ++i) db[i] *= p.delta;
        const Tensor bbar_want = matmul(phi1_series_oracle(da), db);
        CHECK(max_abs_diff(d.B_bar, bbar_want) <= 1e-10);
    }
}

TEST_CASE("stability: diagonal A <= 0 gives |A_bar| <= 1 for any delta > 0") {
    Rng rng(33);
    for (int rep = 0; rep < 50; ++rep) {
        SsmParams p = random_params(rng, 1 + rng.uniform_index(16), 1, 1, true);
        for (std::size_t s = 0; s < p.A.size(); ++s) {
            p.A[s] = -std::fabs(rng.normal(0.0, 5.0));
        }
        p.delta = std::exp(rng.uniform(std::log(1e-4), std::log(10.0)));
        const DiscreteSsm d = discretize_zoh(p);
        for (std::size_t s = 0; s < d.A_bar.size(); ++s) {
            CHECK(std::fabs(d.A_bar[s]) <= 1.0);
        }
    }
}

TEST_CASE("ZOH limit: A_bar -> I as delta -> 0") {
    Rng rng(34);
    SsmParams pd = random_params(rng, 8, 2, 2, true);
    for (std::size_t s = 0; s < 8; ++s) pd.A[s] = rng.uniform(-10.0, 10.0);
    pd.delta = 1e-8;
    const DiscreteSsm dd = discretize_zoh(pd);
    for (std::size_t s = 0; s < 8; ++s) CHECK(std::fabs(dd.A_bar[s] - 1.0) <= 1e-6);

    SsmParams pf = random_params(rng, 6, 2, 2, false);
    for (std::size_t i = 0; i < pf.A.size(); ++i) pf.A[i] = rng.uniform(-1.5, 1.5);
    pf.delta = 1e-8;
    const DiscreteSsm df = discretize_zoh(pf);
    double worst = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            worst = std::max(worst, std::fabs(df.A_bar.at(i, j) - (i == j ? 1.0 : 0.0)));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("scan_recurrent zero input and zero state gives zero output") {
    Rng rng(35);
    const SsmParams p = random_params(rng, 4, 3, 2, true);
    const DiscreteSsm d = discretize_zoh(p);
    const Tensor y = scan_recurrent(d, Tensor({5, 3}));
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("scan_recurrent single step uses the pre-update state") {
    Rng rng(36);
    const SsmParams p = random_params(rng, 4, 3, 2, true);
    const DiscreteSsm d = discretize_zoh(p);
    const Tensor u = random_tensor({1, 3}, rng);
    const Tensor x0 = random_tensor({4}, rng);
    const Tensor y = scan_recurrent(d, u, &x0);
    for (std::size_t o = 0; o < 2; ++o) {
        double want = 0.0;
        for (std::size_t s = 0; s < 4; ++s) want += d.C.at(o, s) * x0[s];
        for (std::size_t j = 0; j < 3; ++j) want += d.D.at(o, j) * u.at(0, j);
        CHECK(y.at(0, o) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("scan_recurrent with A_bar = 0 matches the hand-unrolled form") {
    // With A_bar = 0 the state is exactly B_bar u_{t-1}, so
    // y_0 = D u_0 and y_t = C B_bar u_{t-1} + D u_t afterwards.
    Rng rng(37);
    DiscreteSsm d;
    d.diagonal_a = true;
    d.A_bar = Tensor({3});
    d.B_bar = random_tensor({3, 2}, rng);
    d.C = random_tensor({2, 3}, rng);
    d.D = random_tensor({2, 2}, rng);
    const Tensor u = random_tensor({3, 2}, rng);
    const Tensor y = scan_recurrent(d, u);
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t o = 0; o < 2; ++o) {
            double want = 0.0;
            for (std::size_t j = 0; j < 2; ++j) want += d.D.at(o, j) * u.at(t, j);
            if (t > 0) {
                for (std::size_t s = 0; s < 3; ++s) {
                    double bu = 0.0;
                    for (std::size_t j = 0; j < 2; ++j) bu += d.B_bar.at(s, j) * u.at(t - 1, j);
                    want += d.C.at(o, s) * bu;
                }
            }
            CHECK(y.at(t, o) == doctest::Approx(want).epsilon(1e-13));
        }
    }
}

TEST_CASE("scan_parallel equals scan_recurrent (mode duality)") {
    Rng rng(38);
    for (int rep = 0; rep < 30; ++rep) {
        const bool diagonal = rep % 2 == 0;
        const std::size_t n = 1 + rng.uniform_index(16);
        const std::size_t d_in = 1 + rng.uniform_index(4);
        const std::size_t d_out = 1 + rng.uniform_index(4);
        const std::size_t T = 1 + rng.uniform_index(64);
        const SsmParams p = random_params(rng, n, d_in, d_out, diagonal);
        const DiscreteSsm d = discretize_zoh(p);
        const Tensor u = random_tensor({T, d_in}, rng);
        CHECK(max_abs_diff(scan_recurrent(d, u), scan_parallel(d, u)) <= 1e-10);
    }
}

TEST_CASE("scan_parallel trivial cases") {
    Rng rng(39);
    const SsmParams p = random_params(rng, 5, 2, 3, true);
    const DiscreteSsm d = discretize_zoh(p);
    const Tensor u1 = random_tensor({1, 2}, rng);
    CHECK(max_abs_diff(scan_parallel(d, u1), scan_recurrent(d, u1)) == 0.0);
    const Tensor y0 = scan_parallel(d, Tensor({7, 2}));
    for (std::size_t i = 0; i < y0.size(); ++i) CHECK(y0[i] == 0.0);
}

TEST_CASE("scan_backward matches finite differences") {
    Rng rng(40);
    const std::size_t n = 3, d_in = 2, d_out = 2, T = 5;
    const SsmParams p = random_params(rng, n, d_in, d_out, true);
    DiscreteSsm d = discretize_zoh(p);
    Tensor u = random_tensor({T, d_in}, rng);
    Tensor x0 = random_tensor({n}, rng);
    const Tensor proj = projection_weights({T, d_out}, 77);

    auto objective = [&]() {
        const Tensor y = scan_recurrent(d, u, &x0);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += proj[i] * y[i];
        return s;
    };
    const ScanGrads grads = scan_backward(d, u, &x0, proj);

    struct Slot {
        Tensor* param;
        const Tensor* grad;
    };
    const Slot slots[] = {{&d.A_bar, &grads.a_bar}, {&d.B_bar, &grads.b_bar},
                          {&d.C, &grads.c},         {&d.D, &grads.d},
                          {&u, &grads.u},           {&x0, &grads.x0}};
    const double eps = 1e-6;
    for (const Slot& slot : slots) {
        for (std::size_t i = 0; i < slot.param->size(); ++i) {
            const double orig = (*slot.param)[i];
            (*slot.param)[i] = orig + eps;
            const double fp = objective();
            (*slot.param)[i] = orig - eps;
            const double fm = objective();
            (*slot.param)[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = (*slot.grad)[i];
            CHECK(std::fabs(analytic - numeric) <=
                  1e-4 * std::max({1.0, std::fabs(analytic), std::fabs(numeric)}));
        }
    }
}

TEST_CASE("scan_backward full-matrix case matches finite differences") {
    Rng rng(53);
    const std::size_t n = 3, d_in = 2, d_out = 2, T = 4;
    const SsmParams p = random_params(rng, n, d_in, d_out, false);
    DiscreteSsm d = discretize_zoh(p);
    Tensor u = random_tensor({T, d_in}, rng);
    const Tensor proj = projection_weights({T, d_out}, 76);
    const ScanGrads grads = scan_backward(d, u, nullptr, proj);
    auto objective = [&]() {
        const Tensor y = scan_recurrent(d, u);
        double s = 0.0;
        for (std::size_t k = 0; k < y.size(); ++k) s += proj[k] * y[k];
        return s;
    };
    const double eps = 1e-6;
    for (std::size_t i = 0; i < d.A_bar.size(); ++i) {
        const double orig = d.A_bar[i];
        d.A_bar[i] = orig + eps;
        const double fp = objective();
        d.A_bar[i] = orig - eps;
        const double fm = objective();
        d.A_bar[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        CHECK(std::fabs(grads.a_bar[i] - numeric) <=
              1e-4 * std::max({1.0, std::fabs(grads.a_bar[i]), std::fabs(numeric)}));
    }
}

TEST_CASE("selective_scan recurrent equals chunked parallel across chunk borders") {
    Rng rng(41);
    const std::size_t T = 150, ch = 3, n = 4;  // crosses two chunk boundaries
    const ag::Var u = ag::constant(random_tensor({T, ch}, rng));
    const ag::Var dt = ag::constant(random_uniform_tensor({T, ch}, rng, 0.01, 0.5));
    const ag::Var b = ag::constant(random_tensor({T, n}, rng));
    const ag::Var c = ag::constant(random_tensor({T, n}, rng));
    const ag::Var a = ag::constant(random_uniform_tensor({n}, rng, -2.0, -0.1));
    const ag::Var d = ag::constant(random_tensor({ch}, rng));
    const ag::Var yr = selective_scan(u, dt, b, c, a, d, ScanMode::Recurrent);
    const ag::Var yp = selective_scan(u, dt, b, c, a, d, ScanMode::ChunkedParallel);
    CHECK(max_abs_diff(yr->value, yp->value) <= 1e-8);
}

TEST_CASE("selective_scan zero input gives zero output") {
    Rng rng(54);
    const std::size_t T = 9, ch = 2, n = 3;
    const ag::Var y = selective_scan(
        ag::constant(Tensor({T, ch})),
        ag::constant(random_uniform_tensor({T, ch}, rng, 0.05, 0.5)),
        ag::constant(random_tensor({T, n}, rng)), ag::constant(random_tensor({T, n}, rng)),
        ag::constant(random_uniform_tensor({n}, rng, -1.0, -0.1)),
        ag::constant(random_tensor({ch}, rng)), ScanMode::Recurrent);
    for (std::size_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == 0.0);
}

TEST_CASE("selective_scan gradients for every input") {
    Rng rng(42);
    const std::size_t T = 6, ch = 2, n = 3;
    const Tensor u0 = random_tensor({T, ch}, rng);
    const Tensor dt0 = random_uniform_tensor({T, ch}, rng, 0.02, 0.6);
    const Tensor b0 = random_tensor({T, n}, rng);
    const Tensor c0 = random_tensor({T, n}, rng);
    const Tensor a0 = random_uniform_tensor({n}, rng, -2.0, -0.1);
    const Tensor d0 = random_tensor({ch}, rng);
    const Tensor w = projection_weights({T, ch}, 66);

    for (const auto mode : {ScanMode::Recurrent, ScanMode::ChunkedParallel}) {
        auto with = [&](int which, ag::Var v) {
            const ag::Var args[6] = {
                which == 0 ? v : ag::constant(u0),  which == 1 ? v : ag::constant(dt0),
                which == 2 ? v : ag::constant(b0),  which == 3 ? v : ag::constant(c0),
                which == 4 ? v : ag::constant(a0),  which == 5 ? v : ag::constant(d0)};
            return project_to_scalar(
                selective_scan(args[0], args[1], args[2], args[3], args[4], args[5], mode), w);
        };
        CHECK(check_grad(u0, [&](ag::Var v) { return with(0, v); }).pass);
        CHECK(check_grad(dt0, [&](ag::Var v) { return with(1, v); }).pass);
        CHECK(check_grad(b0, [&](ag::Var v) { return with(2, v); }).pass);
        CHECK(check_grad(c0, [&](ag::Var v) { return with(3, v); }).pass);
        CHECK(check_grad(a0, [&](ag::Var v) { return with(4, v); }).pass);
        CHECK(check_grad(d0, [&](ag::Var v) { return with(5, v); }).pass);
    }
}

TEST_CASE("selective_scan gradient near the phi limit branch") {
    // Tiny |dt * a| exercises the series branch of dphi/da.
    Rng rng(43);
    const std::size_t T = 4, ch = 1, n = 2;
    const Tensor u0 = random_tensor({T, ch}, rng);
    const Tensor dt0 = random_uniform_tensor({T, ch}, rng, 1e-5, 5e-5);
    const Tensor b0 = random_tensor({T, n}, rng);
    const Tensor c0 = random_tensor({T, n}, rng);
    const Tensor a0 = random_uniform_tensor({n}, rng, -0.02, -0.005);
    const Tensor d0 = random_tensor({ch}, rng);
    const Tensor w = projection_weights({T, ch}, 65);
    CHECK(check_grad(a0, [&](ag::Var v) {
              return project_to_scalar(
                  selective_scan(ag::constant(u0), ag::constant(dt0), ag::constant(b0),
                                 ag::constant(c0), v, ag::constant(d0), ScanMode::Recurrent),
                  w);
          }).pass);
}

// ----- image serialization and the backbone -----

TEST_CASE("serialize_patches raster order on a 1x4x4 image") {
    Tensor img({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
    const Tensor tok = bb::serialize_patches(img, 2);
    REQUIRE(tok.shape() == std::vector<std::size_t>{4, 4});
    // token 0 = rows 0-1, cols 0-1 in raster order
    CHECK(tok.at(0, 0) == 0.0);
    CHECK(tok.at(0, 1) == 1.0);
    CHECK(tok.at(0, 2) == 4.0);
    CHECK(tok.at(0, 3) == 5.0);
    // token 1 = rows 0-1, cols 2-3
    CHECK(tok.at(1, 0) == 2.0);
    // token 2 = rows 2-3, cols 0-1
    CHECK(tok.at(2, 0) == 8.0);
}

TEST_CASE("serialize/deserialize round-trip is exact") {
    Rng rng(44);
    const Tensor img = random_tensor({3, 8, 12}, rng);
    const Tensor tok = bb::serialize_patches(img, 4);
    const Tensor back = bb::deserialize_patches(tok, 3, 8, 12, 4);
    CHECK(max_abs_diff(img, back) == 0.0);
}

TEST_CASE("serialize_patches shape arithmetic for 3x64x64 patch 8") {
    const Tensor img({3, 64, 64});
    const Tensor tok = bb::serialize_patches(img, 8);
    CHECK(tok.shape() == std::vector<std::size_t>{64, 192});
}

TEST_CASE("serialize_patches rejects non-divisible extents") {
    CHECK_THROWS_AS(bb::serialize_patches(Tensor({1, 5, 4}), 2), DimensionError);
    CHECK_THROWS_AS(bb::serialize_patches(Tensor({1, 4, 6}), 4), DimensionError);
}

TEST_CASE("patchify gradient is the exact inverse permutation") {
    Rng rng(45);
    const Tensor img = random_tensor({2, 4, 4}, rng);
    const Tensor w = projection_weights({4, 8}, 64);
    CHECK(check_grad(img, [&](ag::Var v) {
              return project_to_scalar(bb::patchify(v, 2), w);
          }).pass);
}

namespace {

bb::SelectiveBlockWeights zero_block_weights(std::size_t d, std::size_t n) {
    bb::SelectiveBlockWeights w;
    w.norm_gain = ag::leaf(Tensor({d}));
    w.w_dt = ag::leaf(Tensor({d, d}));
    w.b_dt = ag::leaf(Tensor({d}));
    w.w_b = ag::leaf(Tensor({d, n}));
    w.w_c = ag::leaf(Tensor({d, n}));
    w.a_log = ag::leaf(Tensor({n}));
    w.d_skip = ag::leaf(Tensor({d}));
    w.w_gate = ag::leaf(Tensor({d, d}));
    w.b_gate = ag::leaf(Tensor({d}));
    w.w_out = ag::leaf(Tensor({d, d}));
    w.b_out = ag::leaf(Tensor({d}));
    return w;
}

} // namespace

TEST_CASE("selective_block with zero weights is the identity") {
    Rng rng(46);
    const std::size_t d = 6, n = 3;
    const Tensor x = random_tensor({10, d}, rng);
    const auto w = zero_block_weights(d, n);
    const ag::Var out = bb::selective_block(ag::constant(x), w, ScanMode::Recurrent);
    CHECK(max_abs_diff(out->value, x) == 0.0);
}

TEST_CASE("selective_block is deterministic and mode-dual") {
    Rng rng(47);
    const std::size_t d = 8, n = 4;
    ParamRegistry reg;
    Rng wrng(147);
    const auto weights = bb::init_backbone(reg, bb::BackboneConfig{1, 2, d, n, 1}, wrng);
    const auto& w = weights.stage1[0];
    const Tensor x = random_tensor({70, d}, rng);
    const ag::Var y1 = bb::selective_block(ag::constant(x), w, ScanMode::Recurrent);
    const ag::Var y2 = bb::selective_block(ag::constant(x), w, ScanMode::Recurrent);
    CHECK(max_abs_diff(y1->value, y2->value) == 0.0);
    const ag::Var yp = bb::selective_block(ag::constant(x), w, ScanMode::ChunkedParallel);
    CHECK(max_abs_diff(y1->value, yp->value) <= 1e-8);
}

TEST_CASE("selective_block weight gradients") {
    Rng rng(48);
    const std::size_t d = 4, n = 2, T = 5;
    ParamRegistry reg;
    Rng wrng(52);
    const auto weights = bb::init_backbone(reg, bb::BackboneConfig{1, 2, d, n, 1}, wrng);
    const bb::SelectiveBlockWeights& blk = weights.stage1[0];
    const Tensor x = random_tensor({T, d}, rng);
    const Tensor w = projection_weights({T, d}, 63);

    auto rebuild = [&](const ag::Var& target, ag::Var replaced) {
        bb::SelectiveBlockWeights mod = blk;
        if (target == blk.w_dt) mod.w_dt = replaced;
        if (target == blk.b_dt) mod.b_dt = replaced;
        if (target == blk.w_b) mod.w_b = replaced;
        if (target == blk.w_c) mod.w_c = replaced;
        if (target == blk.a_log) mod.a_log = replaced;
        if (target == blk.d_skip) mod.d_skip = replaced;
        if (target == blk.w_gate) mod.w_gate = replaced;
        if (target == blk.w_out) mod.w_out = replaced;
        if (target == blk.norm_gain) mod.norm_gain = replaced;
        return project_to_scalar(bb::selective_block(ag::constant(x), mod, ScanMode::Recurrent),
                                 w);
    };
    for (const ag::Var& target : {blk.w_dt, blk.b_dt, blk.w_b, blk.w_c, blk.a_log, blk.d_skip,
                                  blk.w_gate, blk.w_out, blk.norm_gain}) {
        CHECK(check_grad(target->value,
                         [&](ag::Var v) { return rebuild(target, v); }).pass);
    }
}

TEST_CASE("extract_pyramid emits the stride-8/16/32 shape law") {
    Rng rng(49);
    ParamRegistry reg;
    bb::BackboneConfig cfg;
    cfg.in_channels = 3;
    cfg.patch = 8;
    cfg.d_model = 8;
    cfg.d_state = 4;
    cfg.blocks_per_stage = 1;
    const auto w = bb::init_backbone(reg, cfg, rng);

    const Tensor img64 = random_tensor({3, 64, 64}, rng, 0.3);
    const bb::FeaturePyramid p64 = bb::extract_pyramid(img64, w, cfg, ScanMode::Recurrent);
    CHECK(p64.level8.shape() == std::vector<std::size_t>{8, 8, 8});
    CHECK(p64.level16.shape() == std::vector<std::size_t>{8, 4, 4});
    CHECK(p64.level32.shape() == std::vector<std::size_t>{8, 2, 2});

    const Tensor img32 = random_tensor({3, 32, 32}, rng, 0.3);
    const bb::FeaturePyramid p32 = bb::extract_pyramid(img32, w, cfg, ScanMode::Recurrent);
    CHECK(p32.level8.shape() == std::vector<std::size_t>{8, 4, 4});
    CHECK(p32.level16.shape() == std::vector<std::size_t>{8, 2, 2});
    CHECK(p32.level32.shape() == std::vector<std::size_t>{8, 1, 1});

    CHECK_THROWS_AS(bb::extract_pyramid(Tensor({3, 48, 64}), w, cfg, ScanMode::Recurrent),
                    DimensionError);
}

TEST_CASE("extract_pyramid stride law holds over random valid shapes") {
    Rng rng(50);
    ParamRegistry reg;
    bb::BackboneConfig cfg;
    cfg.in_channels = 1;
    cfg.patch = 4;
    cfg.d_model = 4;
    cfg.d_state = 2;
    cfg.blocks_per_stage = 1;
    const auto w = bb::init_backbone(reg, cfg, rng);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t h = 16 * (1 + rng.uniform_index(3));
        const std::size_t wd = 16 * (1 + rng.uniform_index(3));
        const Tensor img = random_tensor({1, h, wd}, rng, 0.3);
        const bb::FeaturePyramid p = bb::extract_pyramid(img, w, cfg, ScanMode::Recurrent);
        CHECK(p.level8.shape() == std::vector<std::size_t>{4, h / 4, wd / 4});
        CHECK(p.level16.shape() == std::vector<std::size_t>{4, h / 8, wd / 8});
        CHECK(p.level32.shape() == std::vector<std::size_t>{4, h / 16, wd / 16});
    }
}

TEST_CASE("extract_pyramid is sensitive to single-pixel changes") {
    Rng rng(51);
    ParamRegistry reg;
    bb::BackboneConfig cfg;
    cfg.in_channels = 1;
    cfg.patch = 4;
    cfg.d_model = 8;
    cfg.d_state = 4;
    cfg.blocks_per_stage = 1;
    const auto w = bb::init_backbone(reg, cfg, rng);
    Tensor img = random_tensor({1, 16, 16}, rng, 0.3);
    const bb::FeaturePyramid before = bb::extract_pyramid(img, w, cfg, ScanMode::Recurrent);
    img.at(0, 3, 5) += 0.25;
    const bb::FeaturePyramid after = bb::extract_pyramid(img, w, cfg, ScanMode::Recurrent);
    CHECK(max_abs_diff(before.level8, after.level8) > 0.0);
    CHECK(max_abs_diff(before.level16, after.level16) > 0.0);
    CHECK(max_abs_diff(before.level32, after.level32) > 0.0);
}

TEST_CASE("backbone pipeline gradients flow to the embedding") {
    Rng rng(55);
    ParamRegistry reg;
    bb::BackboneConfig cfg;
    cfg.in_channels = 1;
    cfg.patch = 2;
    cfg.d_model = 4;
    cfg.d_state = 2;
    cfg.blocks_per_stage = 1;
    auto weights = bb::init_backbone(reg, cfg, rng);
    const Tensor img = random_tensor({1, 8, 8}, rng, 0.3);
    const Tensor w = projection_weights({1, 4}, 62);  // l32 tokens: 1x1 grid x d_model
    CHECK(check_grad(weights.w_embed->value, [&](ag::Var v) {
              auto mod = weights;
              mod.w_embed = v;
              const auto p = bb::extract_pyramid_tokens(ag::constant(img), mod, cfg,
                                                        ScanMode::ChunkedParallel);
              return project_to_scalar(p.l32, w);
          }).pass);
}
