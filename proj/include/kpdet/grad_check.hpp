#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "kpdet/tensor.hpp"

namespace kpdet {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    bool pass = false;
};

/// Compares an analytic gradient against central finite differences.
/// `f` evaluates the scalar objective at a parameter tensor; `grad_f` returns
/// its analytic gradient (same shape as params). Error per component is
/// |a - n| / max(1, |a|, |n|), so small gradients are held to an absolute
/// tolerance. Throws NumericError if `f` returns a non-finite value.
inline GradCheckReport grad_check(const std::function<double(const Tensor&)>& f,
                                  const std::function<Tensor(const Tensor&)>& grad_f,
                                  const Tensor& params, double eps, double tol) {
    if (eps <= 0.0) throw ParameterError("grad_check requires eps > 0");
    const Tensor analytic = grad_f(params);
    if (!analytic.same_shape(params)) {
        throw DimensionError("grad_check: gradient shape differs from params");
    }
    GradCheckReport rep;
    Tensor p = params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + eps;
        const double fp = f(p);
        p[i] = orig - eps;
        const double fm = f(p);
        p[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: objective returned a non-finite value");
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
        const double rel = std::fabs(a - numeric) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.analytic_at_worst = a;
            rep.numeric_at_worst = numeric;
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

} // namespace kpdet
