#pragma once

// Central finite-difference gradient checking used across the test suites.
// Kept independent of the autodiff implementation: it only needs a scalar
// function of a flat parameter vector.

#include <cmath>
#include <functional>
#include <vector>

namespace testsupport {

struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

// rel err with an absolute floor so that near-zero gradients compare on an
// absolute scale instead of blowing up the ratio
inline double relative_error(double a, double n, double floor_scale) {
    double denom = std::max({std::fabs(a), std::fabs(n), floor_scale});
    return std::fabs(a - n) / denom;
}

inline GradCheckResult check_gradients(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, const std::vector<double>& analytic,
                                       double h = 1e-5, double floor_scale = 1e-3) {
    GradCheckResult res;
    for (size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + h;
        double fp = f(x);
        x[i] = keep - h;
        double fm = f(x);
        x[i] = keep;
        double numeric = (fp - fm) / (2.0 * h);
        double rel = relative_error(analytic[i], numeric, floor_scale);
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
            res.analytic_at_worst = analytic[i];
            res.numeric_at_worst = numeric;
        }
    }
    return res;
}

}  // namespace testsupport
