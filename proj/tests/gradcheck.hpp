#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lst/tensor.hpp"

namespace lst::testing {

// Central-difference gradient check. `f` rebuilds the graph from scratch on a
// fresh tape given flat parameter values and returns the scalar loss; `g`
// does the same but also returns the analytic gradient for all parameters.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

inline GradCheckResult grad_check(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& at, const std::vector<double>& analytic_grad,
    double h = 1e-5) {
    GradCheckResult res;
    std::vector<double> x = at;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        const double num = (fp - fm) / (2.0 * h);
        const double ana = analytic_grad[i];
        const double scale = std::max({std::fabs(num), std::fabs(ana), 1.0});
        const double rel = std::fabs(num - ana) / scale;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = static_cast<std::int64_t>(i);
            res.analytic = ana;
            res.numeric = num;
        }
    }
    return res;
}

}  // namespace lst::testing
