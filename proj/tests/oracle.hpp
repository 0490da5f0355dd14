#pragma once

// Test-only oracles, independent of the library's backward implementations:
// central finite differences for gradients plus small statistics helpers.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "xtab/tensor.hpp"

namespace oracle {

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t checked = 0;
    std::string worst_param;
    size_t worst_index = 0;
};

inline double rel_err(double a, double b) {
    const double denom = std::max(std::abs(a), std::abs(b));
    return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

// Central finite differences over every element of every parameter in the
// set. loss_fn must recompute the full forward pass from current parameter
// values and return the scalar loss. AD gradients must already be populated
// (call backward first). Entries where both AD and FD gradients are below
// `ignore_below` are skipped.
template <class LossFn>
GradCheckReport finite_diff_check(xtab::ParamSet<double>& params, LossFn loss_fn, double h = 1e-5,
                                  double ignore_below = 1e-6) {
    GradCheckReport rep;
    for (auto& e : params) {
        auto ad = e.tensor.grad_or_zeros();
        auto& w = e.tensor.data();
        for (size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + h;
            const double lp = loss_fn();
            w[i] = saved - h;
            const double lm = loss_fn();
            w[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            if (std::max(std::abs(ad[i]), std::abs(fd)) <= ignore_below) continue;
            const double err = rel_err(ad[i], fd);
            ++rep.checked;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_param = e.name;
                rep.worst_index = i;
            }
        }
    }
    return rep;
}

// Same check for a single free tensor input rather than a ParamSet.
template <class LossFn>
GradCheckReport finite_diff_check_tensor(xtab::Tensor<double>& t, const std::vector<double>& ad_grad, LossFn loss_fn,
                                         double h = 1e-5, double ignore_below = 1e-6) {
    GradCheckReport rep;
    auto& w = t.data();
    for (size_t i = 0; i < w.size(); ++i) {
        const double saved = w[i];
        w[i] = saved + h;
        const double lp = loss_fn();
        w[i] = saved - h;
        const double lm = loss_fn();
        w[i] = saved;
        const double fd = (lp - lm) / (2.0 * h);
        if (std::max(std::abs(ad_grad[i]), std::abs(fd)) <= ignore_below) continue;
        const double err = rel_err(ad_grad[i], fd);
        ++rep.checked;
        if (err > rep.max_rel_err) {
            rep.max_rel_err = err;
            rep.worst_index = i;
        }
    }
    return rep;
}

inline double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double population_variance(const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

}  // namespace oracle
