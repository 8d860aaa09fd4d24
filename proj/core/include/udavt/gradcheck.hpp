#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "udavt/tensor.hpp"

namespace udavt {

// Central-difference gradient oracle: (f(x+h*e_i) - f(x-h*e_i)) / (2h) per
// coordinate. f must be deterministic; use double tensors for the tolerances
// quoted in the tests.
template <class S>
TensorT<S> finite_difference_grad(const std::function<double(const TensorT<S>&)>& f, const TensorT<S>& x,
                                  double step) {
    if (!(step > 0)) throw PreconditionError("finite_difference_grad: step must be > 0");
    std::vector<S> g(x.size());
    TensorT<S> probe = x.detached();
    for (size_t i = 0; i < x.size(); ++i) {
        S orig = probe.data()[i];
        probe.data()[i] = orig + static_cast<S>(step);
        double f_plus = f(probe);
        probe.data()[i] = orig - static_cast<S>(step);
        double f_minus = f(probe);
        probe.data()[i] = orig;
        g[i] = static_cast<S>((f_plus - f_minus) / (2.0 * step));
    }
    return TensorT<S>::from_data(x.shape(), std::move(g));
}

// Max over coordinates of |a-b| / max(floor, rel_floor*scale, |a|, |b|)
// where scale is the largest magnitude in either vector. Coordinates far
// below the gradient's own scale are held to an absolute tolerance there;
// otherwise finite-difference cancellation noise on near-zero entries
// dominates the ratio.
template <class S>
double max_rel_err(const std::vector<S>& a, const std::vector<S>& b, double floor = 1e-8,
                   double rel_floor = 1e-3) {
    if (a.size() != b.size())
        throw PreconditionError("max_rel_err: size mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
    double scale = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        scale = std::max({scale, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double x = static_cast<double>(a[i]);
        double y = static_cast<double>(b[i]);
        double denom = std::max({floor, rel_floor * scale, std::abs(x), std::abs(y)});
        worst = std::max(worst, std::abs(x - y) / denom);
    }
    return worst;
}

}  // namespace udavt
