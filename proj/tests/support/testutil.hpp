#pragma once

// Shared test helpers. The finite-difference checker is the independent
// oracle for every analytic gradient in the library: it re-evaluates the
// forward function around each input element and compares the central
// difference against the recorded adjoint.

#include <cmath>
#include <random>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace testutil {

template <typename S>
mmfuse::TensorT<S> random_tensor(mmfuse::Shape shape, std::mt19937& rng, double lo = -2.0, double hi = 2.0,
                                 bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<S> v(mmfuse::shape_numel(shape));
    for (auto& x : v) x = static_cast<S>(dist(rng));
    return mmfuse::TensorT<S>(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Maximum relative error between analytic gradients and central finite
// differences, taken per leaf: the largest element-wise deviation over
// the largest gradient magnitude of that leaf. `forward` must be a pure
// function of the leaves returning a scalar tensor; it is re-invoked with
// perturbed leaf values (outside any record, so nothing is taped).
template <typename Forward>
double grad_check(const std::vector<mmfuse::TensorT<double>*>& leaves, Forward forward, double step = 1e-5) {
    for (auto* leaf : leaves) leaf->zero_grad();
    std::vector<std::vector<double>> analytic;
    {
        mmfuse::TapeT<double> tape;
        auto loss = forward();
        mmfuse::backward(loss);
    }
    for (auto* leaf : leaves) {
        analytic.push_back(leaf->grad());
        leaf->zero_grad();
    }

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li]->values();
        double diff = 0.0, magnitude = 0.0;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + step;
            const double fp = forward().item();
            vals[i] = orig - step;
            const double fm = forward().item();
            vals[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            diff = std::max(diff, std::abs(fd - analytic[li][i]));
            magnitude = std::max({magnitude, std::abs(fd), std::abs(analytic[li][i])});
        }
        worst = std::max(worst, diff / std::max(magnitude, 1e-6));
    }
    return worst;
}

}  // namespace testutil
