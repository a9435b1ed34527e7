#pragma once

// Central finite differences, used as the independent oracle for every
// backward implementation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "clmm/tensor.hpp"

namespace clmm {

// (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h for each element of x. f must rebuild
// its graph from x's current values on every call.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-5) {
    NoGradGuard guard;
    std::vector<double> g(x.numel());
    auto v = x.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double orig = v[i];
        v[i] = orig + h;
        const double fp = f(x);
        v[i] = orig - h;
        const double fm = f(x);
        v[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor(x.shape(), std::move(g));
}

// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor); the floor keeps near-zero
// components from dominating.
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

} // namespace clmm
