#pragma once

// Test-only central finite-difference oracle. It only ever evaluates the
// function forward, so it stays independent of the analytic backward path.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "lfq/tensor.hpp"

namespace lfq::oracle {

using ScalarFn = std::function<double(std::span<const float>)>;

inline std::vector<double> fd_gradient(const ScalarFn& f, std::vector<float> x, float h = 1e-3f) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float saved = x[i];
        const float up = saved + h;
        const float down = saved - h;
        x[i] = up;
        const double fu = f(x);
        x[i] = down;
        const double fd = f(x);
        x[i] = saved;
        // Divide by the step actually representable in float.
        g[i] = (fu - fd) / (static_cast<double>(up) - static_cast<double>(down));
    }
    return g;
}

// Norm-wise relative error, the usual gradcheck metric.
inline double relative_error(std::span<const float> analytic, std::span<const double> numeric) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic.empty() ? 0.0 : analytic[i];
        diff += (a - numeric[i]) * (a - numeric[i]);
        na += a * a;
        nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    return std::sqrt(diff) / denom;
}

inline std::vector<float> uniform(std::size_t n, std::mt19937_64& rng, float lo = -2.0f, float hi = 2.0f) {
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -2.0f, float hi = 2.0f) {
    auto n = numel(shape);
    return Tensor::from(std::move(shape), uniform(n, rng, lo, hi));
}

// Weighted sum with fixed random weights, the scalar probe used to turn a
// tensor-valued op into a scalar for gradient checks.
inline double probe(const Tensor& out, std::span<const float> weights) {
    double s = 0.0;
    const auto v = out.data();
    for (std::size_t i = 0; i < v.size(); ++i) s += static_cast<double>(v[i]) * weights[i];
    return s;
}

}  // namespace lfq::oracle
