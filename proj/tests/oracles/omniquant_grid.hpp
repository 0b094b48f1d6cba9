#pragma once

#include <cmath>
#include <random>

#include "lfq/ops.hpp"
#include "lfq/ptq.hpp"

namespace lfq::oracle {

// Two-parameter OmniQuant problem: one output row of 16 weights (a single
// group), 64 inputs scaled to unit-variance activations, an 8-token head,
// W3 asymmetric. The loss is the logit cross-entropy against the FP layer.
struct GridOracle {
    double grid_min = 0;
    double grid_gamma = 0, grid_beta = 0;
    double adam_init = 0;
    double adam_loss = 0;
    double adam_gamma = 0, adam_beta = 0;
};

inline GridOracle omniquant_grid_oracle(std::uint64_t seed, std::size_t grid = 200, std::size_t iters = 1000,
                                        double lr = 1e-2) {
    constexpr std::size_t n = 64, c_in = 16, vocab = 8;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal;
    std::vector<float> xv(n * c_in), wv(c_in), hv(vocab);
    for (auto& v : xv) v = normal(rng) / std::sqrt(static_cast<float>(c_in));
    for (auto& v : wv) v = normal(rng);
    for (auto& v : hv) v = normal(rng);
    const Tensor x = Tensor::from({n, c_in}, xv), w = Tensor::from({1, c_in}, wv), head = Tensor::from({1, vocab}, hv);
    const QuantScheme scheme = default_scheme(Method::omniquant, 3, 0);
    const Tensor target = ops::matmul(ops::matmul_nt(x, w), head).detach();
    auto loss_of = [&](const OmniQuantParams& p) {
        const Tensor wq = quantize(w, p, scheme).weight;
        return ops::cross_entropy(target, ops::matmul(ops::matmul_nt(x, wq), head), true, true);
    };
    auto raw = [](double p) { return Tensor::full({1, 1}, static_cast<float>(std::log(p / (1 - p)))); };
    auto sigmoid = [](float r) { return 1.0 / (1.0 + std::exp(-double(r))); };

    GridOracle r;
    r.grid_min = INFINITY;
    for (std::size_t i = 0; i < grid; ++i) {
        for (std::size_t j = 0; j < grid; ++j) {
            const double g = (double(i) + 0.5) / double(grid), b = (double(j) + 0.5) / double(grid);
            const double v = loss_of(OmniQuantParams{raw(g), raw(b)}).item();
            if (v < r.grid_min) {
                r.grid_min = v;
                r.grid_gamma = g;
                r.grid_beta = b;
            }
        }
    }

    std::vector<QuantizerParams> params{init_params(Method::omniquant, w, scheme)};
    const FitOutcome fit =
        fit_adam([&] { return loss_of(std::get<OmniQuantParams>(params[0])); }, params, FitOptions{iters, lr}, "toy");
    const auto& p = std::get<OmniQuantParams>(params[0]);
    r.adam_init = fit.loss_init;
    r.adam_loss = fit.loss_final;
    r.adam_gamma = sigmoid(p.gamma_raw.data()[0]);
    r.adam_beta = sigmoid(p.beta_raw.data()[0]);
    return r;
}

}  // namespace lfq::oracle
