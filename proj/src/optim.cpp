#include "lfq/optim.hpp"

#include <cmath>
#include <string>

#include "lfq/error.hpp"

namespace lfq {

void adam_step(AdamState& state, std::span<Tensor> params) {
    const auto& o = state.options;
    if (!(o.lr >= 0.0)) throw ContractError("adam: learning rate must be non-negative");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ContractError("adam: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                            std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].size()) {
            throw ContractError("adam: moment buffer for parameter " + std::to_string(i) +
                                " does not match shape " + shape_str(params[i].shape()));
        }
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto values = params[i].mutable_data();
        const auto grad = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double g = grad.empty() ? 0.0 : grad[j];
            m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
            v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            const double updated = values[j] - o.lr * mhat / (std::sqrt(vhat) + o.eps);
            if (!std::isfinite(updated)) {
                throw NumericError("adam: non-finite parameter after step " + std::to_string(state.step));
            }
            values[j] = static_cast<float>(updated);
        }
    }
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)) {
    state_.options = options;
}

void Adam::step() { adam_step(state_, params_); }

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace lfq
