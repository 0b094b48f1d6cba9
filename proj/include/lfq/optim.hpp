#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lfq/tensor.hpp"

namespace lfq {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moment buffers are kept in double; they are sized lazily on the first
// step to match the parameters they track.
struct AdamState {
    AdamOptions options;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update of `params` in place from their current
// grads. A parameter without a grad is treated as having a zero grad.
void adam_step(AdamState& state, std::span<Tensor> params);

class Adam {
   public:
    Adam(std::vector<Tensor> params, AdamOptions options);

    void step();
    void zero_grad();
    void set_lr(double lr) { state_.options.lr = lr; }

    const AdamState& state() const { return state_; }
    std::span<Tensor> params() { return params_; }

   private:
    std::vector<Tensor> params_;
    AdamState state_;
};

}  // namespace lfq
