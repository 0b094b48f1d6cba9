#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lfq/tensor.hpp"

// Differentiable tensor operations. Reductions accumulate in double and
// store float; every op rejects non-finite results with NumericError.
namespace lfq::ops {

// C = A B for A [m x k], B [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A B^T for A [m x k], B [n x k]; the linear-layer product with
// weights stored [out x in].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);

// Forward rounds half-to-even; backward is the identity.
Tensor ste_round(const Tensor& a);
// Elementwise clamp against bounds of the same shape. Gradient reaches x where
// lo <= x <= hi, and the bound an entry was clipped to otherwise.
Tensor clamp(const Tensor& a, const Tensor& lo, const Tensor& hi);
// [rows x groups] -> [rows x groups*group_size], each entry repeated
// group_size times along the column axis.
Tensor expand_groups(const Tensor& a, std::size_t group_size);

Tensor sum(const Tensor& a);

Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps);
Tensor softmax_rows(const Tensor& z);
Tensor log_softmax_rows(const Tensor& z);

// Multi-head causal self-attention over a stack of equal-length sequences.
// q, k, v are [n_seq*seq_len x d]; heads split d evenly.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t seq_len);

// Row gather: out[i] = table[ids[i]].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// -(1/L) sum_ij p_ij log q_ij. The target side is always detached.
Tensor cross_entropy(const Tensor& target, const Tensor& candidate, bool candidate_is_logits,
                     bool target_is_logits);

enum class MseReduction { frobenius_sq, mean_rows };
Tensor mse_loss(const Tensor& a, const Tensor& b, MseReduction reduction);

// Mean next-token negative log-likelihood of integer targets under logits.
Tensor nll_loss(const Tensor& logits, std::span<const std::int32_t> targets);

// Row-wise argmax, ties broken toward the lowest index.
std::vector<std::int32_t> argmax_rows(const Tensor& z);

// Round half to even, the rounding rule used by ste_round and packing.
float round_half_even(float x);

}  // namespace lfq::ops
