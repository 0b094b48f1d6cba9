#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lfq/tensor.hpp"

namespace lfq {

enum class ClampMode { symmetric_signed, asymmetric_unsigned };

enum class Method { flexround, omniquant, blockap };

std::string to_string(Method m);
Method parse_method(const std::string& s);
std::string to_string(ClampMode c);
ClampMode parse_clamp(const std::string& s);

// Uniform b-bit grid. group_size 0 (or any value >= c_in) selects
// per-channel quantization, i.e. one group spanning the input channels.
struct QuantScheme {
    int bits = 4;
    std::size_t group_size = 0;
    ClampMode clamp = ClampMode::symmetric_signed;

    std::size_t effective_group(std::size_t c_in) const;
    std::size_t groups(std::size_t c_in) const { return c_in / effective_group(c_in); }
    std::int64_t levels() const { return std::int64_t{1} << bits; }
    // Lowest/highest integer code relative to the group's window origin.
    std::int64_t qmin() const;
    std::int64_t qmax() const;
    void validate() const;
};

QuantScheme default_scheme(Method method, int bits, std::size_t group_size);

// Positive scales live in log space; the forward pass exponentiates.
struct FlexRoundParams {
    Tensor log_s1;  // [c_out x groups]
    Tensor log_S2;  // [c_out x c_in]
    Tensor log_s3;  // [c_out x groups]
};

// gamma = sigmoid(gamma_raw), beta = sigmoid(beta_raw).
struct OmniQuantParams {
    Tensor gamma_raw;  // [c_out x groups]
    Tensor beta_raw;   // [c_out x groups]
};

struct BlockAPParams {
    Tensor log_s;   // [c_out x groups]
    Tensor weight;  // trainable copy of W_FP
};

using QuantizerParams = std::variant<FlexRoundParams, OmniQuantParams, BlockAPParams>;

// Everything a quantizer forward produces. `weight` is the fake-quantized
// tensor inside the graph; the rest are detached values used for export.
struct QuantizedWeight {
    Tensor weight;                   // rescale * code, [c_out x c_in]
    std::vector<float> codes;        // integers stored as float, [c_out x c_in]
    std::vector<float> rescale;      // output step per group, [c_out x groups]
    std::vector<std::int32_t> origin;  // integer window origin per group
    std::size_t group_size = 0;
};

inline constexpr float kScaleFloor = 1e-8f;
inline constexpr float kLogisticInit = 0.999f;

QuantizedWeight quantize_flexround(const Tensor& w, const FlexRoundParams& p, const QuantScheme& scheme);
QuantizedWeight quantize_omniquant(const Tensor& w, const OmniQuantParams& p, const QuantScheme& scheme);
QuantizedWeight quantize_blockap(const Tensor& w, const BlockAPParams& p, const QuantScheme& scheme);
QuantizedWeight quantize(const Tensor& w, const QuantizerParams& p, const QuantScheme& scheme);

// Shared grid map: rescale * clamp(round(w / divisor)). Used by all three
// methods once their divisor and rescale are formed; exposed for tests.
// Asymmetric windows start at ste_round(window_low / rescale) per group
// ([c_out x groups]; undefined means 0), so clipped entries pass gradient to
// the clip floor and the step.
QuantizedWeight fake_quantize(const Tensor& w, const Tensor& divisor_groups_or_full, const Tensor& rescale_groups,
                              const Tensor& window_low, const QuantScheme& scheme);

QuantizerParams init_params(Method method, const Tensor& w, const QuantScheme& scheme);

Method method_of(const QuantizerParams& p);
// Handles to the trainable tensors (they alias the params' storage).
std::vector<Tensor> trainable(const QuantizerParams& p);
// Deep copy, used for best-iterate snapshots.
QuantizerParams clone_params(const QuantizerParams& p);

// Per-group statistics over [rows x cols] with groups along columns.
std::vector<float> group_absmax(const Tensor& w, std::size_t group_size);
std::vector<float> group_min(const Tensor& w, std::size_t group_size);
std::vector<float> group_max(const Tensor& w, std::size_t group_size);

}  // namespace lfq
