#include "lfq/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lfq/error.hpp"
#include "lfq/ops.hpp"

namespace lfq {

std::string to_string(Method m) {
    switch (m) {
        case Method::flexround: return "flexround";
        case Method::omniquant: return "omniquant";
        case Method::blockap: return "blockap";
    }
    return "?";
}

Method parse_method(const std::string& s) {
    if (s == "flexround") return Method::flexround;
    if (s == "omniquant") return Method::omniquant;
    if (s == "blockap") return Method::blockap;
    throw ContractError("unknown quantization method '" + s + "'");
}

std::string to_string(ClampMode c) {
    return c == ClampMode::symmetric_signed ? "symmetric_signed" : "asymmetric_unsigned";
}

ClampMode parse_clamp(const std::string& s) {
    if (s == "symmetric_signed") return ClampMode::symmetric_signed;
    if (s == "asymmetric_unsigned") return ClampMode::asymmetric_unsigned;
    throw ContractError("unknown clamp mode '" + s + "'");
}

std::size_t QuantScheme::effective_group(std::size_t c_in) const {
    const std::size_t g = (group_size == 0 || group_size >= c_in) ? c_in : group_size;
    if (g == 0 || c_in % g != 0) {
        throw ContractError("group size " + std::to_string(group_size) + " does not divide " +
                            std::to_string(c_in) + " input channels");
    }
    return g;
}

std::int64_t QuantScheme::qmin() const {
    return clamp == ClampMode::symmetric_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
}

std::int64_t QuantScheme::qmax() const {
    return clamp == ClampMode::symmetric_signed ? (std::int64_t{1} << (bits - 1)) - 1 : levels() - 1;
}

void QuantScheme::validate() const {
    if (bits < 2 || bits > 16) throw ContractError("bit-width must be in [2, 16], got " + std::to_string(bits));
}

QuantScheme default_scheme(Method method, int bits, std::size_t group_size) {
    QuantScheme s;
    s.bits = bits;
    s.group_size = group_size;
    // The min/max clipping form is a range quantizer; the scale-only
    // methods default to a signed grid centred on zero.
    s.clamp = method == Method::omniquant ? ClampMode::asymmetric_unsigned : ClampMode::symmetric_signed;
    s.validate();
    return s;
}

namespace {

template <typename Reduce>
std::vector<float> group_reduce(const Tensor& w, std::size_t group_size, float init, Reduce reduce) {
    const std::size_t rows = w.rows(), cols = w.cols();
    if (group_size == 0 || cols % group_size != 0) {
        throw ContractError("group size " + std::to_string(group_size) + " does not divide " + std::to_string(cols));
    }
    const std::size_t groups = cols / group_size;
    const auto v = w.data();
    std::vector<float> out(rows * groups, init);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            float& slot = out[r * groups + c / group_size];
            slot = reduce(slot, v[r * cols + c]);
        }
    return out;
}

Tensor group_tensor(const Tensor& w, std::size_t group_size, std::vector<float> values) {
    return Tensor::from({w.rows(), w.cols() / group_size}, std::move(values));
}

void check_param_shape(const Tensor& t, std::size_t rows, std::size_t cols, const char* name) {
    if (!t.defined() || t.shape() != Shape{rows, cols}) {
        throw DimensionError(std::string(name) + " must be " + shape_str({rows, cols}) + ", got " +
                             (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
    }
}

float logit(float p) { return std::log(p / (1.0f - p)); }

std::vector<float> initial_step(const Tensor& w, const QuantScheme& scheme, std::size_t g) {
    std::vector<float> step;
    if (scheme.clamp == ClampMode::symmetric_signed) {
        step = group_absmax(w, g);
        const float denom = static_cast<float>((std::int64_t{1} << (scheme.bits - 1)) - 1);
        for (auto& s : step) s /= denom;
    } else {
        step = group_max(w, g);
        const auto lo = group_min(w, g);
        const float denom = static_cast<float>(scheme.levels() - 1);
        for (std::size_t i = 0; i < step.size(); ++i) step[i] = (step[i] - lo[i]) / denom;
    }
    for (auto& s : step) s = std::max(s, kScaleFloor);
    return step;
}

std::vector<float> log_of(std::vector<float> v) {
    for (auto& x : v) x = std::log(x);
    return v;
}

}  // namespace

std::vector<float> group_absmax(const Tensor& w, std::size_t group_size) {
    return group_reduce(w, group_size, 0.0f, [](float a, float x) { return std::max(a, std::abs(x)); });
}

std::vector<float> group_min(const Tensor& w, std::size_t group_size) {
    return group_reduce(w, group_size, std::numeric_limits<float>::max(),
                        [](float a, float x) { return std::min(a, x); });
}

std::vector<float> group_max(const Tensor& w, std::size_t group_size) {
    return group_reduce(w, group_size, std::numeric_limits<float>::lowest(),
                        [](float a, float x) { return std::max(a, x); });
}

QuantizedWeight fake_quantize(const Tensor& w, const Tensor& divisor, const Tensor& rescale,
                              const Tensor& window_low, const QuantScheme& scheme) {
    scheme.validate();
    const std::size_t rows = w.rows(), cols = w.cols();
    const std::size_t g = scheme.effective_group(cols);
    const std::size_t groups = cols / g;
    check_param_shape(divisor, rows, cols, "divisor");
    check_param_shape(rescale, rows, groups, "rescale");
    for (float d : divisor.data()) {
        if (!(d > 0.0f)) throw NumericError("quantizer divisor must be positive, got " + std::to_string(d));
    }
    for (float s : rescale.data()) {
        if (!(s > 0.0f)) throw NumericError("quantizer rescale must be positive, got " + std::to_string(s));
    }

    // Symmetric windows have the fixed origin qmin. Asymmetric windows are
    // the 2^b consecutive integers starting at the clip floor expressed on
    // this group's grid.
    Tensor origin;
    if (scheme.clamp == ClampMode::symmetric_signed) {
        origin = Tensor::full({rows, groups}, static_cast<float>(scheme.qmin()));
    } else {
        const Tensor low = window_low.defined() ? window_low : Tensor::zeros({rows, groups});
        check_param_shape(low, rows, groups, "window floor");
        origin = ops::ste_round(ops::div(low, rescale));
    }
    const Tensor lo = ops::expand_groups(origin, g);
    const Tensor hi = ops::add(lo, Tensor::full({rows, cols}, static_cast<float>(scheme.qmax() - scheme.qmin())));

    QuantizedWeight out;
    out.group_size = g;
    out.origin.assign(origin.data().begin(), origin.data().end());
    Tensor q = ops::clamp(ops::ste_round(ops::div(w, divisor)), lo, hi);
    out.weight = ops::mul(ops::expand_groups(rescale, g), q);
    out.codes.assign(q.data().begin(), q.data().end());
    out.rescale.assign(rescale.data().begin(), rescale.data().end());
    return out;
}

QuantizedWeight quantize_flexround(const Tensor& w, const FlexRoundParams& p, const QuantScheme& scheme) {
    const std::size_t rows = w.rows(), cols = w.cols();
    const std::size_t g = scheme.effective_group(cols);
    check_param_shape(p.log_s1, rows, cols / g, "s1");
    check_param_shape(p.log_S2, rows, cols, "S2");
    check_param_shape(p.log_s3, rows, cols / g, "s3");
    Tensor s1 = ops::exp(p.log_s1);
    Tensor divisor = ops::mul(ops::mul(ops::expand_groups(s1, g), ops::exp(p.log_S2)),
                              ops::expand_groups(ops::exp(p.log_s3), g));
    Tensor low;
    if (scheme.clamp == ClampMode::asymmetric_unsigned) low = group_tensor(w, g, group_min(w, g));
    return fake_quantize(w, divisor, s1, low, scheme);
}

QuantizedWeight quantize_omniquant(const Tensor& w, const OmniQuantParams& p, const QuantScheme& scheme) {
    const std::size_t rows = w.rows(), cols = w.cols();
    const std::size_t g = scheme.effective_group(cols);
    const std::size_t groups = cols / g;
    check_param_shape(p.gamma_raw, rows, groups, "gamma");
    check_param_shape(p.beta_raw, rows, groups, "beta");

    // max/min are constants of W; only the clipping strengths are learned.
    Tensor wmax = group_tensor(w, g, group_max(w, g));
    Tensor wmin = group_tensor(w, g, group_min(w, g));
    Tensor gamma = ops::sigmoid(p.gamma_raw);
    Tensor beta = ops::sigmoid(p.beta_raw);
    Tensor range = ops::sub(ops::mul(gamma, wmax), ops::mul(beta, wmin));
    Tensor h_raw = ops::scale(range, 1.0f / static_cast<float>(scheme.levels() - 1));
    Tensor h = ops::clamp(h_raw, Tensor::full({rows, groups}, kScaleFloor),
                          Tensor::full({rows, groups}, std::numeric_limits<float>::max()));

    return fake_quantize(w, ops::expand_groups(h, g), h, ops::mul(beta, wmin), scheme);
}

QuantizedWeight quantize_blockap(const Tensor& w, const BlockAPParams& p, const QuantScheme& scheme) {
    const Tensor& weight = p.weight.defined() ? p.weight : w;
    const std::size_t rows = weight.rows(), cols = weight.cols();
    const std::size_t g = scheme.effective_group(cols);
    check_param_shape(p.log_s, rows, cols / g, "s");
    Tensor s = ops::exp(p.log_s);
    Tensor low;
    if (scheme.clamp == ClampMode::asymmetric_unsigned) low = group_tensor(weight, g, group_min(weight, g));
    return fake_quantize(weight, ops::expand_groups(s, g), s, low, scheme);
}

QuantizedWeight quantize(const Tensor& w, const QuantizerParams& p, const QuantScheme& scheme) {
    return std::visit(
        [&](const auto& params) -> QuantizedWeight {
            using T = std::decay_t<decltype(params)>;
            if constexpr (std::is_same_v<T, FlexRoundParams>) return quantize_flexround(w, params, scheme);
            else if constexpr (std::is_same_v<T, OmniQuantParams>) return quantize_omniquant(w, params, scheme);
            else return quantize_blockap(w, params, scheme);
        },
        p);
}

QuantizerParams init_params(Method method, const Tensor& w, const QuantScheme& scheme) {
    scheme.validate();
    const std::size_t rows = w.rows(), cols = w.cols();
    const std::size_t g = scheme.effective_group(cols);
    const std::size_t groups = cols / g;
    switch (method) {
        case Method::flexround: {
            FlexRoundParams p;
            p.log_s1 = Tensor::from({rows, groups}, log_of(initial_step(w, scheme, g))).set_requires_grad(true);
            p.log_S2 = Tensor::zeros({rows, cols}).set_requires_grad(true);
            p.log_s3 = Tensor::zeros({rows, groups}).set_requires_grad(true);
            return p;
        }
        case Method::omniquant: {
            OmniQuantParams p;
            p.gamma_raw = Tensor::full({rows, groups}, logit(kLogisticInit)).set_requires_grad(true);
            p.beta_raw = Tensor::full({rows, groups}, logit(kLogisticInit)).set_requires_grad(true);
            return p;
        }
        case Method::blockap: {
            BlockAPParams p;
            p.log_s = Tensor::from({rows, groups}, log_of(initial_step(w, scheme, g))).set_requires_grad(true);
            p.weight = w.clone().set_requires_grad(true);
            return p;
        }
    }
    throw ContractError("unknown method");
}

Method method_of(const QuantizerParams& p) {
    if (std::holds_alternative<FlexRoundParams>(p)) return Method::flexround;
    if (std::holds_alternative<OmniQuantParams>(p)) return Method::omniquant;
    return Method::blockap;
}

std::vector<Tensor> trainable(const QuantizerParams& p) {
    return std::visit(
        [](const auto& params) -> std::vector<Tensor> {
            using T = std::decay_t<decltype(params)>;
            if constexpr (std::is_same_v<T, FlexRoundParams>) return {params.log_s1, params.log_S2, params.log_s3};
            else if constexpr (std::is_same_v<T, OmniQuantParams>) return {params.gamma_raw, params.beta_raw};
            else return {params.log_s, params.weight};
        },
        p);
}

QuantizerParams clone_params(const QuantizerParams& p) {
    return std::visit(
        [](const auto& params) -> QuantizerParams {
            using T = std::decay_t<decltype(params)>;
            if constexpr (std::is_same_v<T, FlexRoundParams>) {
                return FlexRoundParams{params.log_s1.clone(true), params.log_S2.clone(true), params.log_s3.clone(true)};
            } else if constexpr (std::is_same_v<T, OmniQuantParams>) {
                return OmniQuantParams{params.gamma_raw.clone(true), params.beta_raw.clone(true)};
            } else {
                return BlockAPParams{params.log_s.clone(true), params.weight.clone(true)};
            }
        },
        p);
}

}  // namespace lfq
