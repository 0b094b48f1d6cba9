#include "lfq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "lfq/error.hpp"

namespace lfq::ops {

using detail::Node;

namespace {

void check_finite(const std::vector<float>& values, const char* op) {
    // Branch-free scan first so the common all-finite case vectorizes.
    bool bad = false;
    for (float v : values) bad |= !(std::abs(v) <= std::numeric_limits<float>::max());
    if (!bad) return;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                               std::to_string(i));
        }
    }
}

Tensor make_result(const char* op, Shape shape, std::vector<float> value,
                   std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> bw) {
    check_finite(value, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->parents.push_back(t->node());
        node->backward = std::move(bw);
    }
    return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw StateError(std::string(op) + ": undefined tensor argument");
}

void require_2d(const Tensor& t, const char* op) {
    require_defined(t, op);
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

// y = exp(x) through Eigen's vectorized exp. Data is staged through an
// aligned fixed-size buffer so every element takes the same SIMD path; on
// raw pointers Eigen would peel a scalar prefix whose length depends on the
// address, and results would vary with heap layout.
void exp_into(const float* x, float* y, std::size_t n) {
    constexpr std::size_t kChunk = 256;
    Eigen::Array<float, kChunk, 1> buf;
    for (std::size_t i = 0; i < n; i += kChunk) {
        const std::size_t m = std::min(kChunk, n - i);
        std::copy_n(x + i, m, buf.data());
        std::fill(buf.data() + m, buf.data() + kChunk, 0.0f);
        buf = buf.exp();
        std::copy_n(buf.data(), m, y + i);
    }
}

// C (+)= op(A) op(B) with row-major storage; op(X) is X or its transpose.
// Eigen runs single-threaded here, so the summation order is fixed.
void gemm(const float* a, bool trans_a, const float* b, bool trans_b, float* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    MutMap C(c, M, N);
    auto run = [&](const auto& A, const auto& B) {
        if (accumulate) C.noalias() += A * B;
        else C.noalias() = A * B;
    };
    if (!trans_a && !trans_b) run(ConstMap(a, M, K), ConstMap(b, K, N));
    else if (!trans_a && trans_b) run(ConstMap(a, M, K), ConstMap(b, N, K).transpose());
    else if (trans_a && !trans_b) run(ConstMap(a, K, M).transpose(), ConstMap(b, K, N));
    else run(ConstMap(a, K, M).transpose(), ConstMap(b, N, K).transpose());
}

std::vector<float> transposed(std::span<const float> a, std::size_t rows, std::size_t cols) {
    std::vector<float> t(a.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
    return t;
}

void add_into(Node& target, const std::vector<float>& delta) {
    auto& g = target.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

// Row-wise log-sum-exp in double with max subtraction.
double row_lse(const float* z, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
    return mx + std::log(s);
}

std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
    const auto& s = t.shape();
    if (s.size() == 1) return {1, s[0]};
    if (s.size() == 2) return {s[0], s[1]};
    throw DimensionError("expected a 1-D or 2-D tensor, got " + shape_str(s));
}

}  // namespace

float round_half_even(float x) {
    // Assumes the default FE_TONEAREST mode, which this library never changes.
    // Adding +0 maps -0 to +0: codes are integers and carry no zero sign.
    return std::nearbyint(x) + 0.0f;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(m * n);
    gemm(a.data().data(), false, b.data().data(), false, out.data(), m, k, n, false);
    return make_result("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) gemm(self.grad.data(), false, pb.value.data(), true, pa.grad_buffer().data(), m, n, k, true);
        if (pb.requires_grad) gemm(pa.value.data(), true, self.grad.data(), false, pb.grad_buffer().data(), k, m, n, true);
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw DimensionError("matmul_nt: inner extents disagree, " + shape_str(a.shape()) +
                             " x transpose of " + shape_str(b.shape()));
    }
    std::vector<float> out(m * n);
    gemm(a.data().data(), false, b.data().data(), true, out.data(), m, k, n, false);
    return make_result("matmul_nt", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) gemm(self.grad.data(), false, pb.value.data(), false, pa.grad_buffer().data(), m, n, k, true);
        if (pb.requires_grad) gemm(self.grad.data(), true, pa.value.data(), false, pb.grad_buffer().data(), n, m, k, true);
    });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    return make_result("transpose", {c, r}, transposed(a.data(), r, c), {&a}, [r, c](Node& self) {
        Node& pa = *self.parents[0];
        add_into(pa, transposed(self.grad, c, r));
    });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, op);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<float> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make_result(op, a.shape(), std::move(out), {&a, &b}, [bwd](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        float* ga_out = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
        float* gb_out = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
        const float *x = pa.value.data(), *y = pb.value.data(), *o = self.value.data(), *g = self.grad.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            float ga = 0.0f, gb = 0.0f;
            bwd(x[i], y[i], o[i], g[i], ga, gb);
            if (ga_out) ga_out[i] += ga;
            if (gb_out) gb_out[i] += gb;
        }
    });
}

template <typename Fwd, typename Bwd>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
    require_defined(a, op);
    const auto av = a.data();
    std::vector<float> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    return make_result(op, a.shape(), std::move(out), {&a}, [bwd](Node& self) {
        Node& pa = *self.parents[0];
        float* g = pa.grad_buffer().data();
        const float *x = pa.value.data(), *o = self.value.data(), *go = self.grad.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += bwd(x[i], o[i], go[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](float x, float y) { return x + y; },
        [](float, float, float, float g, float& ga, float& gb) { ga = g, gb = g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](float x, float y) { return x - y; },
        [](float, float, float, float g, float& ga, float& gb) { ga = g, gb = -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](float x, float y) { return x * y; },
        [](float x, float y, float, float g, float& ga, float& gb) { ga = g * y, gb = g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        "div", a, b, [](float x, float y) { return x / y; },
        [](float, float y, float out, float g, float& ga, float& gb) {
            ga = g / y;
            gb = -g * out / y;
        });
}

Tensor scale(const Tensor& a, float factor) {
    return unary(
        "scale", a, [factor](float x) { return x * factor; },
        [factor](float, float, float g) { return g * factor; });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](float x) { return std::exp(x); }, [](float, float out, float g) { return g * out; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a,
        [](float x) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
        [](float, float out, float g) { return g * out * (1.0f - out); });
}

Tensor silu(const Tensor& a) {
    require_defined(a, "silu");
    const std::size_t n = a.size();
    const float* x = a.data().data();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = -x[i];
    exp_into(out.data(), out.data(), n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] / (1.0f + out[i]);
    return make_result("silu", a.shape(), std::move(out), {&a}, [n](Node& self) {
        Node& pa = *self.parents[0];
        const float* x = pa.value.data();
        std::vector<float> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = -x[i];
        exp_into(s.data(), s.data(), n);
        float* g = pa.grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) {
            const float sg = 1.0f / (1.0f + s[i]);
            g[i] += self.grad[i] * (sg * (1.0f + x[i] * (1.0f - sg)));
        }
    });
}

Tensor ste_round(const Tensor& a) {
    return unary(
        "ste_round", a, [](float x) { return round_half_even(x); }, [](float, float, float g) { return g; });
}

Tensor clamp(const Tensor& a, const Tensor& lo, const Tensor& hi) {
    require_same_shape(a, lo, "clamp");
    require_same_shape(a, hi, "clamp");
    const auto av = a.data(), lv = lo.data(), hv = hi.data();
    std::vector<float> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(av[i], lv[i]), hv[i]);
    // Each entry's gradient goes to whichever argument it was taken from;
    // ties at a bound go to the input.
    return make_result("clamp", a.shape(), std::move(out), {&a, &lo, &hi}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pl = *self.parents[1];
        Node& ph = *self.parents[2];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const float x = pa.value[i];
            Node& dst = x < pl.value[i] ? pl : x > ph.value[i] ? ph : pa;
            if (dst.requires_grad) dst.grad_buffer()[i] += self.grad[i];
        }
    });
}

Tensor expand_groups(const Tensor& a, std::size_t group_size) {
    require_2d(a, "expand_groups");
    if (group_size == 0) throw ContractError("expand_groups: group size must be positive");
    const std::size_t r = a.rows(), groups = a.cols(), c = groups * group_size;
    const auto av = a.data();
    std::vector<float> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t gi = 0; gi < groups; ++gi)
            std::fill_n(out.begin() + i * c + gi * group_size, group_size, av[i * groups + gi]);
    return make_result("expand_groups", {r, c}, std::move(out), {&a}, [r, groups, group_size, c](Node& self) {
        Node& pa = *self.parents[0];
        auto& g = pa.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double s = 0.0;
                const float* src = self.grad.data() + i * c + gi * group_size;
                for (std::size_t j = 0; j < group_size; ++j) s += src[j];
                g[i * groups + gi] += static_cast<float>(s);
            }
    });
}

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double s = 0.0;
    for (float v : a.data()) s += v;
    return make_result("sum", {1}, {static_cast<float>(s)}, {&a}, [](Node& self) {
        Node& pa = *self.parents[0];
        auto& g = pa.grad_buffer();
        const float seed = self.grad[0];
        for (auto& v : g) v += seed;
    });
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps) {
    require_2d(x, "rmsnorm");
    require_defined(weight, "rmsnorm");
    const std::size_t rows = x.rows(), d = x.cols();
    if (weight.size() != d) {
        throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) + " does not match " +
                             shape_str(x.shape()));
    }
    const auto xv = x.data(), wv = weight.data();
    std::vector<float> out(rows * d);
    std::vector<double> inv(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const float* row = xv.data() + i * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += static_cast<double>(row[j]) * row[j];
        ms = ms / static_cast<double>(d) + eps;
        // An all-zero row with eps = 0 normalizes to zero rather than NaN.
        inv[i] = ms > 0.0 ? 1.0 / std::sqrt(ms) : 0.0;
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = static_cast<float>(row[j] * inv[i] * wv[j]);
    }
    return make_result("rmsnorm", {rows, d}, std::move(out), {&x, &weight},
                       [rows, d, inv = std::move(inv)](Node& self) {
                           Node& px = *self.parents[0];
                           Node& pw = *self.parents[1];
                           std::vector<double> gw(pw.requires_grad ? d : 0, 0.0);
                           for (std::size_t i = 0; i < rows; ++i) {
                               const float* xr = px.value.data() + i * d;
                               const float* gr = self.grad.data() + i * d;
                               const double r = inv[i];
                               if (px.requires_grad) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < d; ++j)
                                       dot += static_cast<double>(gr[j]) * pw.value[j] * xr[j];
                                   auto& g = px.grad_buffer();
                                   const double k = r * r * r * dot / static_cast<double>(d);
                                   for (std::size_t j = 0; j < d; ++j)
                                       g[i * d + j] += static_cast<float>(r * pw.value[j] * gr[j] - k * xr[j]);
                               }
                               if (pw.requires_grad)
                                   for (std::size_t j = 0; j < d; ++j) gw[j] += static_cast<double>(gr[j]) * xr[j] * r;
                           }
                           if (pw.requires_grad) {
                               auto& g = pw.grad_buffer();
                               for (std::size_t j = 0; j < d; ++j) g[j] += static_cast<float>(gw[j]);
                           }
                       });
}

Tensor softmax_rows(const Tensor& z) {
    require_defined(z, "softmax_rows");
    const auto [rows, v] = rows_cols(z);
    if (v == 0) throw ContractError("softmax_rows: vocabulary extent must be at least 1");
    const auto zv = z.data();
    std::vector<float> out(zv.size());
    for (std::size_t i = 0; i < rows; ++i) {
        const double lse = row_lse(zv.data() + i * v, v);
        for (std::size_t j = 0; j < v; ++j)
            out[i * v + j] = static_cast<float>(std::exp(static_cast<double>(zv[i * v + j]) - lse));
    }
    return make_result("softmax_rows", z.shape(), std::move(out), {&z}, [rows, v](Node& self) {
        Node& pz = *self.parents[0];
        auto& g = pz.grad_buffer();
        for (std::size_t i = 0; i < rows; ++i) {
            const float* y = self.value.data() + i * v;
            const float* gy = self.grad.data() + i * v;
            double dot = 0.0;
            for (std::size_t j = 0; j < v; ++j) dot += static_cast<double>(gy[j]) * y[j];
            for (std::size_t j = 0; j < v; ++j) g[i * v + j] += static_cast<float>(y[j] * (gy[j] - dot));
        }
    });
}

Tensor log_softmax_rows(const Tensor& z) {
    require_defined(z, "log_softmax_rows");
    const auto [rows, v] = rows_cols(z);
    if (v == 0) throw ContractError("log_softmax_rows: vocabulary extent must be at least 1");
    const auto zv = z.data();
    std::vector<float> out(zv.size());
    for (std::size_t i = 0; i < rows; ++i) {
        const double lse = row_lse(zv.data() + i * v, v);
        for (std::size_t j = 0; j < v; ++j) out[i * v + j] = static_cast<float>(zv[i * v + j] - lse);
    }
    return make_result("log_softmax_rows", z.shape(), std::move(out), {&z}, [rows, v](Node& self) {
        Node& pz = *self.parents[0];
        auto& g = pz.grad_buffer();
        for (std::size_t i = 0; i < rows; ++i) {
            const float* y = self.value.data() + i * v;
            const float* gy = self.grad.data() + i * v;
            double total = 0.0;
            for (std::size_t j = 0; j < v; ++j) total += gy[j];
            for (std::size_t j = 0; j < v; ++j)
                g[i * v + j] += static_cast<float>(gy[j] - std::exp(static_cast<double>(y[j])) * total);
        }
    });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t seq_len) {
    require_2d(q, "causal_attention");
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t rows = q.rows(), d = q.cols();
    if (n_heads == 0 || d % n_heads != 0) {
        throw ContractError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
    }
    if (seq_len == 0 || rows % seq_len != 0) {
        throw DimensionError("causal_attention: " + std::to_string(rows) + " rows is not a multiple of sequence length " +
                             std::to_string(seq_len));
    }
    const std::size_t n_seq = rows / seq_len, dh = d / n_heads, L = seq_len;
    const float scl = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    const auto Li = static_cast<Eigen::Index>(L), Dh = static_cast<Eigen::Index>(dh);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

    // probs[s][h] is an L x L row-major block; entries above the diagonal stay zero.
    std::vector<float> probs(n_seq * n_heads * L * L, 0.0f);
    std::vector<float> out(rows * d);
    RowMat S(Li, Li);
    for (std::size_t s = 0; s < n_seq; ++s) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t base = s * L * d + h * dh;
            StridedConst Q(q.data().data() + base, Li, Dh, stride);
            StridedConst K(k.data().data() + base, Li, Dh, stride);
            StridedConst V(v.data().data() + base, Li, Dh, stride);
            S.noalias() = Q * K.transpose();
            MutMap P(probs.data() + (s * n_heads + h) * L * L, Li, Li);
            for (Eigen::Index i = 0; i < Li; ++i) {
                float mx = S(i, 0);
                for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, S(i, j));
                for (Eigen::Index j = 0; j <= i; ++j) P(i, j) = (S(i, j) - mx) * scl;
                exp_into(&P(i, 0), &P(i, 0), static_cast<std::size_t>(i + 1));
                double z = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) z += P(i, j);
                const float inv = static_cast<float>(1.0 / z);
                for (Eigen::Index j = 0; j <= i; ++j) P(i, j) *= inv;
            }
            StridedMut O(out.data() + base, Li, Dh, stride);
            O.noalias() = P * V;
        }
    }
    return make_result(
        "causal_attention", {rows, d}, std::move(out), {&q, &k, &v},
        [n_seq, n_heads, L, d, dh, scl, probs = std::move(probs)](Node& self) {
            Node& pq = *self.parents[0];
            Node& pk = *self.parents[1];
            Node& pv = *self.parents[2];
            const auto Li = static_cast<Eigen::Index>(L), Dh = static_cast<Eigen::Index>(dh);
            const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
            float* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
            float* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
            float* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
            RowMat dP(Li, Li);
            for (std::size_t s = 0; s < n_seq; ++s) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t base = s * L * d + h * dh;
                    ConstMap P(probs.data() + (s * n_heads + h) * L * L, Li, Li);
                    StridedConst dO(self.grad.data() + base, Li, Dh, stride);
                    StridedConst Q(pq.value.data() + base, Li, Dh, stride);
                    StridedConst K(pk.value.data() + base, Li, Dh, stride);
                    StridedConst V(pv.value.data() + base, Li, Dh, stride);
                    if (gv) StridedMut(gv + base, Li, Dh, stride).noalias() += P.transpose() * dO;
                    if (!gq && !gk) continue;
                    dP.noalias() = dO * V.transpose();
                    // Softmax backward, restricted to the causal triangle.
                    for (Eigen::Index i = 0; i < Li; ++i) {
                        double row = 0.0;
                        for (Eigen::Index j = 0; j <= i; ++j) row += static_cast<double>(dP(i, j)) * P(i, j);
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            dP(i, j) = static_cast<float>(P(i, j) * (dP(i, j) - row) * scl);
                        }
                        for (Eigen::Index j = i + 1; j < Li; ++j) dP(i, j) = 0.0f;
                    }
                    if (gq) StridedMut(gq + base, Li, Dh, stride).noalias() += dP * K;
                    if (gk) StridedMut(gk + base, Li, Dh, stride).noalias() += dP.transpose() * Q;
                }
            }
        });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
    require_2d(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    std::vector<float> out(idx.size() * d);
    const auto tv = table.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
            throw ContractError("embedding: id " + std::to_string(idx[i]) + " at position " + std::to_string(i) +
                                " outside table of " + std::to_string(vocab) + " rows");
        }
        std::copy_n(tv.begin() + idx[i] * d, d, out.begin() + i * d);
    }
    const std::size_t n = idx.size();
    return make_result("embedding", {n, d}, std::move(out), {&table}, [d, idx = std::move(idx)](Node& self) {
        Node& pt = *self.parents[0];
        auto& g = pt.grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
    });
}

namespace {

void check_distribution_rows(std::span<const float> p, std::size_t rows, std::size_t v, const char* which) {
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const float x = p[i * v + j];
            if (x < 0.0f) {
                throw ContractError(std::string("cross_entropy: ") + which + " row " + std::to_string(i) +
                                    " has a negative probability");
            }
            s += x;
        }
        if (std::abs(s - 1.0) > 1e-4) {
            throw ContractError(std::string("cross_entropy: ") + which + " row " + std::to_string(i) +
                                " sums to " + std::to_string(s) + ", not 1");
        }
    }
}

}  // namespace

Tensor cross_entropy(const Tensor& target, const Tensor& candidate, bool candidate_is_logits,
                     bool target_is_logits) {
    require_same_shape(target, candidate, "cross_entropy");
    const auto [rows, v] = rows_cols(candidate);
    const auto tv = target.data(), cv = candidate.data();

    std::vector<double> p(rows * v);
    if (target_is_logits) {
        for (std::size_t i = 0; i < rows; ++i) {
            const double lse = row_lse(tv.data() + i * v, v);
            for (std::size_t j = 0; j < v; ++j) p[i * v + j] = std::exp(tv[i * v + j] - lse);
        }
    } else {
        check_distribution_rows(tv, rows, v, "target");
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = tv[i];
    }
    if (!candidate_is_logits) check_distribution_rows(cv, rows, v, "candidate");

    double total = 0.0;
    std::vector<double> lse(candidate_is_logits ? rows : 0);
    for (std::size_t i = 0; i < rows; ++i) {
        if (candidate_is_logits) lse[i] = row_lse(cv.data() + i * v, v);
        for (std::size_t j = 0; j < v; ++j) {
            const double pij = p[i * v + j];
            if (pij == 0.0) continue;
            const double logq =
                candidate_is_logits ? cv[i * v + j] - lse[i] : std::log(static_cast<double>(cv[i * v + j]));
            total -= pij * logq;
        }
    }
    const double L = static_cast<double>(rows);
    return make_result("cross_entropy", {1}, {static_cast<float>(total / L)}, {&candidate},
                       [rows, v, L, candidate_is_logits, p = std::move(p), lse = std::move(lse)](Node& self) {
                           Node& pc = *self.parents[0];
                           auto& g = pc.grad_buffer();
                           const double seed = self.grad[0] / L;
                           for (std::size_t i = 0; i < rows; ++i) {
                               double psum = 0.0;
                               for (std::size_t j = 0; j < v; ++j) psum += p[i * v + j];
                               for (std::size_t j = 0; j < v; ++j) {
                                   const std::size_t at = i * v + j;
                                   if (candidate_is_logits) {
                                       const double q = std::exp(pc.value[at] - lse[i]);
                                       g[at] += static_cast<float>(seed * (q * psum - p[at]));
                                   } else if (p[at] != 0.0) {
                                       g[at] += static_cast<float>(-seed * p[at] / pc.value[at]);
                                   }
                               }
                           }
                       });
}

Tensor mse_loss(const Tensor& a, const Tensor& b, MseReduction reduction) {
    require_same_shape(a, b, "mse_loss");
    const auto av = a.data(), bv = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - bv[i];
        s += d * d;
    }
    const double denom = reduction == MseReduction::mean_rows ? static_cast<double>(rows_cols(a).first) : 1.0;
    return make_result("mse_loss", {1}, {static_cast<float>(s / denom)}, {&a, &b}, [denom](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double k = 2.0 * self.grad[0] / denom;
        float* ga = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
        float* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i < pa.value.size(); ++i) {
            const float g = static_cast<float>(k * (static_cast<double>(pa.value[i]) - pb.value[i]));
            if (ga) ga[i] += g;
            if (gb) gb[i] -= g;
        }
    });
}

Tensor nll_loss(const Tensor& logits, std::span<const std::int32_t> targets) {
    require_2d(logits, "nll_loss");
    const std::size_t rows = logits.rows(), v = logits.cols();
    if (targets.size() != rows) {
        throw DimensionError("nll_loss: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " logit rows");
    }
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    const auto zv = logits.data();
    std::vector<double> lse(rows);
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= v) {
            throw ContractError("nll_loss: target id " + std::to_string(tgt[i]) + " out of range");
        }
        lse[i] = row_lse(zv.data() + i * v, v);
        total -= zv[i * v + tgt[i]] - lse[i];
    }
    const double L = static_cast<double>(rows);
    return make_result("nll_loss", {1}, {static_cast<float>(total / L)}, {&logits},
                       [rows, v, L, tgt = std::move(tgt), lse = std::move(lse)](Node& self) {
                           Node& pz = *self.parents[0];
                           auto& g = pz.grad_buffer();
                           const double seed = self.grad[0] / L;
                           for (std::size_t i = 0; i < rows; ++i)
                               for (std::size_t j = 0; j < v; ++j) {
                                   const std::size_t at = i * v + j;
                                   double q = std::exp(pz.value[at] - lse[i]);
                                   if (static_cast<std::int32_t>(j) == tgt[i]) q -= 1.0;
                                   g[at] += static_cast<float>(seed * q);
                               }
                       });
}

std::vector<std::int32_t> argmax_rows(const Tensor& z) {
    require_defined(z, "argmax_rows");
    const auto [rows, v] = rows_cols(z);
    const auto zv = z.data();
    std::vector<std::int32_t> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j)
            if (zv[i * v + j] > zv[i * v + best]) best = j;
        out[i] = static_cast<std::int32_t>(best);
    }
    return out;
}

}  // namespace lfq::ops
