#include "lfq/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "lfq/error.hpp"
#include "lfq/ops.hpp"

namespace lfq {

namespace {

constexpr std::size_t kChunkWindows = 32;

// log softmax of one row, in double.
void log_softmax_row(std::span<const float> z, std::vector<double>& out) {
    out.resize(z.size());
    double mx = -INFINITY;
    for (float v : z) mx = std::max(mx, double(v));
    double s = 0;
    for (float v : z) s += std::exp(double(v) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = double(z[i]) - lse;
}

std::int32_t argmax(std::span<const float> z) {
    return static_cast<std::int32_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

void check_set(const Model& fp, const Model& q, const EvalSet& set) {
    if (set.seq_len == 0 || set.tokens.empty() || set.tokens.size() % set.seq_len != 0) {
        throw ContractError("evaluation needs whole windows of a positive sequence length");
    }
    if (fp.config.vocab_size != q.config.vocab_size) throw ContractError("models disagree on vocabulary size");
}

// Calls fn(position, fp_row, q_row) for every position, chunking the forward
// passes so memory stays bounded.
template <class Fn>
void for_each_position(const Model& fp, const Model& q, const EvalSet& set, Fn&& fn) {
    check_set(fp, q, set);
    const std::size_t V = fp.config.vocab_size;
    const std::size_t L = set.seq_len;
    std::size_t pos = 0;
    for (std::size_t w = 0; w < set.n_windows(); w += kChunkWindows) {
        const std::size_t nw = std::min(kChunkWindows, set.n_windows() - w);
        const std::span<const std::int32_t> toks(set.tokens.data() + w * L, nw * L);
        const Tensor zf = forward_full(fp, toks, L);
        const Tensor zq = forward_full(q, toks, L);
        for (std::size_t r = 0; r < nw * L; ++r, ++pos) {
            fn(pos, zf.data().subspan(r * V, V), zq.data().subspan(r * V, V));
        }
    }
}

double kl_rows(std::span<const float> zf, std::span<const float> zq) {
    std::vector<double> lp, lq;
    log_softmax_row(zf, lp);
    log_softmax_row(zq, lq);
    double kl = 0;
    for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    return std::max(kl, 0.0);
}

std::string fmt(std::initializer_list<double> v) {
    std::ostringstream os;
    os << std::setprecision(12) << '[';
    bool first = true;
    for (double x : v) {
        os << (first ? "" : ", ") << x;
        first = false;
    }
    os << ']';
    return os.str();
}

}  // namespace

EvalSet eval_windows(std::span<const std::uint8_t> corpus, std::size_t seq_len, std::size_t offset,
                     std::size_t max_windows) {
    if (seq_len == 0) throw ContractError("evaluation sequence length must be positive");
    EvalSet set;
    set.seq_len = seq_len;
    if (offset >= corpus.size()) return set;
    std::size_t n = (corpus.size() - offset) / seq_len;
    if (max_windows) n = std::min(n, max_windows);
    set.tokens.assign(corpus.begin() + static_cast<std::ptrdiff_t>(offset),
                      corpus.begin() + static_cast<std::ptrdiff_t>(offset + n * seq_len));
    return set;
}

double perplexity(const Model& model, std::span<const std::uint8_t> corpus, std::size_t seq_len) {
    if (corpus.size() < 2) throw ContractError("perplexity needs at least two bytes");
    if (seq_len < 2 || seq_len > model.config.max_seq_len) {
        throw ContractError("perplexity window must be in [2, " + std::to_string(model.config.max_seq_len) + "]");
    }
    const std::size_t V = model.config.vocab_size;
    double nll = 0;
    std::size_t count = 0;
    std::vector<double> lp;
    auto score = [&](std::span<const std::uint8_t> bytes, std::size_t L) {
        const std::vector<std::int32_t> toks(bytes.begin(), bytes.end());
        const Tensor z = forward_full(model, toks, L);
        for (std::size_t r = 0; r < toks.size(); ++r) {
            if ((r + 1) % L == 0) continue;
            log_softmax_row(z.data().subspan(r * V, V), lp);
            nll -= lp[static_cast<std::size_t>(toks[r + 1])];
            ++count;
        }
    };
    const std::size_t full = corpus.size() / seq_len;
    for (std::size_t w = 0; w < full; w += kChunkWindows) {
        const std::size_t nw = std::min(kChunkWindows, full - w);
        score(corpus.subspan(w * seq_len, nw * seq_len), seq_len);
    }
    const std::size_t tail = corpus.size() - full * seq_len;
    if (tail >= 2) score(corpus.subspan(full * seq_len), tail);
    return std::exp(nll / static_cast<double>(count));
}

TokenKL token_kl(const Model& fp, const Model& q, const EvalSet& set) {
    TokenKL out;
    for_each_position(fp, q, set, [&](std::size_t, std::span<const float> zf, std::span<const float> zq) {
        out.per_position.push_back(kl_rows(zf, zq));
    });
    double s = 0;
    for (double v : out.per_position) s += v;
    out.mean = s / static_cast<double>(out.per_position.size());
    return out;
}

double top1_agreement(const Model& fp, const Model& q, const EvalSet& set) {
    std::size_t agree = 0, n = 0;
    for_each_position(fp, q, set, [&](std::size_t, std::span<const float> zf, std::span<const float> zq) {
        agree += argmax(zf) == argmax(zq);
        ++n;
    });
    return static_cast<double>(agree) / static_cast<double>(n);
}

TopK top_k(std::span<const float> logits, std::size_t k) {
    std::vector<double> lp;
    log_softmax_row(logits, lp);
    std::vector<std::int32_t> idx(lp.size());
    std::iota(idx.begin(), idx.end(), 0);
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::int32_t a, std::int32_t b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
    TopK out;
    for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i], std::exp(lp[idx[i]]));
    return out;
}

std::vector<DivergenceRecord> greedy_divergence(const Model& fp, const Model& q,
                                                const std::vector<std::vector<std::int32_t>>& prompts,
                                                std::size_t max_len) {
    if (max_len > fp.config.max_seq_len || max_len > q.config.max_seq_len) {
        throw ContractError("decode length " + std::to_string(max_len) + " exceeds the model context");
    }
    const std::size_t V = fp.config.vocab_size;
    std::vector<DivergenceRecord> out;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        if (prompts[p].empty() || prompts[p].size() > max_len) {
            throw ContractError("prompt " + std::to_string(p) + " must hold 1 to " + std::to_string(max_len) + " tokens");
        }
        DivergenceRecord rec;
        rec.prompt_id = p;
        // Until the first mismatch both free-running contexts are identical.
        std::vector<std::int32_t> ctx = prompts[p];
        for (std::size_t step = 0;; ++step) {
            const Tensor zf = forward_full(fp, ctx);
            const Tensor zq = forward_full(q, ctx);
            const auto rf = zf.data().subspan((ctx.size() - 1) * V, V);
            const auto rq = zq.data().subspan((ctx.size() - 1) * V, V);
            const std::int32_t tf = argmax(rf), tq = argmax(rq);
            if (tf != tq) {
                rec.diverged = true;
                rec.position = step;
                rec.fp_token = tf;
                rec.q_token = tq;
                rec.fp_top5 = top_k(rf, 5);
                rec.q_top5 = top_k(rq, 5);
                rec.kl = kl_rows(rf, rq);
                break;
            }
            if (ctx.size() == max_len) break;
            ctx.push_back(tf);
        }
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<std::int32_t> sample_decode(const Model& model, std::vector<std::int32_t> prompt, std::size_t max_len,
                                        const SamplerOptions& opt) {
    if (prompt.empty()) throw ContractError("sampling needs a nonempty prompt");
    if (max_len > model.config.max_seq_len) throw ContractError("decode length exceeds the model context");
    if (opt.temperature < 0 || !(opt.top_p > 0) || opt.top_p > 1) {
        throw ContractError("temperature must be >= 0 and top_p in (0, 1]");
    }
    const std::size_t V = model.config.vocab_size;
    std::mt19937_64 rng(opt.seed);
    std::vector<double> lp;
    while (prompt.size() < max_len) {
        const Tensor z = forward_full(model, prompt);
        const auto row = z.data().subspan((prompt.size() - 1) * V, V);
        if (opt.temperature == 0) {
            prompt.push_back(argmax(row));
            continue;
        }
        std::vector<float> scaled(row.begin(), row.end());
        for (float& v : scaled) v = static_cast<float>(v / opt.temperature);
        const TopK ranked = top_k(scaled, V);
        double mass = 0;
        std::size_t keep = 0;
        while (keep < ranked.size() && (keep == 0 || mass < opt.top_p)) mass += ranked[keep++].second;
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * mass;
        double acc = 0;
        std::int32_t pick = ranked[keep - 1].first;
        for (std::size_t i = 0; i < keep; ++i) {
            acc += ranked[i].second;
            if (u < acc) {
                pick = ranked[i].first;
                break;
            }
        }
        prompt.push_back(pick);
    }
    return prompt;
}

MarkerReport marker_token_report(const Model& fp, const Model& q, const EvalSet& set,
                                 const std::vector<std::int32_t>& markers) {
    if (markers.empty()) throw ContractError("marker set is empty");
    const auto V = static_cast<std::int32_t>(fp.config.vocab_size);
    for (auto m : markers) {
        if (m < 0 || m >= V) throw ContractError("marker id " + std::to_string(m) + " outside the vocabulary");
    }
    std::vector<bool> is_marker(static_cast<std::size_t>(V), false);
    for (auto m : markers) is_marker[static_cast<std::size_t>(m)] = true;

    MarkerReport out;
    std::vector<double> lf, lq;
    for_each_position(fp, q, set, [&](std::size_t pos, std::span<const float> zf, std::span<const float> zq) {
        if (!is_marker[static_cast<std::size_t>(argmax(zf))]) return;
        log_softmax_row(zf, lf);
        log_softmax_row(zq, lq);
        MarkerEntry e;
        e.position = pos;
        for (std::size_t i = 0; i < lf.size(); ++i) {
            if (!is_marker[i]) continue;
            e.fp_mass += std::exp(lf[i]);
            e.q_mass += std::exp(lq[i]);
        }
        e.gap = std::abs(e.fp_mass - e.q_mass);
        out.entries.push_back(e);
    });
    double s = 0;
    for (const auto& e : out.entries) s += e.gap;
    out.mean_gap = out.entries.empty() ? 0.0 : s / static_cast<double>(out.entries.size());
    return out;
}

FidelityReport evaluate_fidelity(const Model& fp, const Model& q, std::span<const std::uint8_t> corpus,
                                 const FidelityOptions& opt) {
    const EvalSet set = eval_windows(corpus, opt.seq_len, opt.offset, opt.max_windows);
    if (set.n_windows() == 0) {
        throw ContractError("evaluation corpus holds no full window of " + std::to_string(opt.seq_len) + " bytes");
    }
    const auto region = std::span<const std::uint8_t>(corpus).subspan(opt.offset, set.tokens.size());
    FidelityReport r;
    r.perplexity_fp = perplexity(fp, region, opt.seq_len);
    r.perplexity_q = perplexity(q, region, opt.seq_len);
    TokenKL kl = token_kl(fp, q, set);
    r.mean_kl = kl.mean;
    r.kl_series = std::move(kl.per_position);
    r.positions = r.kl_series.size();
    r.top1_agreement = top1_agreement(fp, q, set);
    r.markers = marker_token_report(fp, q, set, opt.markers);

    std::vector<std::vector<std::int32_t>> prompts;
    const std::size_t plen = std::min(opt.prompt_len, opt.seq_len);
    for (std::size_t i = 0; i < std::min(opt.prompts, set.n_windows()); ++i) {
        const auto* start = set.tokens.data() + i * opt.seq_len;
        prompts.emplace_back(start, start + plen);
    }
    r.divergences = greedy_divergence(fp, q, prompts, opt.seq_len);
    return r;
}

void to_json(nlohmann::json& j, const DivergenceRecord& r) {
    auto table = [](const TopK& t) {
        auto a = nlohmann::json::array();
        for (const auto& [tok, p] : t) a.push_back({{"token", tok}, {"prob", p}});
        return a;
    };
    j = nlohmann::json{{"prompt", r.prompt_id}, {"diverged", r.diverged}};
    if (r.diverged) {
        j["position"] = r.position;
        j["fp_token"] = r.fp_token;
        j["q_token"] = r.q_token;
        j["fp_top5"] = table(r.fp_top5);
        j["q_top5"] = table(r.q_top5);
        j["kl"] = r.kl;
    }
}

void to_json(nlohmann::json& j, const MarkerReport& r) {
    j = nlohmann::json{{"positions", r.entries.size()}, {"mean_gap", r.mean_gap}};
}

void to_json(nlohmann::json& j, const FidelityReport& r) {
    j = nlohmann::json{{"perplexity_fp", r.perplexity_fp},
                       {"perplexity_q", r.perplexity_q},
                       {"mean_kl", r.mean_kl},
                       {"top1_agreement", r.top1_agreement},
                       {"positions", r.positions},
                       {"markers", r.markers},
                       {"divergences", r.divergences}};
}

std::string kl_series_csv(const FidelityReport& r) {
    std::ostringstream os;
    os << std::setprecision(17) << "position,kl\n";
    for (std::size_t i = 0; i < r.kl_series.size(); ++i) os << i << ',' << r.kl_series[i] << '\n';
    return os.str();
}

bool VerifyReport::passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

VerifyReport verify_worked_examples() {
    // Two-token vocabulary; the block output is a row vector and the head
    // maps it to two logits.
    const double head[2][2] = {{0.5, 0.3}, {0.5, 1.0}};
    auto through_head = [&](double a, double b) {
        return std::array<double, 2>{a * head[0][0] + b * head[1][0], a * head[0][1] + b * head[1][1]};
    };
    auto sq = [](double x) { return x * x; };
    auto ce = [](std::array<double, 2> p, std::array<double, 2> q) {
        return -(p[0] * std::log(q[0]) + p[1] * std::log(q[1]));
    };
    const Tensor head_t = Tensor::from({2, 2}, {0.5f, 0.3f, 0.5f, 1.0f});
    auto float_row = [&](float a, float b) { return ops::matmul(Tensor::from({1, 2}, {a, b}), head_t); };
    auto t2 = [](double a, double b) { return Tensor::from({1, 2}, {float(a), float(b)}); };
    constexpr double kExact = 1e-9, kFloat = 1e-6;

    VerifyReport rep;
    const auto fp = through_head(0.8, 0.2), q = through_head(0.7, 0.3);
    {
        const Tensor ff = float_row(0.8f, 0.2f), fq = float_row(0.7f, 0.3f);
        const bool ok = std::abs(fp[0] - 0.5) < kExact && std::abs(fp[1] - 0.44) < kExact &&
                        std::abs(q[0] - 0.5) < kExact && std::abs(q[1] - 0.51) < kExact &&
                        std::abs(ff.data()[1] - 0.44) < kFloat && std::abs(fq.data()[1] - 0.51) < kFloat;
        rep.checks.push_back({"head products", ok, "fp " + fmt({fp[0], fp[1]}) + ", quantized " + fmt({q[0], q[1]})});
    }
    {
        const bool ok = fp[0] > fp[1] && q[1] > q[0];
        rep.checks.push_back({"argmax flip", ok,
                              std::string("fp predicts token ") + (fp[0] > fp[1] ? "1" : "2") +
                                  ", quantized predicts token " + (q[1] > q[0] ? "2" : "1")});
    }
    const double mse_i = sq(0.6 - 0.4) + sq(0.4 - 0.6);
    const double mse_ii = sq(0.9 - 0.6) + sq(0.1 - 0.4);
    {
        const double fi = ops::mse_loss(t2(0.6, 0.4), t2(0.4, 0.6), ops::MseReduction::frobenius_sq).item();
        const double fii = ops::mse_loss(t2(0.9, 0.1), t2(0.6, 0.4), ops::MseReduction::frobenius_sq).item();
        const bool ok = std::abs(mse_i - 0.08) < kExact && std::abs(mse_ii - 0.18) < kExact &&
                        std::abs(fi - 0.08) < kFloat && std::abs(fii - 0.18) < kFloat;
        rep.checks.push_back({"logit MSE", ok, "case (i) " + fmt({mse_i}) + ", case (ii) " + fmt({mse_ii})});
    }
    // Probability mode: the logit vectors are read as distributions.
    const double ce_i = ce({0.6, 0.4}, {0.4, 0.6});
    const double ce_ii = ce({0.9, 0.1}, {0.6, 0.4});
    {
        const double fi = ops::cross_entropy(t2(0.6, 0.4), t2(0.4, 0.6), false, false).item();
        const double fii = ops::cross_entropy(t2(0.9, 0.1), t2(0.6, 0.4), false, false).item();
        const bool ok = std::abs(ce_i - 0.754) < 1e-3 && std::abs(ce_ii - 0.551) < 1e-3 &&
                        std::abs(fi - ce_i) < kFloat && std::abs(fii - ce_ii) < kFloat;
        rep.checks.push_back({"cross-entropy", ok, "case (i) " + fmt({ce_i}) + ", case (ii) " + fmt({ce_ii})});
    }
    {
        const bool ok = mse_i < mse_ii && ce_i > ce_ii;
        rep.checks.push_back({"preference inversion", ok,
                              std::string("MSE prefers case ") + (mse_i < mse_ii ? "(i)" : "(ii)") +
                                  ", cross-entropy prefers case " + (ce_ii < ce_i ? "(ii)" : "(i)")});
    }
    return rep;
}

void to_json(nlohmann::json& j, const VerifyReport& r) {
    auto checks = nlohmann::json::array();
    for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    j = nlohmann::json{{"passed", r.passed()}, {"checks", checks}};
}

}  // namespace lfq
