#include "lfq/ptq.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "lfq/error.hpp"
#include "lfq/ops.hpp"
#include "lfq/optim.hpp"

namespace lfq {

std::string to_string(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::block_mse: return "block-mse";
        case ObjectiveKind::logit_mse: return "logit-mse";
        case ObjectiveKind::logit_ce: return "logit-ce";
    }
    return "?";
}

ObjectiveKind parse_objective(const std::string& s) {
    if (s == "block-mse" || s == "block_mse") return ObjectiveKind::block_mse;
    if (s == "logit-mse" || s == "logit_mse") return ObjectiveKind::logit_mse;
    if (s == "logit-ce" || s == "logit_ce") return ObjectiveKind::logit_ce;
    throw ContractError("unknown objective '" + s + "' (expected block-mse, logit-mse or logit-ce)");
}

std::string to_string(TeacherMode t) { return t == TeacherMode::shared_x ? "shared-x" : "full-fp"; }

TeacherMode parse_teacher(const std::string& s) {
    if (s == "shared-x" || s == "shared_x") return TeacherMode::shared_x;
    if (s == "full-fp" || s == "full_fp") return TeacherMode::full_fp;
    throw ContractError("unknown teacher mode '" + s + "' (expected shared-x or full-fp)");
}

double default_lr(Method m) {
    switch (m) {
        case Method::flexround: return 1e-3;
        case Method::omniquant: return 2e-3;
        case Method::blockap: return 2e-5;
    }
    return 1e-3;
}

PTQConfig PTQConfig::for_method(Method method, int bits, std::size_t group_size) {
    PTQConfig c;
    c.method = method;
    c.scheme = default_scheme(method, bits, group_size);
    c.lr = default_lr(method);
    return c;
}

void PTQConfig::validate(std::size_t n_blocks) const {
    scheme.validate();
    if (lfq_k < 1 || lfq_k > n_blocks) {
        throw ContractError("lfq_k must be in [1, " + std::to_string(n_blocks) + "], got " + std::to_string(lfq_k));
    }
    if (!(lr > 0) || !std::isfinite(lr)) throw ContractError("learning rate must be positive and finite");
    if (!(final_lr >= 0) || !std::isfinite(final_lr)) throw ContractError("final learning rate must be >= 0");
    for (double v : lr_sweep) {
        if (!(v > 0) || !std::isfinite(v)) throw ContractError("sweep learning rates must be positive and finite");
    }
    if (iters < 1) throw ContractError("iters must be at least 1");
    if (samples < 1) throw ContractError("at least one calibration sample is required");
    if (seq_len < 1) throw ContractError("sequence length must be positive");
}

void to_json(nlohmann::json& j, const PTQConfig& c) {
    j = nlohmann::json{
        {"method", to_string(c.method)},
        {"bits", c.scheme.bits},
        {"group_size", c.scheme.group_size},
        {"clamp", to_string(c.scheme.clamp)},
        {"objective", to_string(c.objective_final)},
        {"lfq_k", c.lfq_k},
        {"lfq_skip_last", c.lfq_skip_last},
        {"iters", c.iters},
        {"lr", c.lr},
        {"final_lr", c.final_lr},
        {"lr_sweep", c.lr_sweep},
        {"seed", c.seed},
        {"input_mode", to_string(c.input_mode)},
        {"teacher", to_string(c.teacher)},
        {"samples", c.samples},
        {"seq_len", c.seq_len},
        {"timing", c.timing},
    };
}

// Keys absent from `j` keep their current values, except that naming a
// method resets the method-dependent defaults (clamp, lr) first.
void from_json(const nlohmann::json& j, PTQConfig& c) {
    if (!j.is_object()) throw FormatError("PTQ config must be a JSON object");
    try {
        if (j.contains("method")) {
            const Method m = parse_method(j.at("method").get<std::string>());
            if (m != c.method) {
                PTQConfig fresh = PTQConfig::for_method(m, c.scheme.bits, c.scheme.group_size);
                c.method = m;
                c.scheme = fresh.scheme;
                c.lr = fresh.lr;
            }
        }
        c.scheme.bits = j.value("bits", c.scheme.bits);
        c.scheme.group_size = j.value("group_size", c.scheme.group_size);
        if (j.contains("clamp")) c.scheme.clamp = parse_clamp(j.at("clamp").get<std::string>());
        if (j.contains("objective")) c.objective_final = parse_objective(j.at("objective").get<std::string>());
        c.lfq_k = j.value("lfq_k", c.lfq_k);
        c.lfq_skip_last = j.value("lfq_skip_last", c.lfq_skip_last);
        c.iters = j.value("iters", c.iters);
        c.lr = j.value("lr", c.lr);
        c.final_lr = j.value("final_lr", c.final_lr);
        c.lr_sweep = j.value("lr_sweep", c.lr_sweep);
        c.seed = j.value("seed", c.seed);
        if (j.contains("input_mode")) c.input_mode = parse_input_mode(j.at("input_mode").get<std::string>());
        if (j.contains("teacher")) c.teacher = parse_teacher(j.at("teacher").get<std::string>());
        c.samples = j.value("samples", c.samples);
        c.seq_len = j.value("seq_len", c.seq_len);
        c.timing = j.value("timing", c.timing);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad PTQ config: ") + e.what());
    }
}

bool uses_final_objective(std::size_t i, std::size_t n_blocks, std::size_t lfq_k, bool skip_last) {
    if (i >= n_blocks) throw ContractError("block index out of range");
    if (skip_last && i + 1 == n_blocks) return false;
    return i + lfq_k >= n_blocks;
}

std::vector<ObjectiveKind> objective_schedule(std::size_t n_blocks, std::size_t lfq_k, bool skip_last,
                                              ObjectiveKind final_kind) {
    std::vector<ObjectiveKind> out;
    for (std::size_t i = 0; i < n_blocks; ++i) {
        out.push_back(uses_final_objective(i, n_blocks, lfq_k, skip_last) ? final_kind : ObjectiveKind::block_mse);
    }
    return out;
}

void to_json(nlohmann::json& j, const BlockFitResult& r) {
    j = nlohmann::json{{"index", r.index},     {"objective", to_string(r.objective)},
                       {"loss_init", r.loss_init}, {"loss_final", r.loss_final},
                       {"iters", r.iters},     {"lr", r.lr},
                       {"seconds", r.seconds}};
}

FitOutcome fit_adam(const std::function<Tensor()>& loss_fn, std::vector<QuantizerParams>& params,
                    const FitOptions& opt, const std::string& what) {
    if (!(opt.lr >= 0) || !std::isfinite(opt.lr)) throw ContractError(what + ": learning rate must be >= 0");
    std::vector<Tensor> tensors;
    for (const auto& p : params) {
        for (const Tensor& t : trainable(p)) tensors.push_back(t);
    }
    Adam adam(tensors, AdamOptions{.lr = opt.lr});

    auto evaluate = [&](std::size_t step) {
        try {
            Tensor loss = loss_fn();
            if (!std::isfinite(loss.item())) throw NumericError("loss is " + std::to_string(loss.item()));
            return loss;
        } catch (const NumericError& e) {
            throw NumericError(what + ": non-finite loss at step " + std::to_string(step) + " (" + e.what() + ")");
        }
    };

    FitOutcome out;
    double best = std::numeric_limits<double>::infinity();
    std::vector<QuantizerParams> snapshot;
    for (std::size_t step = 0;; ++step) {
        adam.zero_grad();
        Tensor loss = evaluate(step);
        const double v = loss.item();
        if (step == 0) out.loss_init = v;
        if (v < best) {
            best = v;
            snapshot.clear();
            for (const auto& p : params) snapshot.push_back(clone_params(p));
        }
        if (step == opt.iters) break;
        backward(loss);
        adam.step();
    }
    params = std::move(snapshot);
    out.loss_final = best;
    return out;
}

BlockWeights quantized_block(const BlockWeights& fp_block, std::span<const QuantizerParams> params,
                             const QuantScheme& scheme) {
    if (params.size() != BlockWeights::kLinears) {
        throw ContractError("a block needs " + std::to_string(BlockWeights::kLinears) + " quantizer params, got " +
                            std::to_string(params.size()));
    }
    BlockWeights q = fp_block;
    const auto src = fp_block.linears();
    const auto dst = q.linears();
    for (std::size_t k = 0; k < dst.size(); ++k) *dst[k] = quantize(*src[k], params[k], scheme).weight;
    return q;
}

std::vector<QuantizerParams> init_block_params(const BlockWeights& fp_block, Method method,
                                               const QuantScheme& scheme) {
    std::vector<QuantizerParams> out;
    for (const Tensor* w : fp_block.linears()) out.push_back(init_params(method, *w, scheme));
    return out;
}

std::function<Tensor()> make_objective(ObjectiveKind kind, const BlockProblem& problem,
                                       const std::vector<QuantizerParams>& params) {
    const Model& fp = problem.fp_model;
    const std::size_t i = problem.block_idx;
    if (i >= fp.blocks.size()) throw ContractError("block index " + std::to_string(i) + " out of range");
    if (problem.cache.block_idx != i) {
        throw StateError("activation cache holds inputs of block " + std::to_string(problem.cache.block_idx) +
                         ", not block " + std::to_string(i));
    }
    const Tensor x = problem.cache.x;
    const std::size_t L = problem.cache.seq_len;
    const QuantScheme* scheme = &problem.scheme;
    const std::vector<QuantizerParams>* p = &params;

    if (kind == ObjectiveKind::block_mse) {
        const Tensor target = forward_block(fp.blocks[i], x, fp.config, L).detach();
        return [&fp, i, x, L, target, scheme, p] {
            const BlockWeights q = quantized_block(fp.blocks[i], *p, *scheme);
            return ops::mse_loss(forward_block(q, x, fp.config, L), target, ops::MseReduction::mean_rows);
        };
    }

    // Block i's output continues through the still-FP blocks above it and
    // the frozen final norm and head.
    auto to_logits = [&fp, i, L](Tensor h) {
        for (std::size_t j = i + 1; j < fp.blocks.size(); ++j) h = forward_block(fp.blocks[j], h, fp.config, L);
        return logits_from_hidden(fp, h);
    };
    Tensor target;
    if (problem.teacher_mode == TeacherMode::shared_x) {
        target = to_logits(forward_block(fp.blocks[i], x, fp.config, L)).detach();
    } else {
        if (!problem.teacher.defined() || problem.teacher.rows() != x.rows() ||
            problem.teacher.cols() != fp.config.vocab_size) {
            throw ContractError("full-FP teacher logits missing or mismatched for block " + std::to_string(i));
        }
        target = problem.teacher.detach();
    }
    const bool ce = kind == ObjectiveKind::logit_ce;
    return [&fp, i, x, L, target, scheme, p, to_logits, ce] {
        const BlockWeights q = quantized_block(fp.blocks[i], *p, *scheme);
        const Tensor logits = to_logits(forward_block(q, x, fp.config, L));
        return ce ? ops::cross_entropy(target, logits, true, true)
                  : ops::mse_loss(logits, target, ops::MseReduction::mean_rows);
    };
}

BlockFitResult optimize_block(ObjectiveKind kind, const BlockProblem& problem, std::vector<QuantizerParams>& params,
                              const FitOptions& opt) {
    const auto objective = make_objective(kind, problem, params);
    const auto outcome =
        fit_adam(objective, params, opt, "block " + std::to_string(problem.block_idx) + " (" + to_string(kind) + ")");
    BlockFitResult r;
    r.index = problem.block_idx;
    r.objective = kind;
    r.loss_init = outcome.loss_init;
    r.loss_final = outcome.loss_final;
    r.iters = opt.iters;
    r.lr = opt.lr;
    return r;
}

BlockFitResult optimize_block_mse(const BlockProblem& problem, std::vector<QuantizerParams>& params,
                                  const FitOptions& opt) {
    return optimize_block(ObjectiveKind::block_mse, problem, params, opt);
}

BlockFitResult optimize_final_lfq(const BlockProblem& problem, std::vector<QuantizerParams>& params,
                                  const FitOptions& opt) {
    return optimize_block(ObjectiveKind::logit_ce, problem, params, opt);
}

BlockFitResult optimize_final_logit_mse(const BlockProblem& problem, std::vector<QuantizerParams>& params,
                                        const FitOptions& opt) {
    return optimize_block(ObjectiveKind::logit_mse, problem, params, opt);
}

void to_json(nlohmann::json& j, const PTQReport& r) {
    j = nlohmann::json{{"config", r.config}, {"blocks", r.blocks}};
    if (!r.sweep.empty()) {
        auto sweep = nlohmann::json::array();
        for (const auto& e : r.sweep) {
            nlohmann::json row{{"lr", e.lr}, {"failed", e.failed}};
            if (e.failed) {
                row["error"] = e.error;
            } else {
                row["heldout_loss"] = e.heldout_loss;
            }
            sweep.push_back(row);
        }
        j["sweep"] = sweep;
    }
    if (r.selected_lr) j["selected_lr"] = *r.selected_lr;
}

namespace {

struct Finalized {
    BlockWeights block;
    std::vector<QuantizedWeight> weights;
};

// Detached quantized weights of the fitted params.
Finalized finalize_block(const BlockWeights& fp_block, const std::vector<QuantizerParams>& params,
                         const QuantScheme& scheme) {
    Finalized f{fp_block, {}};
    const auto src = fp_block.linears();
    const auto dst = f.block.linears();
    for (std::size_t k = 0; k < dst.size(); ++k) {
        QuantizedWeight q = quantize(*src[k], params[k], scheme);
        q.weight = q.weight.detach();
        *dst[k] = q.weight;
        f.weights.push_back(std::move(q));
    }
    return f;
}

Model swap_blocks(const Model& fp, const std::vector<BlockWeights>& blocks) {
    Model m = fp.clone();
    for (std::size_t i = 0; i < blocks.size(); ++i) m.blocks[i] = blocks[i].clone();
    return m;
}

void check_calibration(const Model& fp, const CalibrationSet& set) {
    if (set.size() == 0) throw ContractError("quantization needs at least one calibration sample");
    if (set.seq_len > fp.config.max_seq_len) {
        throw ContractError("calibration sequence length " + std::to_string(set.seq_len) + " exceeds the model's " +
                            std::to_string(fp.config.max_seq_len));
    }
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

Pipeline::Pipeline(const Model& fp_model, CalibrationSet set, PTQConfig cfg)
    : fp_(fp_model), set_(std::move(set)), cfg_(std::move(cfg)) {
    cfg_.validate(fp_.blocks.size());
    check_calibration(fp_, set_);
    cache_ = capture_block_inputs(fp_, {}, set_, 0, cfg_.input_mode);
    if (cfg_.teacher == TeacherMode::full_fp) teacher_ = teacher_for(set_);
}

Tensor Pipeline::teacher_for(const CalibrationSet& samples) const {
    return forward_full(fp_, samples.flat(), samples.seq_len).detach();
}

ObjectiveKind Pipeline::scheduled_objective() const {
    if (done()) throw StateError("every block is already quantized");
    return uses_final_objective(next_block(), n_blocks(), cfg_.lfq_k, cfg_.lfq_skip_last) ? cfg_.objective_final
                                                                                           : ObjectiveKind::block_mse;
}

const BlockFitResult& Pipeline::fit_next() {
    if (done()) throw StateError("every block is already quantized");
    const bool final = uses_final_objective(next_block(), n_blocks(), cfg_.lfq_k, cfg_.lfq_skip_last);
    return fit_next(scheduled_objective(), final ? cfg_.lfq_lr() : cfg_.lr);
}

const BlockFitResult& Pipeline::fit_next(ObjectiveKind kind, double lr) {
    if (done()) throw StateError("every block is already quantized");
    const std::size_t i = next_block();
    const auto t0 = Clock::now();
    auto params = init_block_params(fp_.blocks[i], cfg_.method, cfg_.scheme);
    const BlockProblem problem{fp_, i, cache_, cfg_.scheme, cfg_.teacher, teacher_};
    BlockFitResult r = optimize_block(kind, problem, params, FitOptions{cfg_.iters, lr});

    Finalized f = finalize_block(fp_.blocks[i], params, cfg_.scheme);
    finalized_.push_back(f.block);
    qweights_.push_back(std::move(f.weights));
    params_.push_back(std::move(params));

    if (!done()) {
        const bool quantized = cfg_.input_mode == InputMode::quantized_path;
        const BlockWeights& through = quantized ? finalized_.back() : fp_.blocks[i];
        cache_.x = forward_block(through, cache_.x, fp_.config, cache_.seq_len).detach();
        cache_.block_idx = i + 1;
        cache_.prefix_digest =
            quantized ? prefix_digest(finalized_, i + 1) : prefix_digest(fp_.blocks, i + 1);
    }
    if (cfg_.timing) r.seconds = seconds_since(t0);
    results_.push_back(r);
    return results_.back();
}

double Pipeline::evaluate_block(std::size_t block_idx, ObjectiveKind kind, const CalibrationSet& samples) const {
    if (block_idx >= finalized_.size()) {
        throw StateError("block " + std::to_string(block_idx) + " is not finalized yet");
    }
    check_calibration(fp_, samples);
    const ActivationCache cache = capture_block_inputs(fp_, finalized_, samples, block_idx, cfg_.input_mode);
    const Tensor teacher = cfg_.teacher == TeacherMode::full_fp ? teacher_for(samples) : Tensor();
    const BlockProblem problem{fp_, block_idx, cache, cfg_.scheme, cfg_.teacher, teacher};
    return make_objective(kind, problem, params_[block_idx])().item();
}

Model Pipeline::quantized_model() const { return swap_blocks(fp_, finalized_); }

PTQReport Pipeline::report() const { return PTQReport{cfg_, results_, {}, std::nullopt}; }

PTQResult run_pipeline(const Model& fp_model, std::span<const std::uint8_t> corpus, const PTQConfig& cfg) {
    if (!cfg.lr_sweep.empty()) return lr_sweep(fp_model, corpus, cfg);
    cfg.validate(fp_model.blocks.size());
    Pipeline p(fp_model, select_samples(corpus, cfg.samples, cfg.seq_len), cfg);
    while (!p.done()) p.fit_next();
    return PTQResult{p.quantized_model(), p.report(), p.quantized_weights()};
}

PTQResult run_baseline(const Model& fp_model, std::span<const std::uint8_t> corpus, const PTQConfig& cfg) {
    cfg.validate(fp_model.blocks.size());
    const CalibrationSet set = select_samples(corpus, cfg.samples, cfg.seq_len);
    check_calibration(fp_model, set);
    PTQResult out;
    out.report.config = cfg;
    std::vector<BlockWeights> done;
    for (std::size_t i = 0; i < fp_model.blocks.size(); ++i) {
        const auto t0 = Clock::now();
        const ActivationCache cache = capture_block_inputs(fp_model, done, set, i, cfg.input_mode);
        auto params = init_block_params(fp_model.blocks[i], cfg.method, cfg.scheme);
        const BlockProblem problem{fp_model, i, cache, cfg.scheme, TeacherMode::shared_x, Tensor()};
        BlockFitResult r = optimize_block_mse(problem, params, FitOptions{cfg.iters, cfg.lr});
        Finalized f = finalize_block(fp_model.blocks[i], params, cfg.scheme);
        done.push_back(f.block);
        out.qweights.push_back(std::move(f.weights));
        if (cfg.timing) r.seconds = seconds_since(t0);
        out.report.blocks.push_back(r);
    }
    out.model = swap_blocks(fp_model, done);
    return out;
}

PTQResult lr_sweep(const Model& fp_model, std::span<const std::uint8_t> corpus, const PTQConfig& cfg) {
    const std::size_t n = fp_model.blocks.size();
    cfg.validate(n);
    if (cfg.lr_sweep.empty()) throw ContractError("lr sweep needs at least one learning rate");
    if (cfg.samples < 2) throw ContractError("lr sweep needs at least two calibration samples to hold one out");

    std::size_t first_final = n, last_final = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (uses_final_objective(i, n, cfg.lfq_k, cfg.lfq_skip_last)) {
            if (first_final == n) first_final = i;
            last_final = i;
        }
    }
    if (first_final == n) throw ContractError("lr sweep needs at least one block on the final objective");

    const CalibrationSet all = select_samples(corpus, cfg.samples, cfg.seq_len);
    const std::size_t n_hold = std::max<std::size_t>(1, cfg.samples / 10);
    CalibrationSet train, hold;
    train.seq_len = hold.seq_len = cfg.seq_len;
    for (std::size_t s = 0; s < all.size(); ++s) {
        CalibrationSet& dst = s < all.size() - n_hold ? train : hold;
        dst.samples.push_back(all.samples[s]);
        dst.offsets.push_back(all.offsets[s]);
    }

    PTQConfig fit_cfg = cfg;
    fit_cfg.lr_sweep.clear();
    Pipeline base(fp_model, train, fit_cfg);
    while (base.next_block() < first_final) base.fit_next();

    std::vector<SweepEntry> entries;
    std::optional<std::size_t> best;
    for (double lr : cfg.lr_sweep) {
        SweepEntry e;
        e.lr = lr;
        try {
            Pipeline p = base;
            while (p.next_block() <= last_final) {
                const bool final = uses_final_objective(p.next_block(), n, cfg.lfq_k, cfg.lfq_skip_last);
                p.fit_next(p.scheduled_objective(), final ? lr : cfg.lr);
            }
            e.heldout_loss = p.evaluate_block(last_final, cfg.objective_final, hold);
            if (!std::isfinite(e.heldout_loss)) throw NumericError("held-out loss is not finite");
        } catch (const NumericError& err) {
            e.failed = true;
            e.error = err.what();
        }
        if (!e.failed && (!best || e.heldout_loss < entries[*best].heldout_loss)) best = entries.size();
        entries.push_back(e);
    }
    if (!best) throw NumericError("every learning rate in the sweep failed");

    PTQConfig chosen = fit_cfg;
    chosen.final_lr = entries[*best].lr;
    PTQResult out = run_pipeline(fp_model, corpus, chosen);
    out.report.config.lr_sweep = cfg.lr_sweep;
    out.report.sweep = std::move(entries);
    out.report.selected_lr = chosen.final_lr;
    return out;
}

}  // namespace lfq
