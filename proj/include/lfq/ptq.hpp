#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfq/calibration.hpp"
#include "lfq/model.hpp"
#include "lfq/quantizers.hpp"

namespace lfq {

enum class ObjectiveKind { block_mse, logit_mse, logit_ce };

// Where the final-objective target logits come from: the FP block applied to
// the same input X as the candidate, or a complete FP forward.
enum class TeacherMode { shared_x, full_fp };

std::string to_string(ObjectiveKind k);
ObjectiveKind parse_objective(const std::string& s);
std::string to_string(TeacherMode t);
TeacherMode parse_teacher(const std::string& s);

double default_lr(Method m);

struct PTQConfig {
    Method method = Method::flexround;
    QuantScheme scheme = default_scheme(Method::flexround, 4, 128);
    ObjectiveKind objective_final = ObjectiveKind::logit_ce;
    std::size_t lfq_k = 1;
    bool lfq_skip_last = false;
    std::size_t iters = 500;
    double lr = default_lr(Method::flexround);
    double final_lr = 0;  // lr for final-objective blocks; 0 means `lr`
    std::vector<double> lr_sweep;
    std::uint64_t seed = 0;
    InputMode input_mode = InputMode::quantized_path;
    TeacherMode teacher = TeacherMode::shared_x;
    std::size_t samples = 128;
    std::size_t seq_len = 64;
    bool timing = false;  // record wall time in reports (breaks byte-identity)

    // Defaults for `method`, including its clamp mode and learning rate.
    static PTQConfig for_method(Method method, int bits = 4, std::size_t group_size = 128);

    void validate(std::size_t n_blocks) const;
    double lfq_lr() const { return final_lr > 0 ? final_lr : lr; }
};

void to_json(nlohmann::json& j, const PTQConfig& c);
void from_json(const nlohmann::json& j, PTQConfig& c);

// Whether block i (0-based) of n is fitted with the final objective: the
// topmost lfq_k blocks, minus the last one when skip_last is set.
bool uses_final_objective(std::size_t i, std::size_t n_blocks, std::size_t lfq_k, bool skip_last);
std::vector<ObjectiveKind> objective_schedule(std::size_t n_blocks, std::size_t lfq_k, bool skip_last,
                                              ObjectiveKind final_kind);

struct BlockFitResult {
    std::size_t index = 0;
    ObjectiveKind objective = ObjectiveKind::block_mse;
    double loss_init = 0;
    double loss_final = 0;  // minimum over all evaluated iterates
    std::size_t iters = 0;
    double lr = 0;
    double seconds = 0;
};

void to_json(nlohmann::json& j, const BlockFitResult& r);

struct FitOptions {
    std::size_t iters = 500;
    double lr = 1e-3;
};

// Adam over the trainable tensors of `params`, evaluating `loss_fn` at every
// iterate (iters + 1 evaluations). On return `params` hold the best iterate.
// A non-finite loss throws NumericError naming `what` and the step.
struct FitOutcome {
    double loss_init = 0;
    double loss_final = 0;
};
FitOutcome fit_adam(const std::function<Tensor()>& loss_fn, std::vector<QuantizerParams>& params,
                    const FitOptions& opt, const std::string& what);

// The block with every linear replaced by its fake-quantized weight; the
// weights stay inside the graph so losses reach the params.
BlockWeights quantized_block(const BlockWeights& fp_block, std::span<const QuantizerParams> params,
                             const QuantScheme& scheme);
std::vector<QuantizerParams> init_block_params(const BlockWeights& fp_block, Method method,
                                               const QuantScheme& scheme);

// Everything one block's objective needs. `teacher` is the full-FP logits
// for the cached samples and is only read in full_fp mode.
struct BlockProblem {
    const Model& fp_model;
    std::size_t block_idx;
    const ActivationCache& cache;
    const QuantScheme& scheme;
    TeacherMode teacher_mode = TeacherMode::shared_x;
    Tensor teacher;
};

// Returns a closure computing the objective for the current params. Targets
// are computed once, detached, when the closure is built.
std::function<Tensor()> make_objective(ObjectiveKind kind, const BlockProblem& problem,
                                       const std::vector<QuantizerParams>& params);

BlockFitResult optimize_block_mse(const BlockProblem& problem, std::vector<QuantizerParams>& params,
                                  const FitOptions& opt);
BlockFitResult optimize_final_lfq(const BlockProblem& problem, std::vector<QuantizerParams>& params,
                                  const FitOptions& opt);
BlockFitResult optimize_final_logit_mse(const BlockProblem& problem, std::vector<QuantizerParams>& params,
                                        const FitOptions& opt);
BlockFitResult optimize_block(ObjectiveKind kind, const BlockProblem& problem, std::vector<QuantizerParams>& params,
                              const FitOptions& opt);

struct SweepEntry {
    double lr = 0;
    bool failed = false;
    std::string error;
    double heldout_loss = 0;
};

struct PTQReport {
    PTQConfig config;
    std::vector<BlockFitResult> blocks;
    std::vector<SweepEntry> sweep;
    std::optional<double> selected_lr;
};

void to_json(nlohmann::json& j, const PTQReport& r);

// Sequential block-wise quantization state. Copyable, so a shared prefix of
// fitted blocks can branch into several continuations.
class Pipeline {
   public:
    Pipeline(const Model& fp_model, CalibrationSet set, PTQConfig cfg);

    std::size_t n_blocks() const { return fp_.blocks.size(); }
    std::size_t next_block() const { return finalized_.size(); }
    bool done() const { return next_block() == n_blocks(); }
    ObjectiveKind scheduled_objective() const;

    // Fits the next block with its scheduled objective, or an explicit one.
    const BlockFitResult& fit_next();
    const BlockFitResult& fit_next(ObjectiveKind kind, double lr);

    // Objective value of a finalized block on other samples (inputs are
    // propagated through this pipeline's finalized prefix).
    double evaluate_block(std::size_t block_idx, ObjectiveKind kind, const CalibrationSet& samples) const;

    const ActivationCache& cache() const { return cache_; }
    const std::vector<BlockWeights>& finalized() const { return finalized_; }
    const std::vector<std::vector<QuantizedWeight>>& quantized_weights() const { return qweights_; }
    const std::vector<BlockFitResult>& results() const { return results_; }
    const PTQConfig& config() const { return cfg_; }

    // FP model with every finalized block swapped in.
    Model quantized_model() const;
    PTQReport report() const;

   private:
    Tensor teacher_for(const CalibrationSet& samples) const;

    Model fp_;
    CalibrationSet set_;
    PTQConfig cfg_;
    ActivationCache cache_;
    Tensor teacher_;
    std::vector<BlockWeights> finalized_;
    std::vector<std::vector<QuantizerParams>> params_;
    std::vector<std::vector<QuantizedWeight>> qweights_;
    std::vector<BlockFitResult> results_;
};

struct PTQResult {
    Model model;
    PTQReport report;
    std::vector<std::vector<QuantizedWeight>> qweights;
};

// Runs the schedule over every block. A nonempty cfg.lr_sweep delegates to
// lr_sweep.
PTQResult run_pipeline(const Model& fp_model, std::span<const std::uint8_t> corpus, const PTQConfig& cfg);

// Every block fitted with block-MSE at cfg.lr, without any schedule or
// final-objective machinery: the underlying method on its own.
PTQResult run_baseline(const Model& fp_model, std::span<const std::uint8_t> corpus, const PTQConfig& cfg);

// Fits the final-objective blocks once per lr on the first 90% of the
// calibration samples and scores the last of them on the held-out 10%. The
// lowest held-out loss wins (failed candidates never do); the returned
// result is a full run with that lr.
PTQResult lr_sweep(const Model& fp_model, std::span<const std::uint8_t> corpus, const PTQConfig& cfg);

}  // namespace lfq
