#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lfq/model.hpp"

namespace lfq {

// Non-overlapping windows of seq_len tokens, stacked; the layout every
// metric below consumes. A trailing partial window is dropped.
struct EvalSet {
    std::vector<std::int32_t> tokens;
    std::size_t seq_len = 0;

    std::size_t n_windows() const { return seq_len ? tokens.size() / seq_len : 0; }
};

// Up to max_windows windows (0 = as many as fit) starting at byte `offset`.
EvalSet eval_windows(std::span<const std::uint8_t> corpus, std::size_t seq_len, std::size_t offset = 0,
                     std::size_t max_windows = 0);

// exp(mean next-token NLL), teacher-forced within each window of the corpus.
// A trailing window of at least two bytes is included.
double perplexity(const Model& model, std::span<const std::uint8_t> corpus, std::size_t seq_len);

struct TokenKL {
    double mean = 0;
    std::vector<double> per_position;  // one entry per token, window-major
};

// KL(softmax(fp) || softmax(q)) per position, computed in log space.
TokenKL token_kl(const Model& fp, const Model& q, const EvalSet& set);

// Fraction of positions whose argmax logits agree (lowest id wins ties).
double top1_agreement(const Model& fp, const Model& q, const EvalSet& set);

using TopK = std::vector<std::pair<std::int32_t, double>>;  // (token, probability), descending

TopK top_k(std::span<const float> logits, std::size_t k);

struct DivergenceRecord {
    std::size_t prompt_id = 0;
    bool diverged = false;
    std::size_t position = 0;  // generated-token index of the first mismatch
    std::int32_t fp_token = 0;
    std::int32_t q_token = 0;
    TopK fp_top5;
    TopK q_top5;
    double kl = 0;
};

// Both models decode greedily from each prompt until the first top-1
// mismatch or until the context reaches max_len tokens.
std::vector<DivergenceRecord> greedy_divergence(const Model& fp, const Model& q,
                                                const std::vector<std::vector<std::int32_t>>& prompts,
                                                std::size_t max_len);

struct SamplerOptions {
    double temperature = 1.0;  // 0 means greedy
    double top_p = 1.0;
    std::uint64_t seed = 0;
};

// Seeded temperature / nucleus sampling; returns prompt + generated tokens.
std::vector<std::int32_t> sample_decode(const Model& model, std::vector<std::int32_t> prompt, std::size_t max_len,
                                        const SamplerOptions& opt);

inline const std::vector<std::int32_t> kDefaultMarkers{'.', ',', '\n'};

struct MarkerEntry {
    std::size_t position = 0;
    double fp_mass = 0;
    double q_mass = 0;
    double gap = 0;
};

struct MarkerReport {
    std::vector<MarkerEntry> entries;
    double mean_gap = 0;
};

// Probability mass both models put on the marker set at every position where
// the FP top-1 is a marker.
MarkerReport marker_token_report(const Model& fp, const Model& q, const EvalSet& set,
                                 const std::vector<std::int32_t>& markers = kDefaultMarkers);

struct FidelityReport {
    double perplexity_fp = 0;
    double perplexity_q = 0;
    double mean_kl = 0;
    double top1_agreement = 0;
    std::size_t positions = 0;
    std::vector<double> kl_series;
    MarkerReport markers;
    std::vector<DivergenceRecord> divergences;
};

struct FidelityOptions {
    std::size_t seq_len = 64;
    std::size_t offset = 0;
    std::size_t max_windows = 0;
    std::size_t prompts = 4;       // greedy-divergence prompts, drawn from the windows
    std::size_t prompt_len = 8;
    std::vector<std::int32_t> markers = kDefaultMarkers;
};

FidelityReport evaluate_fidelity(const Model& fp, const Model& q, std::span<const std::uint8_t> corpus,
                                 const FidelityOptions& opt);

void to_json(nlohmann::json& j, const DivergenceRecord& r);
void to_json(nlohmann::json& j, const MarkerReport& r);
// The per-position KL series is left to the CSV export.
void to_json(nlohmann::json& j, const FidelityReport& r);
// position,kl rows for external plotting.
std::string kl_series_csv(const FidelityReport& r);

struct ExampleCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct VerifyReport {
    std::vector<ExampleCheck> checks;
    bool passed() const;
};

// Recomputes the two-token worked examples (head products, argmax flip,
// logit MSE, probability-mode cross-entropy and the preference inversion) in
// double, cross-checked against the float ops.
VerifyReport verify_worked_examples();

void to_json(nlohmann::json& j, const VerifyReport& r);

}  // namespace lfq
