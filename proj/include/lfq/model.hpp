#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lfq/tensor.hpp"

namespace lfq {

struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t n_blocks = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 64;
    float norm_eps = 1e-5f;

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Pre-norm block: h = x + Wo attn(norm1(x)); out = h + Wdown silu(Wup norm2(h)).
// Linear weights are stored [out x in].
struct BlockWeights {
    Tensor norm1, wq, wk, wv, wo, norm2, wup, wdown;

    static constexpr std::size_t kLinears = 6;
    static constexpr std::array<const char*, kLinears> kLinearNames = {"wq", "wk", "wv", "wo", "wup", "wdown"};

    std::array<Tensor*, kLinears> linears() { return {&wq, &wk, &wv, &wo, &wup, &wdown}; }
    std::array<const Tensor*, kLinears> linears() const { return {&wq, &wk, &wv, &wo, &wup, &wdown}; }
    BlockWeights clone() const;
};

struct Model {
    ModelConfig config;
    Tensor tok_emb;     // [V x d]
    Tensor pos_emb;     // [L_max x d]
    std::vector<BlockWeights> blocks;
    Tensor final_norm;  // [d]
    Tensor head;        // [d x V]

    // Deep copy; no tensor is shared with the original.
    Model clone() const;
    // (name, tensor) pairs in checkpoint order.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::vector<Tensor> parameters() const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

Model init_model(const ModelConfig& config, std::uint64_t seed);

std::vector<std::int32_t> tokenize(std::string_view text);
std::string detokenize(std::span<const std::int32_t> ids);

// Token + position embedding for a stack of sequences of length seq_len.
Tensor embed(const Model& model, std::span<const std::int32_t> tokens, std::size_t seq_len);

// x is [n_seq*seq_len x d]; attention never looks across sequences.
Tensor forward_block(const BlockWeights& block, const Tensor& x, const ModelConfig& config, std::size_t seq_len);

// rmsnorm(H) W_Head. The head and final norm are never quantized.
Tensor logits_from_hidden(const Model& model, const Tensor& h);

// seq_len 0 treats all tokens as one sequence.
Tensor forward_full(const Model& model, std::span<const std::int32_t> tokens, std::size_t seq_len = 0);

std::vector<std::uint8_t> checkpoint_bytes(const Model& model);
Model parse_checkpoint(std::span<const std::uint8_t> data, const std::string& what = "checkpoint");
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
    std::size_t steps = 2000;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    std::size_t batch = 8;
    std::size_t seq_len = 64;
    double clip_norm = 1.0;
};

struct TrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> losses;  // per step
};

inline constexpr std::size_t kMinTrainCorpus = 64 * 1024;

// Next-token training with Adam on random windows of the corpus.
TrainResult train_toy(Model& model, std::span<const std::uint8_t> corpus, const TrainOptions& options);

// Pseudo-English text with punctuation and line breaks, fully determined by
// the seed. Used when no corpus file is supplied.
std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed);

}  // namespace lfq
