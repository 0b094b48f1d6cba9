#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lfq/model.hpp"

namespace lfq {

// Contiguous, in-order windows from the start of a corpus.
struct CalibrationSet {
    std::size_t seq_len = 0;
    std::vector<std::vector<std::int32_t>> samples;
    std::vector<std::size_t> offsets;  // byte offset of each sample

    std::size_t size() const { return samples.size(); }
    // All samples concatenated, the layout the batched forward expects.
    std::vector<std::int32_t> flat() const;
};

CalibrationSet select_samples(std::span<const std::uint8_t> corpus, std::size_t n_samples, std::size_t seq_len);
CalibrationSet select_samples(const std::filesystem::path& corpus_path, std::size_t n_samples, std::size_t seq_len);

enum class InputMode { fp_path, quantized_path };

std::string to_string(InputMode m);
InputMode parse_input_mode(const std::string& s);

// Inputs to one block (0-based; block 0 sees the embedding output) for every
// calibration sample, stacked as [n_samples*seq_len x d].
struct ActivationCache {
    std::size_t block_idx = 0;
    std::size_t seq_len = 0;
    InputMode mode = InputMode::fp_path;
    std::uint64_t prefix_digest = 0;  // digest of the blocks the inputs went through
    Tensor x;

    std::size_t n_samples() const { return seq_len ? x.rows() / seq_len : 0; }
    Tensor sample(std::size_t i) const;
};

// FNV-1a over the raw bytes of every weight in blocks[0, count).
std::uint64_t prefix_digest(std::span<const BlockWeights> blocks, std::size_t count);

// fp_path runs the FP model's blocks before block_idx; quantized_path runs
// the finalized quantized blocks instead and needs one for every earlier
// block (StateError otherwise).
ActivationCache capture_block_inputs(const Model& fp_model, std::span<const BlockWeights> quantized_prefix,
                                     const CalibrationSet& set, std::size_t block_idx, InputMode mode);

// True when the cache was computed through exactly these blocks.
bool cache_matches(const ActivationCache& cache, std::span<const BlockWeights> blocks);

// Spill format: "LFQA", u32 version, u32 block, u32 seq_len, u8 mode,
// u64 digest (two u32 halves, low first), then one framed tensor "x".
std::vector<std::uint8_t> cache_bytes(const ActivationCache& cache);
ActivationCache parse_cache(std::span<const std::uint8_t> data, const std::string& what = "activation cache");
void save_cache(const ActivationCache& cache, const std::filesystem::path& path);
ActivationCache load_cache(const std::filesystem::path& path);

}  // namespace lfq
