#include "lfq/calibration.hpp"

#include <cstring>

#include "lfq/error.hpp"
#include "lfq/serialize.hpp"

namespace lfq {

std::vector<std::int32_t> CalibrationSet::flat() const {
    std::vector<std::int32_t> out;
    out.reserve(samples.size() * seq_len);
    for (const auto& s : samples) out.insert(out.end(), s.begin(), s.end());
    return out;
}

CalibrationSet select_samples(std::span<const std::uint8_t> corpus, std::size_t n_samples, std::size_t seq_len) {
    if (seq_len == 0) throw ContractError("calibration sequence length must be positive");
    const std::size_t need = n_samples * seq_len;
    if (corpus.size() < need) {
        throw ContractError("calibration corpus too small: " + std::to_string(n_samples) + " samples of " +
                            std::to_string(seq_len) + " tokens need " + std::to_string(need) + " bytes, have " +
                            std::to_string(corpus.size()));
    }
    CalibrationSet set;
    set.seq_len = seq_len;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const std::size_t off = i * seq_len;
        set.offsets.push_back(off);
        set.samples.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                                 corpus.begin() + static_cast<std::ptrdiff_t>(off + seq_len));
    }
    return set;
}

CalibrationSet select_samples(const std::filesystem::path& corpus_path, std::size_t n_samples, std::size_t seq_len) {
    return select_samples(io::read_file(corpus_path), n_samples, seq_len);
}

std::string to_string(InputMode m) { return m == InputMode::fp_path ? "fp" : "quantized"; }

InputMode parse_input_mode(const std::string& s) {
    if (s == "fp" || s == "fp_path") return InputMode::fp_path;
    if (s == "quantized" || s == "quantized_path") return InputMode::quantized_path;
    throw ContractError("unknown input mode '" + s + "' (expected fp or quantized)");
}

Tensor ActivationCache::sample(std::size_t i) const {
    if (i >= n_samples()) throw ContractError("sample " + std::to_string(i) + " out of range");
    const std::size_t d = x.cols();
    const auto v = x.data();
    return Tensor::from({seq_len, d}, std::vector<float>(v.begin() + static_cast<std::ptrdiff_t>(i * seq_len * d),
                                                         v.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq_len * d)));
}

std::uint64_t prefix_digest(std::span<const BlockWeights> blocks, std::size_t count) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const Tensor& t) {
        for (float f : t.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, sizeof bits);
            for (int k = 0; k < 4; ++k) {
                h ^= (bits >> (8 * k)) & 0xffu;
                h *= 0x100000001b3ull;
            }
        }
    };
    for (std::size_t i = 0; i < count && i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        mix(b.norm1);
        for (const Tensor* w : b.linears()) mix(*w);
        mix(b.norm2);
    }
    return h;
}

ActivationCache capture_block_inputs(const Model& fp_model, std::span<const BlockWeights> quantized_prefix,
                                     const CalibrationSet& set, std::size_t block_idx, InputMode mode) {
    if (block_idx >= fp_model.blocks.size()) {
        throw ContractError("block index " + std::to_string(block_idx) + " out of range for " +
                            std::to_string(fp_model.blocks.size()) + " blocks");
    }
    if (set.size() == 0) throw ContractError("capture needs at least one calibration sample");
    std::span<const BlockWeights> path = fp_model.blocks;
    if (mode == InputMode::quantized_path) {
        if (quantized_prefix.size() < block_idx) {
            throw StateError("quantized-path inputs for block " + std::to_string(block_idx) + " need " +
                             std::to_string(block_idx) + " finalized blocks, have " +
                             std::to_string(quantized_prefix.size()));
        }
        path = quantized_prefix;
    }
    const auto tokens = set.flat();
    Tensor x = embed(fp_model, tokens, set.seq_len);
    for (std::size_t i = 0; i < block_idx; ++i) x = forward_block(path[i], x, fp_model.config, set.seq_len);

    ActivationCache cache;
    cache.block_idx = block_idx;
    cache.seq_len = set.seq_len;
    cache.mode = mode;
    cache.prefix_digest = prefix_digest(path, block_idx);
    cache.x = x.detach();
    return cache;
}

bool cache_matches(const ActivationCache& cache, std::span<const BlockWeights> blocks) {
    return blocks.size() >= cache.block_idx && prefix_digest(blocks, cache.block_idx) == cache.prefix_digest;
}

std::vector<std::uint8_t> cache_bytes(const ActivationCache& cache) {
    io::Writer w;
    w.str("LFQA");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(cache.block_idx));
    w.u32(static_cast<std::uint32_t>(cache.seq_len));
    w.u8(cache.mode == InputMode::fp_path ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(cache.prefix_digest & 0xffffffffu));
    w.u32(static_cast<std::uint32_t>(cache.prefix_digest >> 32));
    w.tensor("x", cache.x);
    return w.take();
}

ActivationCache parse_cache(std::span<const std::uint8_t> data, const std::string& what) {
    io::Reader r(data, what);
    r.expect_magic("LFQA");
    const auto version = r.u32();
    if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
    ActivationCache c;
    c.block_idx = r.u32();
    c.seq_len = r.u32();
    const auto mode = r.u8();
    if (mode > 1) throw FormatError(what + ": bad input mode byte " + std::to_string(mode));
    c.mode = mode == 0 ? InputMode::fp_path : InputMode::quantized_path;
    const std::uint64_t lo = r.u32();
    const std::uint64_t hi = r.u32();
    c.prefix_digest = lo | (hi << 32);
    c.x = r.tensor("x");
    if (c.x.rank() != 2 || c.seq_len == 0 || c.x.rows() % c.seq_len != 0) {
        throw FormatError(what + ": activation tensor " + shape_str(c.x.shape()) + " does not match sequence length " +
                          std::to_string(c.seq_len));
    }
    r.expect_end();
    return c;
}

void save_cache(const ActivationCache& cache, const std::filesystem::path& path) {
    io::write_file(path, cache_bytes(cache));
}

ActivationCache load_cache(const std::filesystem::path& path) {
    return parse_cache(io::read_file(path), path.string());
}

}  // namespace lfq
