#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lfq/model.hpp"
#include "lfq/quantizers.hpp"

namespace lfq {

// b-bit integers stored as offsets from their group's window origin in a
// little-endian bitstream (low bits first), each row padded to a byte.
// Symmetric schemes use origin -2^(b-1), i.e. offset-binary.
struct PackedTensor {
    QuantScheme scheme;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group = 0;  // effective group size
    std::vector<std::uint8_t> payload;
    std::vector<float> rescale;        // [rows x groups]
    std::vector<std::int32_t> origin;  // [rows x groups]

    std::size_t groups() const { return group ? cols / group : 0; }
    std::size_t row_bytes() const { return (cols * static_cast<std::size_t>(scheme.bits) + 7) / 8; }
};

struct UnpackedTensor {
    std::vector<std::int32_t> ints;
    std::vector<float> rescale;
    std::vector<std::int32_t> origin;
};

// The default origin of every group: -2^(b-1) for symmetric schemes, 0 for
// asymmetric ones.
std::vector<std::int32_t> default_origins(const QuantScheme& scheme, std::size_t rows, std::size_t cols);

PackedTensor pack(std::span<const std::int32_t> ints, std::size_t rows, std::size_t cols,
                  std::span<const float> rescale, const QuantScheme& scheme,
                  std::span<const std::int32_t> origin = {});
PackedTensor pack(const QuantizedWeight& q, std::size_t rows, std::size_t cols, const QuantScheme& scheme);

UnpackedTensor unpack(const PackedTensor& pt);

// rescale * int for every entry, in the quantizers' float arithmetic.
Tensor dequantize(const PackedTensor& pt);

// y = W x with W decoded a row at a time; accumulates in double.
std::vector<float> dequant_matvec(const PackedTensor& pt, std::span<const float> x);

// Packed model file: "LFQP", u32 version, u32 header length, JSON header
// (model config, method, scheme), then every checkpoint tensor in order:
// linears as packed records, the rest as raw framed tensors.
std::vector<std::uint8_t> packed_model_bytes(const Model& q_model,
                                             const std::vector<std::vector<QuantizedWeight>>& qweights,
                                             Method method, const QuantScheme& scheme);

struct PackedModel {
    Model model;  // dequantized
    Method method = Method::flexround;
    QuantScheme scheme;
    std::vector<PackedTensor> linears;  // block-major, BlockWeights::linears() order
    std::size_t packed_bytes = 0;       // payload + rescale + origin bytes of the linears
};

PackedModel parse_packed_model(std::span<const std::uint8_t> data, const std::string& what = "packed model");
void save_packed_model(const std::filesystem::path& path, const Model& q_model,
                       const std::vector<std::vector<QuantizedWeight>>& qweights, Method method,
                       const QuantScheme& scheme);
PackedModel load_packed_model(const std::filesystem::path& path);

}  // namespace lfq
