#include "lfq/packing.hpp"

#include <cmath>
#include <cstring>

#include "lfq/error.hpp"
#include "lfq/serialize.hpp"

namespace lfq {

namespace {

constexpr std::uint32_t kPackedVersion = 1;

std::size_t check_layout(const QuantScheme& scheme, std::size_t cols) {
    scheme.validate();
    if (scheme.bits > 16) throw ContractError("packing supports at most 16 bits");
    if (cols == 0) return 0;
    return scheme.effective_group(cols);
}

// Index of `name`'s linear within its block, or -1 for other tensors.
int linear_index(const std::string& name) {
    const auto dot = name.rfind('.');
    if (name.rfind("blocks.", 0) != 0 || dot == std::string::npos) return -1;
    const std::string leaf = name.substr(dot + 1);
    for (std::size_t k = 0; k < BlockWeights::kLinears; ++k) {
        if (leaf == BlockWeights::kLinearNames[k]) return static_cast<int>(k);
    }
    return -1;
}

}  // namespace

std::vector<std::int32_t> default_origins(const QuantScheme& scheme, std::size_t rows, std::size_t cols) {
    const std::size_t g = check_layout(scheme, cols);
    const std::size_t n = g ? rows * (cols / g) : 0;
    const std::int32_t o = scheme.clamp == ClampMode::symmetric_signed ? -(std::int32_t{1} << (scheme.bits - 1)) : 0;
    return std::vector<std::int32_t>(n, o);
}

PackedTensor pack(std::span<const std::int32_t> ints, std::size_t rows, std::size_t cols,
                  std::span<const float> rescale, const QuantScheme& scheme, std::span<const std::int32_t> origin) {
    PackedTensor pt;
    pt.scheme = scheme;
    pt.rows = rows;
    pt.cols = cols;
    pt.group = check_layout(scheme, cols);
    if (ints.size() != rows * cols) {
        throw ContractError("pack: " + std::to_string(ints.size()) + " integers for a " + std::to_string(rows) + "x" +
                            std::to_string(cols) + " matrix");
    }
    const std::size_t n_groups = rows * pt.groups();
    if (rescale.size() != n_groups) {
        throw ContractError("pack: " + std::to_string(rescale.size()) + " rescales for " + std::to_string(n_groups) +
                            " groups");
    }
    pt.rescale.assign(rescale.begin(), rescale.end());
    if (origin.empty()) {
        pt.origin = default_origins(scheme, rows, cols);
    } else if (origin.size() != n_groups) {
        throw ContractError("pack: " + std::to_string(origin.size()) + " origins for " + std::to_string(n_groups) +
                            " groups");
    } else {
        pt.origin.assign(origin.begin(), origin.end());
    }

    const auto bits = static_cast<unsigned>(scheme.bits);
    const std::int64_t top = (std::int64_t{1} << bits) - 1;
    const std::size_t rb = pt.row_bytes();
    pt.payload.assign(rb * rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        std::uint8_t* row = pt.payload.data() + r * rb;
        std::size_t bit = 0;
        for (std::size_t c = 0; c < cols; ++c, bit += bits) {
            const std::size_t i = r * cols + c;
            const std::int64_t u = std::int64_t{ints[i]} - pt.origin[r * pt.groups() + c / pt.group];
            if (u < 0 || u > top) {
                throw ContractError("pack: integer " + std::to_string(ints[i]) + " at index " + std::to_string(i) +
                                    " is outside its " + std::to_string(bits) + "-bit window");
            }
            for (unsigned k = 0; k < bits; ++k) {
                if ((u >> k) & 1) row[(bit + k) / 8] |= static_cast<std::uint8_t>(1u << ((bit + k) % 8));
            }
        }
    }
    return pt;
}

PackedTensor pack(const QuantizedWeight& q, std::size_t rows, std::size_t cols, const QuantScheme& scheme) {
    std::vector<std::int32_t> ints(q.codes.size());
    for (std::size_t i = 0; i < ints.size(); ++i) {
        const float c = q.codes[i];
        if (c != std::nearbyint(c)) throw ContractError("pack: code at index " + std::to_string(i) + " is not integral");
        ints[i] = static_cast<std::int32_t>(c);
    }
    return pack(ints, rows, cols, q.rescale, scheme, q.origin);
}

UnpackedTensor unpack(const PackedTensor& pt) {
    const auto bits = static_cast<unsigned>(pt.scheme.bits);
    const std::size_t rb = pt.row_bytes();
    if (pt.payload.size() != rb * pt.rows) {
        throw FormatError("unpack: payload holds " + std::to_string(pt.payload.size()) + " bytes, expected " +
                          std::to_string(rb * pt.rows));
    }
    const std::size_t n_groups = pt.rows * pt.groups();
    if (pt.rescale.size() != n_groups || pt.origin.size() != n_groups) {
        throw FormatError("unpack: group metadata does not match the extents");
    }
    UnpackedTensor out{std::vector<std::int32_t>(pt.rows * pt.cols), pt.rescale, pt.origin};
    for (std::size_t r = 0; r < pt.rows; ++r) {
        const std::uint8_t* row = pt.payload.data() + r * rb;
        std::size_t bit = 0;
        for (std::size_t c = 0; c < pt.cols; ++c, bit += bits) {
            std::uint32_t u = 0;
            for (unsigned k = 0; k < bits; ++k) u |= ((row[(bit + k) / 8] >> ((bit + k) % 8)) & 1u) << k;
            out.ints[r * pt.cols + c] = static_cast<std::int32_t>(u) + pt.origin[r * pt.groups() + c / pt.group];
        }
    }
    return out;
}

Tensor dequantize(const PackedTensor& pt) {
    const UnpackedTensor u = unpack(pt);
    std::vector<float> w(u.ints.size());
    for (std::size_t r = 0; r < pt.rows; ++r) {
        for (std::size_t c = 0; c < pt.cols; ++c) {
            const std::size_t i = r * pt.cols + c;
            w[i] = u.rescale[r * pt.groups() + c / pt.group] * static_cast<float>(u.ints[i]);
        }
    }
    return Tensor::from({pt.rows, pt.cols}, std::move(w));
}

std::vector<float> dequant_matvec(const PackedTensor& pt, std::span<const float> x) {
    if (x.size() != pt.cols) {
        throw ContractError("dequant_matvec: vector of length " + std::to_string(x.size()) + " for " +
                            std::to_string(pt.cols) + " columns");
    }
    const auto bits = static_cast<unsigned>(pt.scheme.bits);
    const std::size_t rb = pt.row_bytes();
    if (pt.payload.size() != rb * pt.rows) throw FormatError("dequant_matvec: payload length mismatch");
    const std::uint32_t mask = (std::uint32_t{1} << bits) - 1;
    std::vector<float> y(pt.rows);
    for (std::size_t r = 0; r < pt.rows; ++r) {
        const std::uint8_t* row = pt.payload.data() + r * rb;
        double acc = 0;
        std::size_t bit = 0;
        for (std::size_t c = 0; c < pt.cols; ++c, bit += bits) {
            // Up to 16 bits starting anywhere in a byte span at most 3 bytes.
            std::uint32_t window = 0;
            const std::size_t b0 = bit / 8;
            for (std::size_t k = 0; k < 3 && b0 + k < rb; ++k) window |= std::uint32_t{row[b0 + k]} << (8 * k);
            const auto u = static_cast<std::int32_t>((window >> (bit % 8)) & mask);
            const std::size_t g = r * pt.groups() + c / pt.group;
            const float w = pt.rescale[g] * static_cast<float>(u + pt.origin[g]);
            acc += double(w) * double(x[c]);
        }
        y[r] = static_cast<float>(acc);
    }
    return y;
}

std::vector<std::uint8_t> packed_model_bytes(const Model& q_model,
                                             const std::vector<std::vector<QuantizedWeight>>& qweights,
                                             Method method, const QuantScheme& scheme) {
    if (qweights.size() != q_model.blocks.size()) {
        throw ContractError("packing needs quantized weights for all " + std::to_string(q_model.blocks.size()) +
                            " blocks, got " + std::to_string(qweights.size()));
    }
    io::Writer w;
    w.str("LFQP");
    w.u32(kPackedVersion);
    const nlohmann::json header{{"config", q_model.config},
                                {"method", to_string(method)},
                                {"bits", scheme.bits},
                                {"group_size", scheme.group_size},
                                {"clamp", to_string(scheme.clamp)}};
    const std::string text = header.dump();
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.str(text);

    for (const auto& [name, t] : q_model.named_tensors()) {
        const int k = linear_index(name);
        if (k < 0) {
            w.u8(0);
            w.tensor(name, t);
            continue;
        }
        const std::size_t block = std::stoul(name.substr(7));
        const QuantizedWeight& qw = qweights.at(block).at(static_cast<std::size_t>(k));
        const PackedTensor pt = pack(qw, t.rows(), t.cols(), scheme);
        w.u8(1);
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.str(name);
        w.u32(static_cast<std::uint32_t>(pt.rows));
        w.u32(static_cast<std::uint32_t>(pt.cols));
        w.u32(static_cast<std::uint32_t>(pt.group));
        w.f32s(pt.rescale);
        for (auto o : pt.origin) w.i32(o);
        w.bytes(pt.payload.data(), pt.payload.size());
    }
    return w.take();
}

PackedModel parse_packed_model(std::span<const std::uint8_t> data, const std::string& what) {
    io::Reader r(data, what);
    r.expect_magic("LFQP");
    const auto version = r.u32();
    if (version != kPackedVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
    PackedModel pm;
    ModelConfig config;
    try {
        const auto header = nlohmann::json::parse(r.str(r.u32()));
        config = header.at("config").get<ModelConfig>();
        pm.method = parse_method(header.at("method").get<std::string>());
        pm.scheme.bits = header.at("bits").get<int>();
        pm.scheme.group_size = header.at("group_size").get<std::size_t>();
        pm.scheme.clamp = parse_clamp(header.at("clamp").get<std::string>());
        pm.scheme.validate();
        config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": malformed header: " + e.what());
    } catch (const ContractError& e) {
        throw FormatError(what + ": " + e.what());
    }

    // Rebuild the dense tensors as a checkpoint so shapes are validated once.
    io::Writer ckpt;
    ckpt.str("LFQ1");
    ckpt.u32(1);
    const std::string cfg = nlohmann::json(config).dump();
    ckpt.u32(static_cast<std::uint32_t>(cfg.size()));
    ckpt.str(cfg);
    const Model shape_ref = init_model(config, 0);
    for (const auto& [name, ref] : shape_ref.named_tensors()) {
        const auto kind = r.u8();
        if (kind == 0) {
            ckpt.tensor(name, r.tensor(name));
            continue;
        }
        if (kind != 1 || linear_index(name) < 0) {
            throw FormatError(what + ": unexpected record kind " + std::to_string(kind) + " for '" + name + "'");
        }
        const std::string stored = r.str(r.u16());
        if (stored != name) throw FormatError(what + ": expected tensor '" + name + "', found '" + stored + "'");
        PackedTensor pt;
        pt.scheme = pm.scheme;
        pt.rows = r.u32();
        pt.cols = r.u32();
        pt.group = r.u32();
        if (pt.rows != ref.rows() || pt.cols != ref.cols() || pt.group != pm.scheme.effective_group(pt.cols)) {
            throw FormatError(what + ": packed tensor '" + name + "' has unexpected extents");
        }
        const std::size_t n_groups = pt.rows * pt.groups();
        pt.rescale = r.f32s(n_groups);
        pt.origin.resize(n_groups);
        for (auto& o : pt.origin) o = r.i32();
        pt.payload.resize(pt.row_bytes() * pt.rows);
        r.bytes(pt.payload.data(), pt.payload.size());
        pm.packed_bytes += pt.payload.size() + 8 * n_groups;
        ckpt.tensor(name, dequantize(pt));
        pm.linears.push_back(std::move(pt));
    }
    r.expect_end();
    pm.model = parse_checkpoint(ckpt.take(), what);
    return pm;
}

void save_packed_model(const std::filesystem::path& path, const Model& q_model,
                       const std::vector<std::vector<QuantizedWeight>>& qweights, Method method,
                       const QuantScheme& scheme) {
    io::write_file(path, packed_model_bytes(q_model, qweights, method, scheme));
}

PackedModel load_packed_model(const std::filesystem::path& path) {
    return parse_packed_model(io::read_file(path), path.string());
}

}  // namespace lfq
