#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "lfq/error.hpp"
#include "lfq/packing.hpp"
#include "lfq/ptq.hpp"

using namespace lfq;

namespace {

QuantScheme scheme(int bits, std::size_t g, ClampMode clamp = ClampMode::asymmetric_unsigned) {
    QuantScheme s;
    s.bits = bits;
    s.group_size = g;
    s.clamp = clamp;
    return s;
}

Tensor random_weight(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 0.05f);
    std::vector<float> w(rows * cols);
    for (auto& v : w) v = n(rng);
    return Tensor::from({rows, cols}, std::move(w));
}

}  // namespace

TEST_CASE("bit layout is low bits first") {
    const std::vector<std::int32_t> ints{0, 1, 2, 3};
    const std::vector<float> rescale{1.0f};
    const auto pt = pack(ints, 1, 4, rescale, scheme(4, 0));
    CHECK(pt.payload == std::vector<std::uint8_t>{0x10, 0x32});

    // Eight 3-bit values fill exactly three bytes; each row pads to a byte.
    const std::vector<std::int32_t> eight(16, 7);
    const auto p3 = pack(eight, 2, 8, std::vector<float>(2, 1.0f), scheme(3, 0));
    CHECK(p3.row_bytes() == 3);
    CHECK(p3.payload.size() == 6);
    const std::vector<std::int32_t> five(10, 1);
    CHECK(pack(five, 2, 5, std::vector<float>(2, 1.0f), scheme(3, 0)).payload.size() == 4);

    // Symmetric windows store offsets from -2^(b-1).
    const std::vector<std::int32_t> signed_ints{-8, 7};
    const auto ps = pack(signed_ints, 1, 2, std::vector<float>{1.0f}, scheme(4, 0, ClampMode::symmetric_signed));
    CHECK(ps.payload == std::vector<std::uint8_t>{0xF0});
}

TEST_CASE("pack and unpack are inverse") {
    for (int bits : {2, 3, 4, 8}) {
        for (std::size_t cin : {std::size_t{256}, std::size_t{384}}) {
            for (std::size_t g : {std::size_t{0}, std::size_t{128}}) {
                for (ClampMode clamp : {ClampMode::asymmetric_unsigned, ClampMode::symmetric_signed}) {
                    CAPTURE(bits);
                    CAPTURE(cin);
                    CAPTURE(g);
                    const QuantScheme s = scheme(bits, g, clamp);
                    const std::size_t rows = 5, groups = s.groups(cin);
                    std::mt19937_64 rng(static_cast<std::uint64_t>(bits * 1000 + cin + g));
                    std::vector<std::int32_t> origin(rows * groups), ints(rows * cin);
                    std::vector<float> rescale(rows * groups);
                    for (std::size_t i = 0; i < origin.size(); ++i) {
                        origin[i] = static_cast<std::int32_t>(rng() % 64) - 32;
                        rescale[i] = 0.01f * static_cast<float>(1 + rng() % 10);
                    }
                    for (std::size_t i = 0; i < ints.size(); ++i) {
                        const std::size_t gi = (i / cin) * groups + (i % cin) / s.effective_group(cin);
                        ints[i] = origin[gi] + static_cast<std::int32_t>(rng() % (std::uint64_t{1} << bits));
                    }
                    const auto pt = pack(ints, rows, cin, rescale, s, origin);
                    CHECK(pt.payload.size() == rows * ((cin * static_cast<std::size_t>(bits) + 7) / 8));
                    const auto u = unpack(pt);
                    CHECK(u.ints == ints);
                    CHECK(u.rescale == rescale);
                    CHECK(u.origin == origin);
                    // Repacking the unpacked form reproduces the bytes.
                    CHECK(pack(u.ints, rows, cin, u.rescale, s, u.origin).payload == pt.payload);
                }
            }
        }
    }
}

TEST_CASE("quantized weights pack losslessly") {
    for (Method m : {Method::flexround, Method::omniquant, Method::blockap}) {
        for (int bits : {2, 3, 4, 8}) {
            for (std::size_t g : {std::size_t{0}, std::size_t{128}}) {
                CAPTURE(bits);
                CAPTURE(g);
                const Tensor w = random_weight(6, 256, static_cast<std::uint64_t>(bits + g));
                const QuantScheme s = default_scheme(m, bits, g);
                const QuantizedWeight q = quantize(w, init_params(m, w, s), s);
                const auto pt = pack(q, 6, 256, s);
                const Tensor d = dequantize(pt);
                CHECK(std::equal(d.data().begin(), d.data().end(), q.weight.data().begin()));

                std::vector<float> x(256);
                std::mt19937_64 rng(3);
                std::normal_distribution<float> n;
                for (auto& v : x) v = n(rng);
                const auto y = dequant_matvec(pt, x);
                for (std::size_t r = 0; r < 6; ++r) {
                    double ref = 0;
                    for (std::size_t c = 0; c < 256; ++c) ref += double(d.data()[r * 256 + c]) * x[c];
                    CHECK(std::abs(y[r] - ref) < 1e-5);
                }
            }
        }
    }
}

TEST_CASE("matvec edge cases") {
    const QuantScheme s = scheme(4, 0);
    const auto zeros = pack(std::vector<std::int32_t>(12, 0), 3, 4, std::vector<float>(3, 0.5f), s);
    CHECK(dequant_matvec(zeros, std::vector<float>{1, 2, 3, 4}) == std::vector<float>{0, 0, 0});

    // Identity-like: row r has code 1 at column r and rescale 1.
    std::vector<std::int32_t> eye(16, 0);
    for (std::size_t r = 0; r < 4; ++r) eye[r * 4 + r] = 1;
    const auto id = pack(eye, 4, 4, std::vector<float>(4, 1.0f), s);
    const std::vector<float> x{0.25f, -1.5f, 3.0f, 7.0f};
    CHECK(dequant_matvec(id, x) == x);
    CHECK_THROWS_AS(dequant_matvec(id, std::vector<float>{1, 2}), ContractError);
}

TEST_CASE("pack errors") {
    const QuantScheme s = scheme(3, 0);
    const std::vector<float> one{1.0f};
    try {
        pack(std::vector<std::int32_t>{0, 1, 8, 2}, 1, 4, one, s);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("index 2") != std::string::npos);
    }
    CHECK_THROWS_AS(pack(std::vector<std::int32_t>{-1}, 1, 1, one, s), ContractError);
    CHECK_THROWS_AS(pack(std::vector<std::int32_t>{0, 1}, 1, 4, one, s), ContractError);
    CHECK_THROWS_AS(pack(std::vector<std::int32_t>{0, 1, 2, 3}, 1, 4, std::vector<float>{}, s), ContractError);

    auto pt = pack(std::vector<std::int32_t>{0, 1, 2, 3}, 1, 4, one, s);
    pt.payload.pop_back();
    CHECK_THROWS_AS(unpack(pt), FormatError);
    CHECK_THROWS_AS(dequant_matvec(pt, std::vector<float>{1, 1, 1, 1}), FormatError);

    const auto empty = pack(std::vector<std::int32_t>{}, 0, 4, std::vector<float>{}, s);
    CHECK(empty.payload.empty());
    CHECK(unpack(empty).ints.empty());
    CHECK(dequant_matvec(empty, std::vector<float>{1, 1, 1, 1}).empty());
}

TEST_CASE("packed model round trip") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.n_blocks = 2;
    cfg.max_seq_len = 16;
    const Model fp = init_model(cfg, 5);
    const auto text = synthetic_corpus(4096, 2);
    const std::vector<std::uint8_t> corpus(text.begin(), text.end());

    for (Method m : {Method::flexround, Method::omniquant, Method::blockap}) {
        PTQConfig c = PTQConfig::for_method(m, 3, 8);
        c.iters = 5;
        c.samples = 4;
        c.seq_len = 8;
        const PTQResult r = run_pipeline(fp, corpus, c);
        const auto bytes = packed_model_bytes(r.model, r.qweights, m, c.scheme);
        const PackedModel pm = parse_packed_model(bytes);
        CHECK(pm.method == m);
        CHECK(pm.scheme.bits == 3);
        CHECK(pm.linears.size() == cfg.n_blocks * BlockWeights::kLinears);
        CHECK(pm.packed_bytes > 0);
        CHECK(checkpoint_bytes(pm.model) == checkpoint_bytes(r.model));

        const auto toks = tokenize("the quick brown ");
        const Tensor a = forward_full(r.model, toks), b = forward_full(pm.model, toks);
        CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

        // Serialization is deterministic and truncation is detected.
        CHECK(packed_model_bytes(pm.model, r.qweights, m, c.scheme) == bytes);
        CHECK_THROWS_AS(parse_packed_model(std::span(bytes).first(bytes.size() - 3)), FormatError);
    }
    std::vector<std::uint8_t> bad{'L', 'F', 'Q', 'X', 1, 0, 0, 0};
    CHECK_THROWS_AS(parse_packed_model(bad), FormatError);

    const auto path = std::filesystem::temp_directory_path() / "lfq_test_packed.lfqp";
    PTQConfig c = PTQConfig::for_method(Method::flexround, 4, 8);
    c.iters = 2;
    c.samples = 2;
    c.seq_len = 8;
    const PTQResult r = run_pipeline(fp, corpus, c);
    save_packed_model(path, r.model, r.qweights, Method::flexround, c.scheme);
    CHECK(checkpoint_bytes(load_packed_model(path).model) == checkpoint_bytes(r.model));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_packed_model(path), IoError);
}
