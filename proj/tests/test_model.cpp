#include <doctest.h>

#include <filesystem>
#include <random>

#include "lfq/error.hpp"
#include "lfq/model.hpp"
#include "lfq/ops.hpp"
#include "lfq/serialize.hpp"
#include "oracles/block_gradcheck.hpp"

using namespace lfq;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_blocks = 2;
    c.max_seq_len = 16;
    return c;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("lfq_test_model_" + name);
}

}  // namespace

TEST_CASE("byte tokenizer") {
    CHECK(tokenize("A") == std::vector<std::int32_t>{65});
    CHECK(tokenize("").empty());
    std::mt19937_64 rng(1);
    std::string s(1000, '\0');
    for (auto& ch : s) ch = static_cast<char>(rng() & 0xff);
    const auto ids = tokenize(s);
    for (auto id : ids) CHECK((id >= 0 && id <= 255));
    CHECK(detokenize(ids) == s);
}

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = tiny_config();
    c.d_ff = 0;
    CHECK_THROWS_AS(init_model(c, 0), ContractError);
}

TEST_CASE("block with zero linear weights is the identity") {
    Model m = init_model(tiny_config(), 3);
    BlockWeights b = m.blocks[0].clone();
    for (Tensor* w : b.linears()) *w = Tensor::zeros(w->shape());
    std::mt19937_64 rng(4);
    Tensor x = oracle::random_tensor({8, 16}, rng);
    CHECK(bit_equal(forward_block(b, x, m.config, 8), x));
}

TEST_CASE("causality") {
    Model m = init_model(tiny_config(), 5);
    std::mt19937_64 rng(6);
    Tensor x2 = oracle::random_tensor({2, 16}, rng);
    Tensor x1 = Tensor::from({1, 16}, std::vector<float>(x2.data().begin(), x2.data().begin() + 16));
    const Tensor y2 = forward_block(m.blocks[0], x2, m.config, 2);
    const Tensor y1 = forward_block(m.blocks[0], x1, m.config, 1);
    for (std::size_t j = 0; j < 16; ++j) CHECK(y1.data()[j] == doctest::Approx(y2.data()[j]).epsilon(1e-6));

    // Changing a later token leaves earlier logits untouched.
    auto a = tokenize("causal masks!");
    auto b = a;
    b.back() = 'x';
    const Tensor la = forward_full(m, a), lb = forward_full(m, b);
    const std::size_t V = m.config.vocab_size;
    for (std::size_t i = 0; i < (a.size() - 1) * V; ++i) CHECK(la.data()[i] == lb.data()[i]);
}

TEST_CASE("sequences in a batch do not attend to each other") {
    Model m = init_model(tiny_config(), 7);
    auto a = tokenize("abcdefgh"), b = tokenize("12345678");
    std::vector<std::int32_t> both(a);
    both.insert(both.end(), b.begin(), b.end());
    const Tensor lab = forward_full(m, both, 8);
    const Tensor lb = forward_full(m, b);
    const std::size_t V = m.config.vocab_size;
    for (std::size_t i = 0; i < 8 * V; ++i) CHECK(lab.data()[8 * V + i] == doctest::Approx(lb.data()[i]).epsilon(1e-5));
}

TEST_CASE("transformer block matches finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(oracle::block_gradcheck(seed) < 1e-3);
}

TEST_CASE("logits_from_hidden") {
    Model m = init_model(tiny_config(), 8);
    const Tensor zero = logits_from_hidden(m, Tensor::zeros({3, 16}));
    for (float v : zero.data()) CHECK(v == 0.0f);

    // Rows with unit RMS and eps = 0 pass the norm unchanged.
    m.config.norm_eps = 0.0f;
    std::vector<float> h(2 * 16);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = (i % 2 ? 1.0f : -1.0f);
    const Tensor H = Tensor::from({2, 16}, h);
    const Tensor got = logits_from_hidden(m, H);
    const Tensor want = ops::matmul(H, m.head);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-6));
}

TEST_CASE("forward_full is the composition of its stages") {
    Model m = init_model(tiny_config(), 9);
    const auto toks = tokenize("compose me");
    Tensor x = embed(m, toks, toks.size());
    for (const auto& b : m.blocks) x = forward_block(b, x, m.config, toks.size());
    CHECK(bit_equal(logits_from_hidden(m, x), forward_full(m, toks)));
    CHECK(forward_full(m, tokenize("z")).shape() == Shape{1, 256});
    CHECK(bit_equal(forward_full(m, toks), forward_full(m, toks)));
}

TEST_CASE("forward_full contract errors") {
    Model m = init_model(tiny_config(), 10);
    CHECK_THROWS_AS(forward_full(m, std::vector<std::int32_t>{300}), ContractError);
    CHECK_THROWS_AS(forward_full(m, std::vector<std::int32_t>(17, 1)), ContractError);
    CHECK_THROWS_AS(forward_full(m, std::vector<std::int32_t>{}), ContractError);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(forward_block(m.blocks[0], oracle::random_tensor({17, 16}, rng), m.config, 17), ContractError);
}

TEST_CASE("checkpoint round trip") {
    Model m = init_model(tiny_config(), 11);
    const auto bytes = checkpoint_bytes(m);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "LFQ1");
    const Model back = parse_checkpoint(bytes);
    CHECK(checkpoint_bytes(back) == bytes);
    const auto toks = tokenize("reloaded");
    CHECK(bit_equal(forward_full(back, toks), forward_full(m, toks)));

    const auto path = temp_path("roundtrip.lfq");
    save_checkpoint(m, path);
    const Model from_disk = load_checkpoint(path);
    save_checkpoint(from_disk, path.string() + ".2");
    CHECK(io::read_file(path) == io::read_file(path.string() + ".2"));
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".2");
}

TEST_CASE("checkpoint format errors") {
    Model m = init_model(tiny_config(), 12);
    auto bytes = checkpoint_bytes(m);

    CHECK_THROWS_AS(parse_checkpoint({}), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(parse_checkpoint(bad_magic), doctest::Contains("magic"), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 2;
    CHECK_THROWS_WITH_AS(parse_checkpoint(bad_version), doctest::Contains("version"), FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 7);
    CHECK_THROWS_WITH_AS(parse_checkpoint(truncated), doctest::Contains("truncated"), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(parse_checkpoint(trailing), FormatError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist")), IoError);
}

TEST_CASE("train_toy") {
    ModelConfig c = tiny_config();
    const std::string text = synthetic_corpus(80 * 1024, 1);
    const auto corpus = bytes_of(text);

    SUBCASE("zero steps leave the model unchanged") {
        Model m = init_model(c, 1);
        const auto before = checkpoint_bytes(m);
        TrainOptions o;
        o.steps = 0;
        o.seq_len = 16;
        train_toy(m, corpus, o);
        CHECK(checkpoint_bytes(m) == before);
    }
    SUBCASE("small corpus is rejected") {
        Model m = init_model(c, 1);
        TrainOptions o;
        o.seq_len = 16;
        CHECK_THROWS_WITH_AS(train_toy(m, bytes_of(text.substr(0, 1000)), o), doctest::Contains("1000 bytes"),
                             ContractError);
    }
    SUBCASE("identical seeds give identical checkpoints") {
        TrainOptions o;
        o.steps = 15;
        o.batch = 2;
        o.seq_len = 16;
        o.seed = 4;
        Model a = init_model(c, 2), b = init_model(c, 2);
        train_toy(a, corpus, o);
        train_toy(b, corpus, o);
        CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
        CHECK(checkpoint_bytes(a) != checkpoint_bytes(init_model(c, 2)));
        CHECK_FALSE(a.tok_emb.requires_grad());
    }
    SUBCASE("loss on a repetitive corpus falls below half the uniform entropy") {
        std::string rep;
        while (rep.size() < 70 * 1024) rep += "the quick brown fox jumps over the lazy dog. ";
        Model m = init_model(c, 3);
        TrainOptions o;
        o.steps = 2000;
        o.batch = 2;
        o.seq_len = 16;
        const auto r = train_toy(m, bytes_of(rep), o);
        CHECK(r.final_loss < r.initial_loss);
        CHECK(r.final_loss < std::log(256.0) / 2);
    }
}

TEST_CASE("synthetic corpus") {
    const auto a = synthetic_corpus(5000, 7);
    CHECK(a.size() == 5000);
    CHECK(a == synthetic_corpus(5000, 7));
    CHECK(a != synthetic_corpus(5000, 8));
    CHECK(a.find(". ") != std::string::npos);
    CHECK(a.find(',') != std::string::npos);
    CHECK(a.find('\n') != std::string::npos);
}
