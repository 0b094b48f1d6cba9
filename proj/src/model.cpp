#include "lfq/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "lfq/error.hpp"
#include "lfq/ops.hpp"
#include "lfq/optim.hpp"
#include "lfq/serialize.hpp"

namespace lfq {

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_blocks == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
        throw ContractError("model config: every extent must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ContractError("model config: d_model " + std::to_string(d_model) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
    }
    if (!(norm_eps >= 0.0f) || !std::isfinite(norm_eps)) throw ContractError("model config: bad norm eps");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_blocks", c.n_blocks},
                       {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
                       {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<float>();
}

BlockWeights BlockWeights::clone() const {
    return {norm1.clone(), wq.clone(), wk.clone(),    wv.clone(),
            wo.clone(),    norm2.clone(), wup.clone(), wdown.clone()};
}

Model Model::clone() const {
    Model m;
    m.config = config;
    m.tok_emb = tok_emb.clone();
    m.pos_emb = pos_emb.clone();
    for (const auto& b : blocks) m.blocks.push_back(b.clone());
    m.final_norm = final_norm.clone();
    m.head = head.clone();
    return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.emplace_back(p + "norm1", b.norm1);
        out.emplace_back(p + "wq", b.wq);
        out.emplace_back(p + "wk", b.wk);
        out.emplace_back(p + "wv", b.wv);
        out.emplace_back(p + "wo", b.wo);
        out.emplace_back(p + "norm2", b.norm2);
        out.emplace_back(p + "wup", b.wup);
        out.emplace_back(p + "wdown", b.wdown);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("head", head);
    return out;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
}

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<float> v(numel(shape));
    for (auto& x : v) x = static_cast<float>(dist(rng));
    return Tensor::from(std::move(shape), std::move(v));
}

void check_tokens(std::span<const std::int32_t> tokens, std::size_t vocab) {
    for (auto t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
        }
    }
}

}  // namespace

Model init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.d_model, f = config.d_ff;
    const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double in_f = 1.0 / std::sqrt(static_cast<double>(f));
    // Residual-branch outputs shrink with depth so the stream stays O(1).
    const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_blocks));

    Model m;
    m.config = config;
    m.tok_emb = normal({config.vocab_size, d}, 0.3, rng);
    m.pos_emb = normal({config.max_seq_len, d}, 0.1, rng);
    for (std::size_t i = 0; i < config.n_blocks; ++i) {
        BlockWeights b;
        b.norm1 = Tensor::full({d}, 1.0f);
        b.wq = normal({d, d}, in_d, rng);
        b.wk = normal({d, d}, in_d, rng);
        b.wv = normal({d, d}, in_d, rng);
        b.wo = normal({d, d}, in_d * depth, rng);
        b.norm2 = Tensor::full({d}, 1.0f);
        b.wup = normal({f, d}, in_d, rng);
        b.wdown = normal({d, f}, in_f * depth, rng);
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = Tensor::full({d}, 1.0f);
    m.head = normal({d, config.vocab_size}, in_d, rng);
    return m;
}

std::vector<std::int32_t> tokenize(std::string_view text) {
    std::vector<std::int32_t> ids(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
    return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
    std::string s(ids.size(), '\0');
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] > 255) throw ContractError("token id " + std::to_string(ids[i]) + " is not a byte");
        s[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
    }
    return s;
}

Tensor embed(const Model& model, std::span<const std::int32_t> tokens, std::size_t seq_len) {
    const auto& c = model.config;
    if (seq_len == 0 || tokens.size() % seq_len != 0) {
        throw ContractError(std::to_string(tokens.size()) + " tokens do not split into sequences of " +
                            std::to_string(seq_len));
    }
    if (seq_len > c.max_seq_len) {
        throw ContractError("sequence length " + std::to_string(seq_len) + " exceeds maximum " +
                            std::to_string(c.max_seq_len));
    }
    check_tokens(tokens, c.vocab_size);
    std::vector<std::int32_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % seq_len);
    return ops::add(ops::embedding(model.tok_emb, tokens), ops::embedding(model.pos_emb, pos));
}

Tensor forward_block(const BlockWeights& b, const Tensor& x, const ModelConfig& c, std::size_t seq_len) {
    if (seq_len > c.max_seq_len) {
        throw ContractError("sequence length " + std::to_string(seq_len) + " exceeds maximum " +
                            std::to_string(c.max_seq_len));
    }
    if (x.rank() != 2 || x.cols() != c.d_model) {
        throw DimensionError("block input must be [rows x " + std::to_string(c.d_model) + "], got " +
                             shape_str(x.shape()));
    }
    Tensor a = ops::rmsnorm(x, b.norm1, c.norm_eps);
    Tensor att = ops::causal_attention(ops::matmul_nt(a, b.wq), ops::matmul_nt(a, b.wk), ops::matmul_nt(a, b.wv),
                                       c.n_heads, seq_len);
    Tensor h = ops::add(x, ops::matmul_nt(att, b.wo));
    Tensor m = ops::rmsnorm(h, b.norm2, c.norm_eps);
    return ops::add(h, ops::matmul_nt(ops::silu(ops::matmul_nt(m, b.wup)), b.wdown));
}

Tensor logits_from_hidden(const Model& model, const Tensor& h) {
    return ops::matmul(ops::rmsnorm(h, model.final_norm, model.config.norm_eps), model.head);
}

Tensor forward_full(const Model& model, std::span<const std::int32_t> tokens, std::size_t seq_len) {
    if (tokens.empty()) throw ContractError("forward on an empty token sequence");
    if (seq_len == 0) seq_len = tokens.size();
    Tensor x = embed(model, tokens, seq_len);
    for (const auto& b : model.blocks) x = forward_block(b, x, model.config, seq_len);
    return logits_from_hidden(model, x);
}

std::vector<std::uint8_t> checkpoint_bytes(const Model& model) {
    io::Writer w;
    w.str("LFQ1");
    w.u32(kCheckpointVersion);
    const std::string cfg = nlohmann::json(model.config).dump();
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.str(cfg);
    for (const auto& [name, t] : model.named_tensors()) w.tensor(name, t);
    return w.take();
}

Model parse_checkpoint(std::span<const std::uint8_t> data, const std::string& what) {
    io::Reader r(data, what);
    r.expect_magic("LFQ1");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(what + ": unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    const std::string cfg_text = r.str(r.u32());
    Model m;
    try {
        m.config = nlohmann::json::parse(cfg_text).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": malformed config: " + e.what());
    }
    try {
        m.config.validate();
    } catch (const ContractError& e) {
        throw FormatError(what + ": " + e.what());
    }
    const auto& c = m.config;
    const std::size_t d = c.d_model, f = c.d_ff, V = c.vocab_size;
    auto read = [&](const std::string& name, const Shape& shape) {
        Tensor t = r.tensor(name);
        if (t.shape() != shape) {
            throw FormatError(what + ": tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(shape));
        }
        return t;
    };
    m.tok_emb = read("tok_emb", {V, d});
    m.pos_emb = read("pos_emb", {c.max_seq_len, d});
    for (std::size_t i = 0; i < c.n_blocks; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        BlockWeights b;
        b.norm1 = read(p + "norm1", {d});
        b.wq = read(p + "wq", {d, d});
        b.wk = read(p + "wk", {d, d});
        b.wv = read(p + "wv", {d, d});
        b.wo = read(p + "wo", {d, d});
        b.norm2 = read(p + "norm2", {d});
        b.wup = read(p + "wup", {f, d});
        b.wdown = read(p + "wdown", {d, f});
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = read("final_norm", {d});
    m.head = read("head", {d, V});
    r.expect_end();
    return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    io::write_file(path, checkpoint_bytes(model));
}

Model load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(io::read_file(path), path.string());
}

TrainResult train_toy(Model& model, std::span<const std::uint8_t> corpus, const TrainOptions& o) {
    if (corpus.size() < kMinTrainCorpus) {
        throw ContractError("training corpus holds " + std::to_string(corpus.size()) + " bytes; at least " +
                            std::to_string(kMinTrainCorpus) + " required");
    }
    if (o.seq_len == 0 || o.seq_len > model.config.max_seq_len || o.batch == 0) {
        throw ContractError("training sequence length must be in [1, " + std::to_string(model.config.max_seq_len) +
                            "] and batch positive");
    }
    TrainResult result;
    if (o.steps == 0) return result;

    auto params = model.parameters();
    for (auto& p : params) p.set_requires_grad(true);
    Adam adam(params, AdamOptions{o.lr});
    std::mt19937_64 rng(o.seed);
    std::uniform_int_distribution<std::size_t> start(0, corpus.size() - o.seq_len - 1);

    std::vector<std::int32_t> inputs(o.batch * o.seq_len), targets(o.batch * o.seq_len);
    for (std::size_t step = 0; step < o.steps; ++step) {
        for (std::size_t b = 0; b < o.batch; ++b) {
            const std::size_t s = start(rng);
            for (std::size_t t = 0; t < o.seq_len; ++t) {
                inputs[b * o.seq_len + t] = corpus[s + t];
                targets[b * o.seq_len + t] = corpus[s + t + 1];
            }
        }
        adam.zero_grad();
        Tensor loss = ops::nll_loss(forward_full(model, inputs, o.seq_len), targets);
        backward(loss);

        if (o.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& p : params)
                for (float g : p.grad()) sq += static_cast<double>(g) * g;
            const double norm = std::sqrt(sq);
            if (norm > o.clip_norm) {
                const float k = static_cast<float>(o.clip_norm / norm);
                for (auto& p : params)
                    for (auto& x : p.mutable_grad()) x *= k;
            }
        }
        // Cosine decay to a tenth of the base rate.
        const double progress = static_cast<double>(step) / static_cast<double>(o.steps);
        adam.set_lr(o.lr * (0.1 + 0.45 * (1.0 + std::cos(progress * 3.141592653589793))));
        adam.step();

        const double l = loss.item();
        if (step == 0) result.initial_loss = l;
        result.losses.push_back(l);
    }
    for (auto& p : params) {
        p.zero_grad();
        p.set_requires_grad(false);
    }
    // Smooth over the tail so the reported loss is not a single noisy batch.
    const std::size_t tail = std::min<std::size_t>(result.losses.size(), 50);
    double s = 0.0;
    for (std::size_t i = result.losses.size() - tail; i < result.losses.size(); ++i) s += result.losses[i];
    result.final_loss = s / static_cast<double>(tail);
    return result;
}

std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed) {
    static const std::array<const char*, 96> kWords = {
        "the",    "of",     "and",    "to",     "a",      "in",     "is",      "that",   "it",     "was",
        "for",    "on",     "are",    "as",     "with",   "they",   "be",      "at",     "one",    "have",
        "this",   "from",   "by",     "hot",    "word",   "but",    "what",    "some",   "we",     "can",
        "out",    "other",  "were",   "all",    "there",  "when",   "up",      "use",    "your",   "how",
        "said",   "an",     "each",   "which",  "she",    "do",     "their",   "time",   "if",     "will",
        "way",    "about",  "many",   "then",   "them",   "write",  "would",   "like",   "so",     "these",
        "her",    "long",   "make",   "thing",  "see",    "him",    "two",     "has",    "look",   "more",
        "day",    "could",  "go",     "come",   "did",    "number", "sound",   "no",     "most",   "people",
        "my",     "over",   "know",   "water",  "than",   "call",   "first",   "who",    "may",    "down",
        "side",   "been",   "now",    "find",   "wait",   "answer"};
    std::mt19937_64 rng(seed);
    // Zipf-like word frequencies.
    std::vector<double> weights(kWords.size());
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = 1.0 / (static_cast<double>(i) + 2.0);
    std::discrete_distribution<std::size_t> word(weights.begin(), weights.end());
    std::uniform_int_distribution<int> sentence_len(4, 14);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    std::string out;
    out.reserve(n_bytes + 128);
    while (out.size() < n_bytes) {
        const int n = sentence_len(rng);
        // Discourse pivots open some sentences.
        if (u(rng) < 0.08) out += u(rng) < 0.5 ? "But " : "Wait, ";
        for (int i = 0; i < n; ++i) {
            std::string w = kWords[word(rng)];
            if (i == 0 && (out.empty() || out.back() == ' ' || out.back() == '\n') &&
                (out.size() < 4 || out.compare(out.size() - 4, 4, "But ") != 0) &&
                (out.size() < 6 || out.compare(out.size() - 6, 6, "Wait, ") != 0)) {
                w[0] = static_cast<char>(w[0] - 'a' + 'A');
            }
            out += w;
            if (i + 1 < n) out += u(rng) < 0.1 ? ", " : " ";
        }
        out += u(rng) < 0.85 ? "." : "?";
        out += u(rng) < 0.2 ? "\n" : " ";
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace lfq
