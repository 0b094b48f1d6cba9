// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criterion numbers follow the project README.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lfq/cli.hpp"
#include "lfq/eval.hpp"
#include "lfq/packing.hpp"
#include "lfq/ptq.hpp"
#include "lfq/serialize.hpp"
#include "oracles/block_gradcheck.hpp"
#include "oracles/omniquant_grid.hpp"
#include "oracles/op_gradchecks.hpp"
#include "oracles/quantizer_properties.hpp"

using namespace lfq;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool passed = true;
    std::string detail;

    void fail(const std::string& why) {
        if (passed) detail = why;
        else if (!why.empty()) detail += "; " + why;
        passed = false;
    }
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

const Method kMethods[] = {Method::flexround, Method::omniquant, Method::blockap};

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

Outcome worked_examples() {
    Outcome o;
    const VerifyReport r = verify_worked_examples();
    std::size_t n = 0;
    for (const auto& c : r.checks) {
        if (c.passed) ++n;
        else o.fail(c.name + ": " + c.detail);
    }
    if (r.checks.size() != 5) o.fail("expected 5 checks, got " + std::to_string(r.checks.size()));
    if (o.passed) o.detail = std::to_string(n) + "/5 checks";
    return o;
}

Outcome gradient_suite() {
    Outcome o;
    constexpr std::uint64_t kSeeds = 50;
    double worst = 0;
    std::size_t checks = 0;
    for (const auto& check : oracle::op_gradchecks()) {
        for (std::uint64_t seed = 0; seed < kSeeds; ++seed, ++checks) {
            const double e = check.run(seed);
            worst = std::max(worst, e);
            if (!(e < 1e-3)) o.fail(fmt("%s seed %llu: relative error %.3g", check.name.c_str(), (unsigned long long)seed, e));
        }
    }
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed, ++checks) {
        const double e = oracle::block_gradcheck(seed);
        worst = std::max(worst, e);
        if (!(e < 1e-3)) o.fail(fmt("block seed %llu: relative error %.3g", (unsigned long long)seed, e));
    }
    if (o.passed) o.detail = fmt("%zu checks over %llu seeds, worst relative error %.2e", checks,
                                 (unsigned long long)kSeeds, worst);
    return o;
}

// Random codes inside each group's window round-trip through pack/unpack,
// and the packed matvec matches the dense product.
std::string pack_roundtrip(int bits, std::size_t g, ClampMode clamp, std::uint64_t seed, double& worst_matvec) {
    const std::size_t rows = 8, cols = 256;
    std::mt19937_64 rng(seed);
    const QuantScheme s{bits, g, clamp};
    const std::size_t groups = s.groups(cols), eg = s.effective_group(cols);
    std::vector<std::int32_t> origin = default_origins(s, rows, cols), ints(rows * cols);
    std::vector<float> rescale(rows * groups);
    std::normal_distribution<float> normal;
    for (std::size_t i = 0; i < rescale.size(); ++i) {
        if (clamp == ClampMode::asymmetric_unsigned) origin[i] = static_cast<std::int32_t>(rng() % 32) - 16;
        rescale[i] = 0.01f + 0.1f * std::abs(normal(rng));
    }
    for (std::size_t i = 0; i < ints.size(); ++i)
        ints[i] = origin[(i / cols) * groups + (i % cols) / eg] + static_cast<std::int32_t>(rng() % (1u << bits));
    const PackedTensor pt = pack(ints, rows, cols, rescale, s, origin);
    const UnpackedTensor u = unpack(pt);
    if (u.ints != ints || u.rescale != rescale || u.origin != origin) return "pack/unpack mismatch";
    if (pack(u.ints, rows, cols, u.rescale, s, u.origin).payload != pt.payload) return "repack changed the bytes";

    std::vector<float> x(cols);
    for (auto& v : x) v = normal(rng);
    const auto y = dequant_matvec(pt, x);
    const Tensor dense = dequantize(pt);
    for (std::size_t r = 0; r < rows; ++r) {
        double ref = 0;
        for (std::size_t c = 0; c < cols; ++c) ref += double(dense.data()[r * cols + c]) * x[c];
        const double err = std::abs(y[r] - ref) / std::max(1.0, std::abs(ref));
        worst_matvec = std::max(worst_matvec, err);
        if (!(err <= 1e-5)) return fmt("matvec row %zu off by %.3g", r, err);
    }
    return {};
}

Outcome quantizer_properties() {
    Outcome o;
    std::size_t n = 0;
    for (const auto& c : oracle::property_cases()) {
        for (std::uint64_t seed = 0; seed < 10; ++seed, n += 2) {
            if (auto e = oracle::check_grid_membership(c, seed); !e.empty()) o.fail(e);
            if (auto e = oracle::check_idempotence(c, seed); !e.empty()) o.fail(e);
        }
    }
    for (int b : {2, 3, 4, 8}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed, n += 2) {
            for (ClampMode cm : {ClampMode::symmetric_signed, ClampMode::asymmetric_unsigned}) {
                if (auto e = oracle::check_flexround_blockap_equal(QuantScheme{b, 8, cm}, seed); !e.empty()) o.fail(e);
            }
        }
    }
    double worst_w8 = 0;
    for (Method m : kMethods) {
        for (std::size_t g : {std::size_t{0}, std::size_t{16}}) {
            for (std::uint64_t seed = 0; seed < 10; ++seed, ++n) {
                const double e = oracle::init_relative_error(m, default_scheme(m, 8, g), seed);
                worst_w8 = std::max(worst_w8, e);
                if (!(e < 0.01)) o.fail(fmt("W8 %s error %.4f", to_string(m).c_str(), e));
            }
        }
    }
    double worst_matvec = 0;
    for (int b : {2, 3, 4, 8}) {
        for (std::size_t g : {std::size_t{0}, std::size_t{128}}) {
            for (ClampMode cm : {ClampMode::symmetric_signed, ClampMode::asymmetric_unsigned}) {
                for (std::uint64_t seed = 0; seed < 5; ++seed, ++n) {
                    if (auto e = pack_roundtrip(b, g, cm, seed, worst_matvec); !e.empty()) {
                        o.fail(fmt("b=%d g=%zu: %s", b, g, e.c_str()));
                    }
                }
            }
        }
    }
    if (o.passed) o.detail = fmt("%zu checks; worst W8 error %.4f, worst matvec error %.2e", n, worst_w8, worst_matvec);
    return o;
}

Outcome baseline_reduction() {
    Outcome o;
    const ModelConfig cfg;  // 4 blocks, d = 64, V = 256
    Model fp = init_model(cfg, 7);
    const auto corpus = bytes_of(synthetic_corpus(256 * 1024, 7));
    TrainOptions t;
    t.steps = 100;
    train_toy(fp, corpus, t);
    for (Method m : kMethods) {
        PTQConfig c = PTQConfig::for_method(m, 3, 128);
        c.objective_final = ObjectiveKind::block_mse;
        c.iters = 20;
        c.samples = 8;
        c.lr *= 10;
        const PTQResult a = run_pipeline(fp, corpus, c);
        const PTQResult b = run_baseline(fp, corpus, c);
        if (checkpoint_bytes(a.model) != checkpoint_bytes(b.model)) o.fail(to_string(m) + ": checkpoints differ");
        for (std::size_t i = 0; i < a.report.blocks.size(); ++i) {
            if (a.report.blocks[i].loss_final != b.report.blocks[i].loss_final) {
                o.fail(to_string(m) + ": block " + std::to_string(i) + " losses differ");
            }
        }
    }
    if (o.passed) o.detail = "bit-identical checkpoints and block losses for all three methods";
    return o;
}

Outcome optimizer_oracle() {
    Outcome o;
    double worst = -INFINITY;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto r = oracle::omniquant_grid_oracle(seed);
        const double gap = r.adam_loss - r.grid_min;
        worst = std::max(worst, gap);
        if (!(gap <= 1e-3)) {
            o.fail(fmt("seed %llu: adam %.6f vs grid %.6f (gap %.2e)", (unsigned long long)seed, r.adam_loss,
                       r.grid_min, gap));
        }
    }
    if (o.passed) o.detail = fmt("10 seeds, worst adam - grid_min = %.2e", worst);
    return o;
}

// Toy LFQ experiment: FP model trained 2000 steps per seed, W3g128 with each
// method; the MSE-fitted prefix is shared and the last block is fitted with
// block-MSE (baseline), logit-MSE and logit-CE.
Outcome lfq_claim() {
    Outcome o;
    constexpr std::size_t kSeeds = 4, kSamples = 32, kIters = 200, kSeqLen = 64;
    struct Tally {
        std::size_t kl = 0, top1 = 0, between = 0;
    };
    std::vector<Tally> tally(3);
    std::ostringstream table;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        const auto corpus = bytes_of(synthetic_corpus(512 * 1024, 100 + seed));
        Model fp = init_model(ModelConfig{}, seed);
        TrainOptions t;
        t.steps = 2000;
        t.seed = seed;
        train_toy(fp, corpus, t);
        const EvalSet held_out = eval_windows(corpus, kSeqLen, 256 * 1024, 256);
        const CalibrationSet set = select_samples(corpus, kSamples, kSeqLen);

        for (std::size_t mi = 0; mi < 3; ++mi) {
            PTQConfig c = PTQConfig::for_method(kMethods[mi], 3, 128);
            c.iters = kIters;
            c.samples = kSamples;
            c.seq_len = kSeqLen;
            c.lr *= 10;
            c.teacher = TeacherMode::full_fp;
            Pipeline prefix(fp, set, c);
            while (prefix.next_block() + 1 < prefix.n_blocks()) prefix.fit_next();

            double kl[3], top1[3];
            const ObjectiveKind kinds[] = {ObjectiveKind::block_mse, ObjectiveKind::logit_mse, ObjectiveKind::logit_ce};
            for (int k = 0; k < 3; ++k) {
                Pipeline p = prefix;
                p.fit_next(kinds[k], c.lr);
                const Model q = p.quantized_model();
                kl[k] = token_kl(fp, q, held_out).mean;
                top1[k] = top1_agreement(fp, q, held_out);
            }
            tally[mi].kl += kl[2] <= kl[0];
            tally[mi].top1 += top1[2] >= top1[0];
            tally[mi].between += kl[1] <= kl[0] && kl[1] >= kl[2];
            table << fmt("    seed %llu %-9s KL mse %.5f lmse %.5f ce %.5f | top1 mse %.4f lmse %.4f ce %.4f\n",
                         (unsigned long long)seed, to_string(kMethods[mi]).c_str(), kl[0], kl[1], kl[2], top1[0],
                         top1[1], top1[2]);
        }
    }
    std::ostringstream summary;
    for (std::size_t mi = 0; mi < 3; ++mi) {
        summary << fmt("%s%s KL %zu/4 top1 %zu/4 (logit-MSE between %zu/4)", mi ? "; " : "",
                       to_string(kMethods[mi]).c_str(), tally[mi].kl, tally[mi].top1, tally[mi].between);
        if (tally[mi].kl < 3 || tally[mi].top1 < 3) o.passed = false;
    }
    o.detail = summary.str() + "\n" + table.str();
    return o;
}

Outcome schedule_table() {
    Outcome o;
    using O = ObjectiveKind;
    const O m = O::block_mse, c = O::logit_ce;
    struct Row {
        std::size_t k;
        bool skip;
        std::vector<O> expect;
    };
    const Row rows[] = {{1, false, {m, m, m, c}}, {2, false, {m, m, c, c}}, {3, false, {m, c, c, c}},
                        {1, true, {m, m, m, m}},  {2, true, {m, m, c, m}},  {3, true, {m, c, c, m}}};
    for (const auto& r : rows) {
        if (objective_schedule(4, r.k, r.skip, c) != r.expect) {
            o.fail(fmt("lfq_k=%zu skip_last=%d", r.k, int(r.skip)));
        }
        for (std::size_t i = 0; i < 4; ++i) {
            if (uses_final_objective(i, 4, r.k, r.skip) != (r.expect[i] == c)) {
                o.fail(fmt("uses_final_objective(%zu) for lfq_k=%zu skip_last=%d", i, r.k, int(r.skip)));
            }
        }
    }
    if (o.passed) o.detail = "6 configurations x 4 blocks";
    return o;
}

Outcome determinism() {
    Outcome o;
    const fs::path dir = fs::temp_directory_path() / "lfq_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto corpus = bytes_of(synthetic_corpus(128 * 1024, 3));
    io::write_file(dir / "corpus.txt", corpus);
    Model fp = init_model(ModelConfig{}, 3);
    TrainOptions t;
    t.steps = 50;
    train_toy(fp, corpus, t);
    save_checkpoint(fp, dir / "fp.lfq");

    cli::JobConfig job;
    job.command = "quantize";
    job.model = (dir / "fp.lfq").string();
    job.corpus = (dir / "corpus.txt").string();
    job.out = (dir / "q.lfq").string();
    job.packed = (dir / "q.lfqp").string();
    job.report = (dir / "report.json").string();
    job.ptq = PTQConfig::for_method(Method::omniquant, 3, 128);
    job.ptq.iters = 20;
    job.ptq.samples = 8;
    std::vector<std::vector<std::uint8_t>> runs[2];
    for (auto& run : runs) {
        std::ostringstream out;
        if (cli::cmd_quantize(job, out) != 0) o.fail("cmd_quantize failed");
        for (const char* f : {"q.lfq", "q.lfqp", "report.json"}) run.push_back(io::read_file(dir / f));
    }
    const char* names[] = {"checkpoint", "packed model", "report"};
    for (int i = 0; i < 3; ++i) {
        if (runs[0][i] != runs[1][i]) o.fail(std::string(names[i]) + " differs between runs");
    }
    fs::remove_all(dir);
    if (o.passed) o.detail = "checkpoint, packed model and report byte-identical across two runs";
    return o;
}

}  // namespace

int main() {
    tune_allocator();
    struct Criterion {
        int id;
        const char* name;
        double budget_s;  // 0 = no runtime bound
        std::function<Outcome()> run;
    };
    const Criterion criteria[] = {
        {1, "worked-example goldens", 1, worked_examples},
        {2, "gradient suite", 30, gradient_suite},
        {3, "quantizer properties", 30, quantizer_properties},
        {4, "baseline reduction", 0, baseline_reduction},
        {5, "optimizer vs oracle", 120, optimizer_oracle},
        {7, "schedule table", 0, schedule_table},
        {8, "determinism", 0, determinism},
        {6, "qualitative LFQ claim", 900, lfq_claim},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.fail(std::string("exception: ") + e.what());
        }
        const double s = std::chrono::duration<double>(Clock::now() - t0).count();
        if (c.budget_s > 0 && s > c.budget_s) o.fail(fmt("runtime %.1f s exceeds %.0f s", s, c.budget_s));
        failed += !o.passed;
        std::printf("[%s] %d %s (%.1f s): %s\n", o.passed ? "PASS" : "FAIL", c.id, c.name, s, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of 8 criteria failed\n", failed);
    return failed ? 1 : 0;
}
