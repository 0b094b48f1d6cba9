#include "lfq/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "lfq/calibration.hpp"
#include "lfq/error.hpp"
#include "lfq/packing.hpp"
#include "lfq/serialize.hpp"

namespace lfq::cli {

using io::read_file;
using io::write_file;

namespace {

// Bad flag values found after parsing; reported like parse errors.
class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::vector<std::uint8_t> read_input(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("--") + what + " is required");
    if (!std::filesystem::exists(path)) throw IoError(std::string(what) + " not found: " + path);
    return read_file(path);
}

void require_flag(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string("--") + flag + " is required");
}

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

// Emits the report (with the resolved job) to --report and, with --json, to
// `out`; otherwise prints `summary`.
void emit(const JobConfig& job, const nlohmann::json& result, const std::string& summary, std::ostream& out) {
    const nlohmann::json report{{"command", job.command}, {"config", job}, {"result", result}};
    const std::string text = report.dump(2) + "\n";
    if (!job.report.empty()) write_file(job.report, as_bytes(text));
    if (job.json) out << text;
    else out << summary;
}

bool is_packed_file(std::span<const std::uint8_t> data) {
    return data.size() >= 4 && std::equal(data.begin(), data.begin() + 4, "LFQP");
}

Model load_any(const std::string& path, const char* what) {
    const auto data = read_input(path, what);
    return is_packed_file(data) ? parse_packed_model(data, path).model : parse_checkpoint(data, path);
}

FidelityOptions fidelity_options(const JobConfig& job, std::size_t default_offset) {
    FidelityOptions o;
    o.seq_len = job.ptq.seq_len;
    o.offset = job.eval_offset.value_or(default_offset);
    o.max_windows = job.eval_windows;
    o.prompts = job.prompts;
    return o;
}

// Flag values that only make sense for a given model are usage errors too.
void check_against(const PTQConfig& cfg, const Model& fp) {
    try {
        cfg.validate(fp.blocks.size());
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
}

}  // namespace

void to_json(nlohmann::json& j, const JobConfig& c) {
    nlohmann::json train{{"steps", c.train.steps}, {"lr", c.train.lr},           {"seed", c.train.seed},
                         {"batch", c.train.batch}, {"seq_len", c.train.seq_len}, {"clip_norm", c.train.clip_norm}};
    nlohmann::json methods = nlohmann::json::array();
    for (Method m : c.methods) methods.push_back(to_string(m));
    j = {{"ptq", c.ptq},
         {"paths",
          {{"model", c.model},
           {"quantized", c.quantized},
           {"corpus", c.corpus},
           {"out", c.out},
           {"packed", c.packed},
           {"report", c.report},
           {"kl_csv", c.kl_csv}}},
         {"model_config", c.model_config},
         {"train", train},
         {"corpus_bytes", c.corpus_bytes},
         {"corpus_seed", c.corpus_seed},
         {"eval",
          {{"offset", c.eval_offset ? nlohmann::json(*c.eval_offset) : nlohmann::json(nullptr)},
           {"windows", c.eval_windows},
           {"prompts", c.prompts}}},
         {"methods", methods}};
}

void from_json(const nlohmann::json& j, JobConfig& c) {
    if (!j.is_object()) throw FormatError("job config must be a JSON object");
    try {
        if (j.contains("ptq")) from_json(j.at("ptq"), c.ptq);
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            c.model = p.value("model", c.model);
            c.quantized = p.value("quantized", c.quantized);
            c.corpus = p.value("corpus", c.corpus);
            c.out = p.value("out", c.out);
            c.packed = p.value("packed", c.packed);
            c.report = p.value("report", c.report);
            c.kl_csv = p.value("kl_csv", c.kl_csv);
        }
        if (j.contains("model_config")) {
            nlohmann::json merged = c.model_config;
            merged.update(j.at("model_config"));
            c.model_config = merged.get<ModelConfig>();
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            c.train.steps = t.value("steps", c.train.steps);
            c.train.lr = t.value("lr", c.train.lr);
            c.train.seed = t.value("seed", c.train.seed);
            c.train.batch = t.value("batch", c.train.batch);
            c.train.seq_len = t.value("seq_len", c.train.seq_len);
            c.train.clip_norm = t.value("clip_norm", c.train.clip_norm);
        }
        c.corpus_bytes = j.value("corpus_bytes", c.corpus_bytes);
        c.corpus_seed = j.value("corpus_seed", c.corpus_seed);
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            if (e.contains("offset")) {
                if (e.at("offset").is_null()) c.eval_offset.reset();
                else c.eval_offset = e.at("offset").get<std::size_t>();
            }
            c.eval_windows = e.value("windows", c.eval_windows);
            c.prompts = e.value("prompts", c.prompts);
        }
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad job config: ") + e.what());
    }
}

int cmd_make_corpus(const JobConfig& job, std::ostream& out) {
    require_flag(job.out, "out");
    const std::string text = synthetic_corpus(job.corpus_bytes, job.corpus_seed);
    write_file(job.out, as_bytes(text));
    emit(job, {{"bytes", text.size()}}, "wrote " + std::to_string(text.size()) + " bytes to " + job.out + "\n", out);
    return kOk;
}

int cmd_train_toy(const JobConfig& job, std::ostream& out) {
    require_flag(job.out, "out");
    const auto corpus = job.corpus.empty() ? as_bytes(synthetic_corpus(job.corpus_bytes, job.corpus_seed))
                                           : read_input(job.corpus, "corpus");
    Model model = init_model(job.model_config, job.train.seed);
    const TrainResult r = train_toy(model, corpus, job.train);
    save_checkpoint(model, job.out);
    const nlohmann::json result{{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}, {"losses", r.losses}};
    emit(job, result,
         "trained " + std::to_string(job.train.steps) + " steps: loss " + fixed(r.initial_loss, 4) + " -> " +
             fixed(r.final_loss, 4) + "\nwrote " + job.out + "\n",
         out);
    return kOk;
}

int cmd_quantize(const JobConfig& job, std::ostream& out) {
    require_flag(job.out, "out");
    const Model fp = parse_checkpoint(read_input(job.model, "model"), job.model);
    check_against(job.ptq, fp);
    const auto corpus = read_input(job.corpus, "corpus");
    const PTQResult r = run_pipeline(fp, corpus, job.ptq);
    save_checkpoint(r.model, job.out);
    if (!job.packed.empty()) save_packed_model(job.packed, r.model, r.qweights, job.ptq.method, job.ptq.scheme);

    std::ostringstream s;
    s << "block  objective   loss_init     loss_final\n";
    for (const auto& b : r.report.blocks) {
        char line[128];
        std::snprintf(line, sizeof line, "%5zu  %-10s  %-12.6g  %-12.6g\n", b.index, to_string(b.objective).c_str(),
                      b.loss_init, b.loss_final);
        s << line;
    }
    if (r.report.selected_lr) s << "selected lr " << *r.report.selected_lr << "\n";
    s << "wrote " << job.out << (job.packed.empty() ? "" : " and " + job.packed) << "\n";
    emit(job, r.report, s.str(), out);
    return kOk;
}

int cmd_eval(const JobConfig& job, std::ostream& out) {
    const Model fp = load_any(job.model, "model");
    const Model q = load_any(job.quantized, "quantized");
    const auto corpus = read_input(job.corpus, "corpus");
    const FidelityReport r = evaluate_fidelity(fp, q, corpus, fidelity_options(job, 0));
    if (!job.kl_csv.empty()) write_file(job.kl_csv, as_bytes(kl_series_csv(r)));
    std::size_t diverged = 0;
    for (const auto& d : r.divergences) diverged += d.diverged;
    emit(job, r,
         "perplexity fp " + fixed(r.perplexity_fp, 4) + "  quantized " + fixed(r.perplexity_q, 4) + "\nmean KL " +
             fixed(r.mean_kl, 6) + "  top-1 agreement " + fixed(r.top1_agreement, 4) + " over " +
             std::to_string(r.positions) + " positions\nmarker mass gap " + fixed(r.markers.mean_gap, 6) +
             "  greedy divergences " + std::to_string(diverged) + "/" + std::to_string(r.divergences.size()) + "\n",
         out);
    return kOk;
}

int cmd_compare(const JobConfig& job, std::ostream& out) {
    const Model fp = parse_checkpoint(read_input(job.model, "model"), job.model);
    check_against(job.ptq, fp);
    const auto corpus = read_input(job.corpus, "corpus");
    if (job.methods.empty()) throw UsageError("--methods is empty");
    const FidelityOptions fo = fidelity_options(job, job.ptq.samples * job.ptq.seq_len);

    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream s;
    s << "method     objective   mean_kl     top1     ppl_q\n";
    for (Method m : job.methods) {
        PTQConfig base = job.ptq;
        if (m != base.method) from_json(nlohmann::json{{"method", to_string(m)}}, base);
        for (ObjectiveKind k : {ObjectiveKind::block_mse, ObjectiveKind::logit_mse, ObjectiveKind::logit_ce}) {
            PTQConfig c = base;
            c.objective_final = k;
            const PTQResult r = run_pipeline(fp, corpus, c);
            const FidelityReport f = evaluate_fidelity(fp, r.model, corpus, fo);
            rows.push_back({{"method", to_string(m)},
                            {"objective", to_string(k)},
                            {"mean_kl", f.mean_kl},
                            {"top1_agreement", f.top1_agreement},
                            {"perplexity_fp", f.perplexity_fp},
                            {"perplexity_q", f.perplexity_q},
                            {"ptq", r.report}});
            char line[160];
            std::snprintf(line, sizeof line, "%-9s  %-10s  %-10.6f  %-7.4f  %.4f\n", to_string(m).c_str(),
                          to_string(k).c_str(), f.mean_kl, f.top1_agreement, f.perplexity_q);
            s << line;
        }
    }
    emit(job, {{"rows", rows}}, s.str(), out);
    return kOk;
}

int cmd_pack(const JobConfig& job, std::ostream& out) {
    const auto data = read_input(job.model, "model");
    const PackedModel pm = parse_packed_model(data, job.model);
    std::size_t dense = 0;
    for (const auto& t : pm.linears) dense += t.rows * t.cols * sizeof(float);
    if (!job.out.empty()) save_checkpoint(pm.model, job.out);
    const double ratio = pm.packed_bytes ? static_cast<double>(dense) / static_cast<double>(pm.packed_bytes) : 0.0;
    const nlohmann::json result{{"method", to_string(pm.method)},
                                {"bits", pm.scheme.bits},
                                {"group_size", pm.scheme.group_size},
                                {"clamp", to_string(pm.scheme.clamp)},
                                {"linears", pm.linears.size()},
                                {"file_bytes", data.size()},
                                {"packed_linear_bytes", pm.packed_bytes},
                                {"dense_linear_bytes", dense},
                                {"compression", ratio}};
    emit(job, result,
         "valid packed model: " + to_string(pm.method) + " W" + std::to_string(pm.scheme.bits) + ", " +
             std::to_string(pm.linears.size()) + " linears\nlinear weights " + std::to_string(pm.packed_bytes) +
             " bytes packed vs " + std::to_string(dense) + " dense (" + fixed(ratio, 2) + "x)\n" +
             (job.out.empty() ? "" : "wrote " + job.out + "\n"),
         out);
    return kOk;
}

int cmd_verify(const JobConfig& job, std::ostream& out) {
    const VerifyReport r = verify_worked_examples();
    std::ostringstream s;
    for (const auto& c : r.checks) s << (c.passed ? "PASS  " : "FAIL  ") << c.name << ": " << c.detail << "\n";
    s << (r.passed() ? "all checks passed" : "verification FAILED") << "\n";
    emit(job, r, s.str(), out);
    return r.passed() ? kOk : kMismatch;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Post-training weight quantization with logit-aware final-block objectives"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Print help for every command");

    JobConfig job;
    std::string config_path;
    nlohmann::json ptq_patch = nlohmann::json::object();
    std::vector<std::pair<CLI::Option*, std::function<void()>>> appliers;

    // Flag storage; applied over the config file only when given.
    struct {
        std::string model, quantized, corpus, out, packed, report, kl_csv;
        std::string method, objective, input_mode, teacher, lr_sweep, methods, clamp;
        int bits = 0;
        std::size_t group_size = 0, lfq_k = 0, iters = 0, samples = 0, seq_len = 0;
        double lr = 0, final_lr = 0;
        std::uint64_t seed = 0;
        std::size_t steps = 0, batch = 0, d_model = 0, n_blocks = 0, n_heads = 0, d_ff = 0, max_seq_len = 0;
        double train_lr = 0;
        std::size_t corpus_bytes = 0, eval_offset = 0, eval_windows = 0, prompts = 0;
    } f;
    bool flag_skip_last = false, flag_timing = false;

    auto path_opt = [&](CLI::App* sub, const char* name, std::string& var, std::string& dst, const char* help) {
        appliers.emplace_back(sub->add_option(name, var, help), [&var, &dst] { dst = var; });
    };
    auto ptq_opt = [&](CLI::App* sub, const char* name, auto& var, const char* key, const char* help) {
        CLI::Option* o = sub->add_option(name, var, help);
        appliers.emplace_back(o, [&var, &ptq_patch, key] { ptq_patch[key] = var; });
        return o;
    };
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON job config supplying defaults")->check(CLI::ExistingFile);
        path_opt(sub, "--report", f.report, job.report, "Write the JSON report here");
        sub->add_flag("--json", job.json, "Print the JSON report instead of a summary");
    };
    auto ptq_flags = [&](CLI::App* sub) {
        ptq_opt(sub, "--method", f.method, "method", "flexround|omniquant|blockap")
            ->check(CLI::IsMember({"flexround", "omniquant", "blockap"}));
        ptq_opt(sub, "--bits", f.bits, "bits", "Weight bits");
        ptq_opt(sub, "--group-size", f.group_size, "group_size", "Group size (0 = per-channel)");
        ptq_opt(sub, "--clamp", f.clamp, "clamp", "symmetric_signed|asymmetric_unsigned");
        ptq_opt(sub, "--objective", f.objective, "objective", "Final objective: block-mse|logit-mse|logit-ce")
            ->check(CLI::IsMember({"block-mse", "logit-mse", "logit-ce", "block_mse", "logit_mse", "logit_ce"}));
        ptq_opt(sub, "--lfq-k", f.lfq_k, "lfq_k", "Number of topmost blocks given the final objective");
        appliers.emplace_back(sub->add_flag("--lfq-skip-last", flag_skip_last, "Keep block-MSE on the last block"),
                              [&] { ptq_patch["lfq_skip_last"] = flag_skip_last; });
        ptq_opt(sub, "--iters", f.iters, "iters", "Adam iterations per block");
        ptq_opt(sub, "--lr", f.lr, "lr", "Learning rate");
        ptq_opt(sub, "--final-lr", f.final_lr, "final_lr", "Learning rate of final-objective blocks (0 = --lr)");
        appliers.emplace_back(sub->add_option("--lr-sweep", f.lr_sweep, "Comma-separated learning rates to sweep"),
                              [&] {
                                  std::vector<double> v;
                                  std::stringstream ss(f.lr_sweep);
                                  for (std::string item; std::getline(ss, item, ',');) {
                                      try {
                                          v.push_back(std::stod(item));
                                      } catch (const std::exception&) {
                                          throw UsageError("--lr-sweep: bad value '" + item + "'");
                                      }
                                  }
                                  ptq_patch["lr_sweep"] = v;
                              });
        ptq_opt(sub, "--seed", f.seed, "seed", "Seed");
        ptq_opt(sub, "--samples", f.samples, "samples", "Calibration samples");
        ptq_opt(sub, "--seq-len", f.seq_len, "seq_len", "Calibration and evaluation window length");
        ptq_opt(sub, "--input-mode", f.input_mode, "input_mode", "Block inputs: fp|quantized")
            ->check(CLI::IsMember({"fp", "quantized"}));
        ptq_opt(sub, "--teacher", f.teacher, "teacher", "Final-objective target: shared-x|full-fp")
            ->check(CLI::IsMember({"shared-x", "full-fp", "shared_x", "full_fp"}));
        appliers.emplace_back(sub->add_flag("--timing", flag_timing, "Record wall time in reports"),
                              [&] { ptq_patch["timing"] = flag_timing; });
    };
    auto eval_flags = [&](CLI::App* sub) {
        appliers.emplace_back(sub->add_option("--eval-offset", f.eval_offset, "Byte offset of the evaluation region"),
                              [&] { job.eval_offset = f.eval_offset; });
        appliers.emplace_back(sub->add_option("--eval-windows", f.eval_windows, "Evaluation windows (0 = all)"),
                              [&] { job.eval_windows = f.eval_windows; });
        appliers.emplace_back(sub->add_option("--prompts", f.prompts, "Greedy-divergence prompts"),
                              [&] { job.prompts = f.prompts; });
    };
    auto set = [&](CLI::App* sub, const char* name, auto& var, auto& dst, const char* help) {
        appliers.emplace_back(sub->add_option(name, var, help), [&var, &dst] { dst = var; });
    };

    CLI::App* mk = app.add_subcommand("make-corpus", "Write a synthetic text corpus");
    common(mk);
    path_opt(mk, "--out", f.out, job.out, "Output file");
    set(mk, "--bytes", f.corpus_bytes, job.corpus_bytes, "Corpus size in bytes");
    set(mk, "--seed", f.seed, job.corpus_seed, "Seed");

    CLI::App* tr = app.add_subcommand("train-toy", "Train a toy FP model");
    common(tr);
    path_opt(tr, "--out", f.out, job.out, "Output checkpoint");
    path_opt(tr, "--corpus", f.corpus, job.corpus, "Training corpus (synthetic when omitted)");
    set(tr, "--corpus-bytes", f.corpus_bytes, job.corpus_bytes, "Synthetic corpus size");
    appliers.emplace_back(tr->add_option("--seed", f.seed, "Seed for init, batches and the synthetic corpus"), [&] {
        job.train.seed = f.seed;
        job.corpus_seed = f.seed;
    });
    set(tr, "--steps", f.steps, job.train.steps, "Training steps");
    set(tr, "--train-lr", f.train_lr, job.train.lr, "Adam learning rate");
    set(tr, "--batch", f.batch, job.train.batch, "Sequences per step");
    set(tr, "--seq-len", f.seq_len, job.train.seq_len, "Training window length");
    set(tr, "--d-model", f.d_model, job.model_config.d_model, "Model width");
    set(tr, "--blocks", f.n_blocks, job.model_config.n_blocks, "Transformer blocks");
    set(tr, "--heads", f.n_heads, job.model_config.n_heads, "Attention heads");
    set(tr, "--d-ff", f.d_ff, job.model_config.d_ff, "MLP width");
    set(tr, "--max-seq-len", f.max_seq_len, job.model_config.max_seq_len, "Context length");

    CLI::App* qz = app.add_subcommand("quantize", "Quantize an FP checkpoint");
    common(qz);
    path_opt(qz, "--model", f.model, job.model, "FP checkpoint");
    path_opt(qz, "--corpus", f.corpus, job.corpus, "Calibration corpus");
    path_opt(qz, "--out", f.out, job.out, "Output checkpoint (dequantized weights)");
    path_opt(qz, "--packed", f.packed, job.packed, "Also write a packed model");
    ptq_flags(qz);

    CLI::App* ev = app.add_subcommand("eval", "Compare a quantized model with its FP model");
    common(ev);
    path_opt(ev, "--model", f.model, job.model, "FP checkpoint");
    path_opt(ev, "--quantized", f.quantized, job.quantized, "Quantized checkpoint or packed model");
    path_opt(ev, "--corpus", f.corpus, job.corpus, "Evaluation corpus");
    path_opt(ev, "--kl-csv", f.kl_csv, job.kl_csv, "Write the per-position KL series as CSV");
    ptq_opt(ev, "--seq-len", f.seq_len, "seq_len", "Evaluation window length");
    eval_flags(ev);

    CLI::App* cmp = app.add_subcommand("compare", "Block-MSE / logit-MSE / logit-CE grid per method");
    common(cmp);
    path_opt(cmp, "--model", f.model, job.model, "FP checkpoint");
    path_opt(cmp, "--corpus", f.corpus, job.corpus, "Calibration and evaluation corpus");
    ptq_flags(cmp);
    eval_flags(cmp);
    appliers.emplace_back(cmp->add_option("--methods", f.methods, "Comma-separated methods"), [&] {
        job.methods.clear();
        std::stringstream ss(f.methods);
        for (std::string item; std::getline(ss, item, ',');) {
            try {
                job.methods.push_back(parse_method(item));
            } catch (const Error&) {
                throw UsageError("--methods: unknown method '" + item + "'");
            }
        }
    });

    CLI::App* pk = app.add_subcommand("pack", "Validate a packed model and report its size");
    common(pk);
    path_opt(pk, "--model", f.model, job.model, "Packed model file");
    path_opt(pk, "--out", f.out, job.out, "Write the dequantized checkpoint here");

    CLI::App* vf = app.add_subcommand("verify", "Check the two-token worked examples");
    common(vf);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    const std::vector<std::pair<CLI::App*, int (*)(const JobConfig&, std::ostream&)>> commands{
        {mk, cmd_make_corpus}, {tr, cmd_train_toy}, {qz, cmd_quantize}, {ev, cmd_eval},
        {cmp, cmd_compare},    {pk, cmd_pack},      {vf, cmd_verify}};
    CLI::App* sub = app.get_subcommands().front();
    job.command = sub->get_name();

    try {
        if (!config_path.empty()) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(read_file(config_path));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("config " + config_path + ": " + e.what());
            }
            from_json(j, job);
        }
        try {
            for (auto& [opt, apply] : appliers)
                if (opt->count() > 0) apply();
            from_json(ptq_patch, job.ptq);
            job.model_config.validate();
            if (job.command == "quantize" || job.command == "compare") job.ptq.validate(std::numeric_limits<std::size_t>::max());
        } catch (const ContractError& e) {
            throw UsageError(e.what());
        } catch (const DimensionError& e) {
            throw UsageError(e.what());
        }
        for (const auto& [s, fn] : commands)
            if (s == sub) return fn(job, out);
        return kUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kInput;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kInput;
    }
}

}  // namespace lfq::cli
