#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfq/eval.hpp"
#include "lfq/model.hpp"
#include "lfq/ptq.hpp"

namespace lfq::cli {

enum ExitCode : int {
    kOk = 0,
    kUsage = 2,
    kInput = 3,
    kNumeric = 4,
    kMismatch = 5,
};

// Everything a command reads. A config file supplies defaults, flags
// override, and the resolved job is echoed into every report.
struct JobConfig {
    std::string command;
    PTQConfig ptq;
    std::string model;      // input checkpoint (FP model, or packed file for `pack`)
    std::string quantized;  // `eval`: quantized checkpoint or packed file
    std::string corpus;
    std::string out;
    std::string packed;     // `quantize`: also write a packed model here
    std::string report;
    std::string kl_csv;     // `eval`: per-position KL series
    bool json = false;      // print the report instead of the summary

    // train-toy / make-corpus
    ModelConfig model_config;
    TrainOptions train;
    std::size_t corpus_bytes = 512 * 1024;  // synthetic corpus size without --corpus
    std::uint64_t corpus_seed = 0;

    // eval / compare
    std::optional<std::size_t> eval_offset;  // compare defaults to just past the calibration bytes
    std::size_t eval_windows = 0;            // 0 = all
    std::size_t prompts = 4;
    std::vector<Method> methods{Method::flexround, Method::omniquant, Method::blockap};
};

void to_json(nlohmann::json& j, const JobConfig& c);
// Keys absent from `j` keep their current values.
void from_json(const nlohmann::json& j, JobConfig& c);

// Each command writes its artifacts, prints a summary (or the JSON report)
// to `out`, and returns an exit code. Library errors propagate.
int cmd_train_toy(const JobConfig& job, std::ostream& out);
int cmd_make_corpus(const JobConfig& job, std::ostream& out);
int cmd_quantize(const JobConfig& job, std::ostream& out);
int cmd_eval(const JobConfig& job, std::ostream& out);
int cmd_compare(const JobConfig& job, std::ostream& out);
int cmd_pack(const JobConfig& job, std::ostream& out);
int cmd_verify(const JobConfig& job, std::ostream& out);

// Parses argv, runs the command and maps errors onto exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lfq::cli
