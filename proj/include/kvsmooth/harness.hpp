// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvsmooth/decoder.hpp"
#include "kvsmooth/error.hpp"
#include "kvsmooth/instrumentation.hpp"
#include "kvsmooth/metrics.hpp"
#include "kvsmooth/model.hpp"
#include "kvsmooth/smoother.hpp"

namespace kvsmooth::harness {

inline constexpr int kSchemaVersion = 1;

enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitSchema = 3,
    kExitVerification = 4,
    kExitNoWork = 5,
};

// Schema and annotation problems in input files map to kExitSchema; every
// other library error is a configuration problem.
int exit_code_for(Errc code) noexcept;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL) noexcept;

// Whitespace word <-> id mapper. Ids are positions in the word list.
class Vocab {
public:
    // Throws Error{Schema} for duplicate or empty words, or an unk word that
    // is not in the list.
    explicit Vocab(std::vector<std::string> words, std::optional<std::string> unk = std::nullopt);

    // Splits on whitespace. Unknown words map to unk when configured and
    // throw Error{Schema} otherwise.
    std::vector<TokenId> encode(std::string_view text) const;
    // Space-joined words; throws Error{InvalidToken} for ids outside the list.
    std::string decode(std::span<const TokenId> ids) const;
    std::optional<TokenId> find(const std::string& word) const;
    std::size_t size() const noexcept { return words_.size(); }

private:
    std::vector<std::string> words_;
    std::map<std::string, TokenId> index_;
    std::optional<TokenId> unk_;
};

// JSON document {"tokens": [...], "unk": "<unk>"}; "unk" is optional.
Vocab load_vocab(const std::filesystem::path& path);

struct Prompt {
    std::string id;
    std::string image_id;  // empty when the prompt is not tied to an image
    std::vector<TokenId> tokens;
};

// JSON lines with "tokens" (id array) or "text" (needs a vocab), plus
// optional "id" and "image_id". Missing ids default to the line number.
std::vector<Prompt> parse_prompts(std::istream& in, const Vocab* vocab, const std::string& source = "prompts");
std::vector<Prompt> load_prompts(const std::filesystem::path& path, const Vocab* vocab);

struct TraceOptions {
    bool steps = true;  // per-step z and lambda in each record
    std::vector<TokenId> tracked_ids;
    bool retain_history = false;
};

struct EvalOptions {
    std::filesystem::path lexicon;
    std::filesystem::path annotations;
    std::filesystem::path probes;  // optional
    metrics::Averaging averaging = metrics::Averaging::Micro;
    double beta = metrics::kDefaultBeta;

    bool configured() const { return !lexicon.empty() && !annotations.empty(); }
};

struct RunConfig {
    std::filesystem::path model_path;  // empty: random weights from `model`
    ModelConfig model;
    std::filesystem::path prompts_path;
    std::filesystem::path vocab_path;
    std::size_t max_new_tokens = 512;
    bool smoothing_enabled = true;
    SmootherConfig smoother;
    DecodeOptions decode;
    TraceOptions trace;
    EvalOptions eval;
    std::size_t bench_repetitions = 5;
    bool timing = false;  // wall-clock fields make records run-dependent
    std::filesystem::path out;
    int threads = 0;      // 0 keeps the OpenMP default
};

// Relative paths resolve against `base_dir`. Unknown keys and wrong types
// throw Error{InvalidConfig}.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

struct LoadedRun {
    RunConfig config;
    Model model;
    std::optional<Vocab> vocab;
    std::vector<Prompt> prompts;
    std::string digest;  // hex FNV-1a over the canonical inputs
};

// Loads weights, vocab and prompts and checks budgets against the model.
LoadedRun prepare_run(const RunConfig& config);

// Digest over the output-relevant config fields, the weights checksum and
// every prompt's tokens. Output paths, thread count and timing are excluded.
std::string config_digest(const RunConfig& config, const Model& model, std::span<const Prompt> prompts);

struct GenerationRecord {
    std::size_t index = 0;
    std::string run_id;
    std::string digest;
    Prompt prompt;
    std::vector<TokenId> generated;
    bool stopped_on_eos = false;
    std::optional<std::string> caption;
    instrumentation::TraceRecord trace;
    std::size_t peak_bytes_estimate = 0;
    double total_ms = 0.0;
};

// One record per prompt, in input order. Prompts run in parallel with an
// independent decoder and smoother each.
std::vector<GenerationRecord> run_generate(const LoadedRun& run);
nlohmann::json to_json(const GenerationRecord& r, const RunConfig& config);
void write_jsonl(std::ostream& out, std::span<const GenerationRecord> records, const RunConfig& config);

// Weights, KV cache and decoder scratch for one generation of `positions`.
std::size_t estimate_peak_bytes(const ModelConfig& model, std::size_t positions, bool retain_history,
                                bool smoothing, std::size_t queue_capacity);
// Process high-water resident set from /proc/self/status, if available.
std::optional<std::size_t> measured_peak_rss_bytes();

std::vector<metrics::Caption> captions_from_records(std::span<const GenerationRecord> records);
metrics::MetricsReport evaluate(const std::vector<metrics::Caption>& captions, const EvalOptions& eval);

enum class SweepAxis { LambdaRef, LayerStart, LayerEnd };

const char* to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(std::string_view s);
// Sets the axis field; in Fixed mode lambda_ref also sets the fixed lambda.
void apply_axis(RunConfig& config, SweepAxis axis, double value);

struct SweepRow {
    double axis_value = 0.0;
    std::optional<metrics::ChairReport> chair;
    std::size_t decisions = 0;
    double mean_lambda_tilde = 0.0;
    double min_lambda_hat = 0.0, max_lambda_hat = 0.0;
    double min_lambda_tilde = 0.0, max_lambda_tilde = 0.0;
    double tokens_per_s = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    bool aborted = false;
    std::string abort_message;
};

void write_sweep_header(std::ostream& csv, SweepAxis axis);
void write_sweep_row(std::ostream& csv, const SweepRow& row);
// Streams each row to `csv` (when given) as soon as it is computed. A failing
// sub-run stops the sweep and leaves a comment line marking the CSV partial.
SweepResult run_sweep(const RunConfig& base, SweepAxis axis, const std::vector<double>& values,
                      std::ostream* csv = nullptr);

struct LatencySummary {
    std::size_t tokens = 0;  // per repetition
    double median_ms_per_token = 0.0, min_ms_per_token = 0.0, max_ms_per_token = 0.0;
    double median_tokens_per_s = 0.0, min_tokens_per_s = 0.0, max_tokens_per_s = 0.0;
    double median_s_per_caption = 0.0;
};

struct BenchReport {
    std::size_t repetitions = 0;
    std::size_t prompts = 0;
    LatencySummary baseline;
    LatencySummary smoothed;
    double overhead_ratio = 0.0;  // smoothed / baseline - 1 on median ms/token
    std::optional<std::size_t> peak_rss_bytes;
    std::size_t baseline_bytes_estimate = 0;
    std::size_t smoothed_bytes_estimate = 0;
    std::string memory_method;
    double wall_seconds = 0.0;
};

// Alternates baseline and smoothed passes over every prompt. Throws
// Error{InvalidConfig} for fewer than 3 repetitions.
BenchReport run_bench(const LoadedRun& run, std::size_t repetitions);
nlohmann::json to_json(const BenchReport& r);

// Subcommand bodies. They print to `out`/`err`, write files named by the
// config and return an exit code rather than throwing.
int cmd_generate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_eval(const std::filesystem::path& captions, const EvalOptions& eval, const std::filesystem::path& report,
             std::ostream& out, std::ostream& err);
int cmd_sweep(const RunConfig& config, SweepAxis axis, const std::vector<double>& values, std::ostream& out,
              std::ostream& err);
int cmd_bench(const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace kvsmooth::harness
