// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "kvsmooth/harness.hpp"
#include "kvsmooth/kernels.hpp"

namespace kvsmooth::harness {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

GenerationRecord generate_one(const LoadedRun& run, std::size_t index) {
    const auto& cfg = run.config;
    const auto& prompt = run.prompts[index];
    Decoder decoder(run.model, cfg.decode);
    std::unique_ptr<EmaSmoother> smoother;
    if (cfg.smoothing_enabled) smoother = make_interceptor(cfg.smoother, run.model.config);
    instrumentation::TraceRecorder recorder(cfg.trace.tracked_ids, cfg.trace.retain_history,
                                            cfg.smoothing_enabled ? cfg.smoother.eps : numerics::kDefaultEntropyEps);

    const auto t0 = Clock::now();
    const auto result = decoder.greedy_decode(prompt.tokens, cfg.max_new_tokens, smoother.get(), &recorder);
    const double elapsed = ms_since(t0);
    if (smoother) recorder.attach_decisions(smoother->decisions());

    GenerationRecord r;
    r.index = index;
    r.digest = run.digest;
    r.run_id = run.digest + "-" + std::to_string(index);
    r.prompt = prompt;
    r.generated = result.generated;
    r.stopped_on_eos = result.stopped_on_eos;
    if (run.vocab) r.caption = run.vocab->decode(result.generated);
    r.trace = recorder.take();
    r.peak_bytes_estimate = estimate_peak_bytes(run.model.config, prompt.tokens.size() + result.generated.size(),
                                                cfg.trace.retain_history, cfg.smoothing_enabled,
                                                cfg.smoother.queue_capacity);
    r.total_ms = elapsed;
    return r;
}

json optional_array(const std::vector<std::optional<SmoothDecision>>& ds, bool hat) {
    json a = json::array();
    for (const auto& d : ds) {
        if (!d) {
            a.push_back(nullptr);
        } else if (hat) {
            a.push_back(d->lambda_hat ? json(*d->lambda_hat) : json(nullptr));
        } else {
            a.push_back(d->lambda_tilde);
        }
    }
    return a;
}

}  // namespace

std::vector<GenerationRecord> run_generate(const LoadedRun& run) {
    const std::size_t n = run.prompts.size();
    std::vector<GenerationRecord> out(n);
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        try {
            out[i] = generate_one(run, static_cast<std::size_t>(i));
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

json to_json(const GenerationRecord& r, const RunConfig& config) {
    json j = {{"schema_version", kSchemaVersion},
              {"run_id", r.run_id},
              {"config_digest", r.digest},
              {"index", r.index},
              {"prompt_id", r.prompt.id},
              {"image_id", r.prompt.image_id},
              {"prompt", r.prompt.tokens},
              {"generated", r.generated},
              {"stopped_on_eos", r.stopped_on_eos},
              {"smoothing", config.smoothing_enabled},
              {"peak_bytes_estimate", r.peak_bytes_estimate}};
    if (r.caption) j["caption"] = *r.caption;
    if (config.trace.steps) {
        json steps = json::array();
        for (const auto& s : r.trace.steps) {
            json step = {{"position", s.position}, {"token", s.emitted}, {"z", s.z}};
            if (config.smoothing_enabled) {
                step["lambda_hat"] = optional_array(s.decisions, true);
                step["lambda_tilde"] = optional_array(s.decisions, false);
            }
            if (!config.trace.tracked_ids.empty()) step["tracked_logits"] = s.tracked_logits;
            steps.push_back(std::move(step));
        }
        j["steps"] = std::move(steps);
        if (!config.trace.tracked_ids.empty()) j["tracked_ids"] = config.trace.tracked_ids;
    }
    if (config.timing) {
        const double tokens = static_cast<double>(std::max<std::size_t>(r.generated.size(), 1));
        j["timing"] = {{"total_ms", r.total_ms}, {"ms_per_token", r.total_ms / tokens}};
    }
    return j;
}

void write_jsonl(std::ostream& out, std::span<const GenerationRecord> records, const RunConfig& config) {
    for (const auto& r : records) out << to_json(r, config).dump() << '\n';
}

std::size_t estimate_peak_bytes(const ModelConfig& m, std::size_t positions, bool retain_history, bool smoothing,
                                std::size_t queue_capacity) {
    const std::size_t f = sizeof(float), d = sizeof(double);
    const std::size_t weights = m.vocab_size * m.hidden_dim * 2 + m.hidden_dim +
                                m.num_layers * (4 * m.hidden_dim * m.num_heads * m.head_dim + 2 * m.hidden_dim +
                                                2 * m.hidden_dim * m.ffn_dim);
    const std::size_t cache = 2 * m.num_layers * m.max_seq_len * m.num_heads * m.head_dim;
    const std::size_t scratch = 6 * m.hidden_dim + m.ffn_dim + m.vocab_size + 3 * m.num_heads * m.head_dim;
    std::size_t bytes = (weights + cache + scratch) * f + m.num_layers * m.num_heads * m.max_seq_len * d;
    if (smoothing) bytes += m.num_layers * (queue_capacity * d + m.num_heads * m.head_dim * f);
    if (retain_history) bytes += m.num_layers * m.num_heads * positions * (positions + 1) / 2 * d;
    return bytes;
}

std::optional<std::size_t> measured_peak_rss_bytes() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream fields(line.substr(6));
            std::size_t kb = 0;
            if (fields >> kb) return kb * 1024;
        }
    }
    return std::nullopt;
}

std::vector<metrics::Caption> captions_from_records(std::span<const GenerationRecord> records) {
    std::vector<metrics::Caption> out;
    for (const auto& r : records) {
        if (!r.caption) throw Error(Errc::InvalidConfig, "records carry no caption text; configure a vocab");
        if (r.prompt.image_id.empty()) throw Error(Errc::Schema, "prompt '" + r.prompt.id + "' has no image_id");
        out.push_back({r.prompt.image_id, *r.caption});
    }
    return out;
}

metrics::MetricsReport evaluate(const std::vector<metrics::Caption>& captions, const EvalOptions& eval) {
    if (!eval.configured()) throw Error(Errc::InvalidConfig, "eval needs a lexicon and annotations");
    const auto lexicon = metrics::load_lexicon(eval.lexicon);
    const auto annotations = metrics::load_annotations(eval.annotations, lexicon);
    metrics::MetricsReport report;
    report.chair = metrics::chair_scores(captions, annotations, lexicon, eval.averaging);
    if (!eval.probes.empty()) {
        const auto probes = metrics::load_probes(eval.probes);
        metrics::validate_probes(probes, annotations, lexicon);
        report.opope = metrics::opope_scores(captions, probes, lexicon, eval.beta);
    }
    return report;
}

// --- sweep ------------------------------------------------------------------

const char* to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::LambdaRef: return "lambda_ref";
        case SweepAxis::LayerStart: return "layer_start";
        case SweepAxis::LayerEnd: return "layer_end";
    }
    return "unknown";
}

SweepAxis sweep_axis_from_string(std::string_view s) {
    if (s == "lambda_ref") return SweepAxis::LambdaRef;
    if (s == "layer_start") return SweepAxis::LayerStart;
    if (s == "layer_end") return SweepAxis::LayerEnd;
    throw Error(Errc::InvalidConfig, "unknown sweep axis '" + std::string(s) + "'");
}

void apply_axis(RunConfig& config, SweepAxis axis, double value) {
    auto as_layer = [&] {
        if (!(value >= 0.0) || value != std::floor(value)) {
            throw Error(Errc::InvalidConfig, "layer axis values must be non-negative integers");
        }
        return static_cast<std::size_t>(value);
    };
    switch (axis) {
        case SweepAxis::LambdaRef:
            config.smoother.lambda_ref = value;
            if (config.smoother.mode == SmoothMode::Fixed) config.smoother.fixed_lambda = value;
            break;
        case SweepAxis::LayerStart: config.smoother.layer_start = as_layer(); break;
        case SweepAxis::LayerEnd: config.smoother.layer_end = as_layer(); break;
    }
}

namespace {

std::string fmt(double v) {
    if (!std::isfinite(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

void write_sweep_header(std::ostream& csv, SweepAxis axis) {
    csv << "# schema_version=" << kSchemaVersion << '\n'
        << "# axis=" << to_string(axis) << '\n'
        << "axis_value,chair_s,chair_i,precision,recall,f1,mean_lambda_tilde,tokens_per_s,"
           "decisions,min_lambda_hat,max_lambda_hat,min_lambda_tilde,max_lambda_tilde\n";
}

void write_sweep_row(std::ostream& csv, const SweepRow& r) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto& c = r.chair;
    const bool any = r.decisions > 0;
    csv << fmt(r.axis_value) << ',' << fmt(c ? c->chair_s : nan) << ',' << fmt(c ? c->chair_i : nan) << ','
        << fmt(c ? c->precision : nan) << ',' << fmt(c ? c->recall : nan) << ',' << fmt(c ? c->f1 : nan) << ','
        << fmt(any ? r.mean_lambda_tilde : nan) << ',' << fmt(r.tokens_per_s) << ',' << r.decisions << ','
        << fmt(any ? r.min_lambda_hat : nan) << ',' << fmt(any ? r.max_lambda_hat : nan) << ','
        << fmt(any ? r.min_lambda_tilde : nan) << ',' << fmt(any ? r.max_lambda_tilde : nan) << '\n';
    csv.flush();
}

SweepResult run_sweep(const RunConfig& base, SweepAxis axis, const std::vector<double>& values, std::ostream* csv) {
    SweepResult result;
    if (values.empty()) throw Error(Errc::InvalidConfig, "sweep needs at least one axis value");
    if (csv) write_sweep_header(*csv, axis);
    for (double v : values) {
        try {
            RunConfig cfg = base;
            apply_axis(cfg, axis, v);
            const auto run = prepare_run(cfg);
            const auto t0 = Clock::now();
            const auto records = run_generate(run);
            const double seconds = ms_since(t0) / 1000.0;

            SweepRow row;
            row.axis_value = v;
            std::size_t tokens = 0;
            double sum = 0.0;
            row.min_lambda_hat = row.min_lambda_tilde = std::numeric_limits<double>::infinity();
            row.max_lambda_hat = row.max_lambda_tilde = -std::numeric_limits<double>::infinity();
            for (const auto& r : records) {
                tokens += r.generated.size();
                for (const auto& s : r.trace.steps) {
                    for (const auto& d : s.decisions) {
                        if (!d) continue;
                        ++row.decisions;
                        sum += d->lambda_tilde;
                        row.min_lambda_tilde = std::min(row.min_lambda_tilde, d->lambda_tilde);
                        row.max_lambda_tilde = std::max(row.max_lambda_tilde, d->lambda_tilde);
                        const double hat = d->lambda_hat.value_or(d->lambda_tilde);
                        row.min_lambda_hat = std::min(row.min_lambda_hat, hat);
                        row.max_lambda_hat = std::max(row.max_lambda_hat, hat);
                    }
                }
            }
            if (row.decisions) row.mean_lambda_tilde = sum / static_cast<double>(row.decisions);
            row.tokens_per_s = seconds > 0.0 ? static_cast<double>(tokens) / seconds : 0.0;
            if (cfg.eval.configured() && run.vocab) row.chair = evaluate(captions_from_records(records), cfg.eval).chair;
            if (csv) write_sweep_row(*csv, row);
            result.rows.push_back(std::move(row));
        } catch (const std::exception& e) {
            result.aborted = true;
            result.abort_message = "axis_value=" + fmt(v) + ": " + e.what();
            if (csv) {
                *csv << "# partial: sweep aborted at " << result.abort_message << '\n';
                csv->flush();
            }
            break;
        }
    }
    return result;
}

// --- bench ------------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LatencySummary summarize(const std::vector<double>& ms, std::size_t tokens, std::size_t prompts) {
    LatencySummary s;
    s.tokens = tokens;
    std::vector<double> per_token, per_s, per_caption;
    for (double m : ms) {
        per_token.push_back(m / static_cast<double>(tokens));
        per_s.push_back(static_cast<double>(tokens) / (m / 1000.0));
        per_caption.push_back(m / 1000.0 / static_cast<double>(prompts));
    }
    s.median_ms_per_token = median(per_token);
    s.min_ms_per_token = *std::min_element(per_token.begin(), per_token.end());
    s.max_ms_per_token = *std::max_element(per_token.begin(), per_token.end());
    s.median_tokens_per_s = median(per_s);
    s.min_tokens_per_s = *std::min_element(per_s.begin(), per_s.end());
    s.max_tokens_per_s = *std::max_element(per_s.begin(), per_s.end());
    s.median_s_per_caption = median(per_caption);
    return s;
}

}  // namespace

BenchReport run_bench(const LoadedRun& run, std::size_t repetitions) {
    if (repetitions < 3) throw Error(Errc::InvalidConfig, "bench needs at least 3 repetitions");
    if (run.prompts.empty()) throw Error(Errc::EmptyInput, "bench needs prompts");
    const auto& cfg = run.config;
    SmootherConfig sc = cfg.smoother;
    sc.validate(run.model.config.num_layers);

    const auto wall0 = Clock::now();
    Decoder decoder(run.model, cfg.decode);
    auto smoother = make_interceptor(sc, run.model.config);
    smoother->set_record_decisions(false);
    KVCache cache(run.model.config);

    auto pass = [&](StepInterceptor* hook, std::size_t& tokens) {
        tokens = 0;
        const auto t0 = Clock::now();
        for (const auto& p : run.prompts) {
            cache.clear();
            tokens += decoder.greedy_decode(cache, p.tokens, cfg.max_new_tokens, hook).generated.size();
        }
        return ms_since(t0);
    };

    std::size_t base_tokens = 0, smooth_tokens = 0;
    pass(nullptr, base_tokens);  // warm-up
    std::vector<double> base_ms, smooth_ms;
    for (std::size_t r = 0; r < repetitions; ++r) {
        base_ms.push_back(pass(nullptr, base_tokens));
        smooth_ms.push_back(pass(smoother.get(), smooth_tokens));
    }

    BenchReport rep;
    rep.repetitions = repetitions;
    rep.prompts = run.prompts.size();
    rep.baseline = summarize(base_ms, base_tokens, run.prompts.size());
    rep.smoothed = summarize(smooth_ms, smooth_tokens, run.prompts.size());
    rep.overhead_ratio = rep.smoothed.median_ms_per_token / rep.baseline.median_ms_per_token - 1.0;
    rep.peak_rss_bytes = measured_peak_rss_bytes();
    rep.memory_method = rep.peak_rss_bytes ? "procfs VmHWM (process high-water RSS) plus analytic estimate"
                                           : "analytic estimate only";
    std::size_t longest = 0;
    for (const auto& p : run.prompts) longest = std::max(longest, p.tokens.size() + cfg.max_new_tokens);
    rep.baseline_bytes_estimate = estimate_peak_bytes(run.model.config, longest, false, false, 0);
    rep.smoothed_bytes_estimate = estimate_peak_bytes(run.model.config, longest, false, true, sc.queue_capacity);
    rep.wall_seconds = ms_since(wall0) / 1000.0;
    return rep;
}

json to_json(const BenchReport& r) {
    auto lat = [](const LatencySummary& s) {
        return json{{"tokens", s.tokens},
                    {"ms_per_token", {{"median", s.median_ms_per_token}, {"min", s.min_ms_per_token}, {"max", s.max_ms_per_token}}},
                    {"tokens_per_s", {{"median", s.median_tokens_per_s}, {"min", s.min_tokens_per_s}, {"max", s.max_tokens_per_s}}},
                    {"s_per_caption", s.median_s_per_caption}};
    };
    return json{{"schema_version", kSchemaVersion},
                {"repetitions", r.repetitions},
                {"prompts", r.prompts},
                {"baseline", lat(r.baseline)},
                {"smoothed", lat(r.smoothed)},
                {"overhead_ratio", r.overhead_ratio},
                {"peak_rss_bytes", r.peak_rss_bytes ? json(*r.peak_rss_bytes) : json(nullptr)},
                {"baseline_bytes_estimate", r.baseline_bytes_estimate},
                {"smoothed_bytes_estimate", r.smoothed_bytes_estimate},
                {"memory_method", r.memory_method},
                {"wall_seconds", r.wall_seconds}};
}

// --- commands -----------------------------------------------------------------

namespace {

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

void apply_threads(const RunConfig& c) {
    if (c.threads > 0) kernels::set_num_threads(c.threads);
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    return out;
}

}  // namespace

int cmd_generate(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        apply_threads(config);
        const auto run = prepare_run(config);
        if (run.prompts.empty()) {
            err << "no prompts in " << config.prompts_path.string() << "; nothing to do\n";
            return static_cast<int>(kExitNoWork);
        }
        const auto records = run_generate(run);
        if (config.out.empty()) {
            write_jsonl(out, records, run.config);
        } else {
            auto file = open_out(config.out);
            write_jsonl(file, records, run.config);
            out << "wrote " << records.size() << " records to " << config.out.string() << " (digest " << run.digest
                << ")\n";
        }
        return static_cast<int>(kExitOk);
    });
}

int cmd_eval(const std::filesystem::path& captions, const EvalOptions& eval, const std::filesystem::path& report,
             std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto caps = metrics::load_captions(captions);
        if (caps.empty()) {
            err << "no captions in " << captions.string() << "; nothing to do\n";
            return static_cast<int>(kExitNoWork);
        }
        const auto rep = evaluate(caps, eval);
        out << metrics::format_table(rep);
        if (!report.empty()) {
            auto j = metrics::to_json(rep);
            j["schema_version"] = kSchemaVersion;
            auto file = open_out(report);
            file << j.dump(2) << '\n';
        }
        return static_cast<int>(kExitOk);
    });
}

int cmd_sweep(const RunConfig& config, SweepAxis axis, const std::vector<double>& values, std::ostream& out,
              std::ostream& err) {
    return guarded(err, [&] {
        apply_threads(config);
        SweepResult result;
        if (config.out.empty()) {
            result = run_sweep(config, axis, values, &out);
        } else {
            auto file = open_out(config.out);
            result = run_sweep(config, axis, values, &file);
            out << "wrote " << result.rows.size() << " sweep rows to " << config.out.string() << '\n';
        }
        if (result.aborted) {
            err << "sweep aborted: " << result.abort_message << '\n';
            return static_cast<int>(kExitConfig);
        }
        return static_cast<int>(kExitOk);
    });
}

int cmd_bench(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        apply_threads(config);
        const auto run = prepare_run(config);
        if (run.prompts.empty()) {
            err << "no prompts; nothing to benchmark\n";
            return static_cast<int>(kExitNoWork);
        }
        const auto rep = run_bench(run, config.bench_repetitions);
        char buf[160];
        out << "bench: " << rep.prompts << " prompts x " << rep.repetitions << " repetitions\n";
        const std::pair<const char*, const LatencySummary*> rows[] = {{"baseline", &rep.baseline}, {"smoothed", &rep.smoothed}};
        for (const auto& [name, s] : rows) {
            std::snprintf(buf, sizeof buf,
                          "  %-9s %8.4f ms/token [%.4f, %.4f]  %9.1f tokens/s [%.1f, %.1f]  %.4f s/caption\n", name,
                          s->median_ms_per_token, s->min_ms_per_token, s->max_ms_per_token, s->median_tokens_per_s,
                          s->min_tokens_per_s, s->max_tokens_per_s, s->median_s_per_caption);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "  overhead  %+.2f%%\n", 100.0 * rep.overhead_ratio);
        out << buf;
        if (rep.peak_rss_bytes) out << "  peak RSS  " << *rep.peak_rss_bytes / (1024.0 * 1024.0) << " MiB\n";
        out << "  memory    " << rep.memory_method << '\n';
        if (!config.out.empty()) {
            auto file = open_out(config.out);
            file << to_json(rep).dump(2) << '\n';
        }
        return static_cast<int>(kExitOk);
    });
}

}  // namespace kvsmooth::harness
