// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kvsmooth/harness.hpp"
#include "kvsmooth/kernels.hpp"
#include "kvsmooth/verify.hpp"

namespace {

using namespace kvsmooth;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> threads;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "Run config JSON")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "Seed for random model weights or verification draws");
    app->add_option("--out", c.out, "Output path");
    app->add_option("--threads", c.threads, "OpenMP worker threads")->check(CLI::PositiveNumber);
}

// Loads the config file (or defaults) and applies common flag overrides.
harness::RunConfig resolve(const Common& c) {
    harness::RunConfig cfg = c.config.empty() ? harness::RunConfig{} : harness::load_run_config(c.config);
    if (c.seed) cfg.model.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    if (c.threads) cfg.threads = *c.threads;
    return cfg;
}

std::vector<double> parse_values(const std::string& list) {
    std::vector<double> out;
    std::stringstream in(list);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw Error(Errc::InvalidConfig, "bad axis value '" + item + "'");
        out.push_back(v);
    }
    return out;
}

template <typename Fn>
int run_guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return harness::exit_code_for(e.code());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic decoder runtime with entropy-guided KV-cache smoothing"};
    app.require_subcommand(1);

    Common gen_c;
    std::optional<std::size_t> max_new;
    std::string prompts;
    bool no_smooth = false, timing = false;
    auto* gen = app.add_subcommand("generate", "Greedy generation to JSONL records");
    add_common(gen, gen_c);
    gen->add_option("--prompts", prompts, "Prompt JSONL (overrides config)");
    gen->add_option("--max-new-tokens", max_new, "Generation budget per prompt");
    gen->add_flag("--no-smooth", no_smooth, "Disable the smoother");
    gen->add_flag("--timing", timing, "Include wall-clock fields (records stop being reproducible)");

    Common eval_c;
    std::string captions, lexicon, annotations, probes, averaging;
    std::optional<double> beta;
    auto* ev = app.add_subcommand("eval", "CHAIR and OPOPE metrics over captions or generation records");
    add_common(ev, eval_c);
    ev->add_option("--captions", captions, "Captions or records JSONL")->required()->check(CLI::ExistingFile);
    ev->add_option("--lexicon", lexicon, "Object lexicon JSON");
    ev->add_option("--annotations", annotations, "Ground-truth annotations JSON");
    ev->add_option("--probes", probes, "OPOPE probes JSONL");
    ev->add_option("--averaging", averaging, "micro or macro precision/recall")->check(CLI::IsMember({"micro", "macro"}));
    ev->add_option("--beta", beta, "F-beta weight");

    Common sweep_c;
    std::string axis, values;
    auto* sw = app.add_subcommand("sweep", "Generate and evaluate across one smoother axis; writes CSV");
    add_common(sw, sweep_c);
    sw->add_option("--axis", axis, "lambda_ref, layer_start or layer_end")
        ->required()
        ->check(CLI::IsMember({"lambda_ref", "layer_start", "layer_end"}));
    sw->add_option("--values", values, "Comma-separated axis values")->required();

    Common bench_c;
    std::optional<std::size_t> reps;
    auto* be = app.add_subcommand("bench", "Baseline vs smoothed token latency");
    add_common(be, bench_c);
    be->add_option("--repetitions", reps, "Timed repetitions (>= 3)");

    Common verify_c;
    std::string fault;
    auto* ve = app.add_subcommand("verify", "Property suites for the smoothing invariants");
    add_common(ve, verify_c);
    ve->add_option("--inject-fault", fault, "Deliberately break a suite to prove it can fail")
        ->check(CLI::IsMember({"rank"}));

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        return run_guarded([&] {
            auto cfg = resolve(gen_c);
            if (!prompts.empty()) cfg.prompts_path = prompts;
            if (max_new) cfg.max_new_tokens = *max_new;
            if (no_smooth) cfg.smoothing_enabled = false;
            if (timing) cfg.timing = true;
            return harness::cmd_generate(cfg, std::cout, std::cerr);
        });
    }
    if (ev->parsed()) {
        return run_guarded([&] {
            auto cfg = resolve(eval_c);
            auto e = cfg.eval;
            if (!lexicon.empty()) e.lexicon = lexicon;
            if (!annotations.empty()) e.annotations = annotations;
            if (!probes.empty()) e.probes = probes;
            if (!averaging.empty()) e.averaging = metrics::averaging_from_string(averaging);
            if (beta) e.beta = *beta;
            return harness::cmd_eval(captions, e, cfg.out, std::cout, std::cerr);
        });
    }
    if (sw->parsed()) {
        return run_guarded([&] {
            const auto cfg = resolve(sweep_c);
            return harness::cmd_sweep(cfg, harness::sweep_axis_from_string(axis), parse_values(values), std::cout,
                                      std::cerr);
        });
    }
    if (be->parsed()) {
        return run_guarded([&] {
            auto cfg = resolve(bench_c);
            if (reps) cfg.bench_repetitions = *reps;
            return harness::cmd_bench(cfg, std::cout, std::cerr);
        });
    }
    // verify
    verify::Options opts;
    if (verify_c.seed) opts.seed = *verify_c.seed;
    opts.inject_rank_fault = fault == "rank";
    if (verify_c.threads) kernels::set_num_threads(*verify_c.threads);
    if (verify_c.out.empty()) return verify::cmd_verify(opts, std::cout);
    std::ofstream file(verify_c.out);
    std::ostringstream text;
    const int rc = verify::cmd_verify(opts, text);
    std::cout << text.str();
    file << text.str();
    return rc;
}
