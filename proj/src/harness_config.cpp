// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "kvsmooth/harness.hpp"

namespace kvsmooth::harness {

using nlohmann::json;

int exit_code_for(Errc code) noexcept {
    switch (code) {
        case Errc::Schema:
        case Errc::MissingAnnotation: return kExitSchema;
        default: return kExitConfig;
    }
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash) noexcept {
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

// --- vocab ------------------------------------------------------------------

Vocab::Vocab(std::vector<std::string> words, std::optional<std::string> unk) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        const auto& w = words_[i];
        if (w.empty() || std::any_of(w.begin(), w.end(), [](unsigned char c) { return std::isspace(c); })) {
            throw Error(Errc::Schema, "vocab entry " + std::to_string(i) + " is empty or contains whitespace");
        }
        if (!index_.emplace(w, static_cast<TokenId>(i)).second) throw Error(Errc::Schema, "duplicate vocab word '" + w + "'");
    }
    if (unk) {
        unk_ = find(*unk);
        if (!unk_) throw Error(Errc::Schema, "unk word '" + *unk + "' is not in the vocab");
    }
}

std::optional<TokenId> Vocab::find(const std::string& word) const {
    const auto it = index_.find(word);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        if (const auto id = find(word)) {
            ids.push_back(*id);
        } else if (unk_) {
            ids.push_back(*unk_);
        } else {
            throw Error(Errc::Schema, "word '" + word + "' is not in the vocab");
        }
    }
    return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id >= words_.size()) throw Error(Errc::InvalidToken, "token " + std::to_string(id) + " is outside the vocab");
        if (!out.empty()) out.push_back(' ');
        out += words_[id];
    }
    return out;
}

namespace {

std::ifstream open_or_throw(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    return in;
}

}  // namespace

Vocab load_vocab(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(Errc::Schema, path.string() + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("tokens") || !j["tokens"].is_array()) {
        throw Error(Errc::Schema, path.string() + ": expected {\"tokens\": [...]}");
    }
    std::vector<std::string> words;
    for (const auto& w : j["tokens"]) {
        if (!w.is_string()) throw Error(Errc::Schema, path.string() + ": vocab tokens must be strings");
        words.push_back(w.get<std::string>());
    }
    std::optional<std::string> unk;
    if (j.contains("unk")) {
        if (!j["unk"].is_string()) throw Error(Errc::Schema, path.string() + ": \"unk\" must be a string");
        unk = j["unk"].get<std::string>();
    }
    return Vocab(std::move(words), std::move(unk));
}

// --- prompts ----------------------------------------------------------------

std::vector<Prompt> parse_prompts(std::istream& in, const Vocab* vocab, const std::string& source) {
    std::vector<Prompt> out;
    std::string text;
    std::size_t line = 0;
    auto fail = [&](const std::string& what) -> void {
        throw Error(Errc::Schema, source + ":" + std::to_string(line) + ": " + what);
    };
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            fail(e.what());
        }
        if (!j.is_object()) fail("expected a JSON object");
        Prompt p;
        p.id = std::to_string(line);
        if (j.contains("id")) {
            if (j["id"].is_string()) {
                p.id = j["id"].get<std::string>();
            } else if (j["id"].is_number_integer()) {
                p.id = std::to_string(j["id"].get<long long>());
            } else {
                fail("\"id\" must be a string or integer");
            }
        }
        if (j.contains("image_id")) {
            if (!j["image_id"].is_string()) fail("\"image_id\" must be a string");
            p.image_id = j["image_id"].get<std::string>();
        }
        const bool has_tokens = j.contains("tokens"), has_text = j.contains("text");
        if (has_tokens == has_text) fail("exactly one of \"tokens\" or \"text\" is required");
        if (has_tokens) {
            if (!j["tokens"].is_array()) fail("\"tokens\" must be an array");
            for (const auto& t : j["tokens"]) {
                if (!t.is_number_unsigned()) fail("token ids must be non-negative integers");
                p.tokens.push_back(t.get<TokenId>());
            }
        } else {
            if (!j["text"].is_string()) fail("\"text\" must be a string");
            if (!vocab) fail("text prompts need a vocab");
            try {
                p.tokens = vocab->encode(j["text"].get<std::string>());
            } catch (const Error& e) {
                fail(e.what());
            }
        }
        if (p.tokens.empty()) fail("prompt has no tokens");
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Prompt> load_prompts(const std::filesystem::path& path, const Vocab* vocab) {
    auto in = open_or_throw(path);
    return parse_prompts(in, vocab, path.string());
}

// --- run config ---------------------------------------------------------------

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(Errc::InvalidConfig, "config: " + what); }

void check_keys(const json& obj, const char* where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) config_error(std::string(where) + " must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            config_error(std::string("unknown key '") + key + "' in " + where);
        }
    }
}

void check_enum(const json& obj, const char* key, std::initializer_list<const char*> allowed) {
    if (!obj.contains(key)) return;
    const auto& v = obj[key];
    if (!v.is_string() || std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return v == a; })) {
        config_error(std::string("invalid value for '") + key + "'");
    }
}

std::filesystem::path resolve(const json& v, const std::filesystem::path& base) {
    if (!v.is_string()) config_error("paths must be strings");
    std::filesystem::path p = v.get<std::string>();
    if (p.empty() || p.is_absolute()) return p;
    return (base / p).lexically_normal();
}

std::string path_string(const std::filesystem::path& p) { return p.generic_string(); }

}  // namespace

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
    RunConfig c;
    try {
        check_keys(j, "config",
                   {"schema_version", "model", "prompts", "vocab", "max_new_tokens", "smoother", "decode", "trace",
                    "eval", "bench", "timing", "out", "threads"});
        if (j.contains("schema_version") && j["schema_version"] != kSchemaVersion) {
            config_error("unsupported schema_version " + j["schema_version"].dump());
        }
        if (j.contains("model")) {
            const auto& m = j["model"];
            check_keys(m, "model",
                       {"path", "num_layers", "num_heads", "head_dim", "hidden_dim", "ffn_dim", "vocab_size",
                        "max_seq_len", "norm_kind", "rope_base", "seed"});
            check_enum(m, "norm_kind", {"pre-norm-rms", "pre-norm-layer"});
            if (m.contains("path")) {
                c.model_path = resolve(m["path"], base_dir);
                if (m.size() > 2 || (m.size() == 2 && !m.contains("seed"))) {
                    config_error("model.path excludes inline model fields");
                }
            }
            c.model = m.get<ModelConfig>();
        }
        if (j.contains("prompts")) c.prompts_path = resolve(j["prompts"], base_dir);
        if (j.contains("vocab")) c.vocab_path = resolve(j["vocab"], base_dir);
        c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
        if (j.contains("smoother")) {
            const auto& s = j["smoother"];
            check_keys(s, "smoother",
                       {"enabled", "lambda_ref", "clip_width", "queue_capacity", "layer_start", "layer_end", "target",
                        "mode", "lambda", "eps"});
            check_enum(s, "target", {"key_value", "key_only", "attn_output"});
            check_enum(s, "mode", {"adaptive", "fixed"});
            c.smoothing_enabled = s.value("enabled", true);
            c.smoother = s.get<SmootherConfig>();
        }
        if (j.contains("decode")) {
            const auto& d = j["decode"];
            check_keys(d, "decode", {"smooth_before_output", "intercept_prefill", "eos_id"});
            c.decode.smooth_before_output = d.value("smooth_before_output", false);
            c.decode.intercept_prefill = d.value("intercept_prefill", false);
            if (d.contains("eos_id") && !d["eos_id"].is_null()) c.decode.eos_id = d["eos_id"].get<TokenId>();
        }
        if (j.contains("trace")) {
            const auto& t = j["trace"];
            check_keys(t, "trace", {"steps", "tracked_ids", "retain_history"});
            c.trace.steps = t.value("steps", true);
            c.trace.tracked_ids = t.value("tracked_ids", std::vector<TokenId>{});
            c.trace.retain_history = t.value("retain_history", false);
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            check_keys(e, "eval", {"lexicon", "annotations", "probes", "averaging", "beta"});
            check_enum(e, "averaging", {"micro", "macro"});
            if (e.contains("lexicon")) c.eval.lexicon = resolve(e["lexicon"], base_dir);
            if (e.contains("annotations")) c.eval.annotations = resolve(e["annotations"], base_dir);
            if (e.contains("probes")) c.eval.probes = resolve(e["probes"], base_dir);
            if (e.contains("averaging")) c.eval.averaging = metrics::averaging_from_string(e["averaging"].get<std::string>());
            c.eval.beta = e.value("beta", c.eval.beta);
        }
        if (j.contains("bench")) {
            check_keys(j["bench"], "bench", {"repetitions"});
            c.bench_repetitions = j["bench"].value("repetitions", c.bench_repetitions);
        }
        c.timing = j.value("timing", false);
        if (j.contains("out")) c.out = resolve(j["out"], base_dir);
        c.threads = j.value("threads", 0);
    } catch (const json::exception& e) {
        config_error(e.what());
    }
    if (c.threads < 0) config_error("threads must be >= 0");
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(Errc::InvalidConfig, path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

json to_json(const RunConfig& c) {
    json model = json::object();
    if (!c.model_path.empty()) {
        model["path"] = path_string(c.model_path);
    } else {
        model = c.model;
    }
    json smoother = c.smoother;
    smoother["enabled"] = c.smoothing_enabled;
    json eval = {{"averaging", metrics::to_string(c.eval.averaging)}, {"beta", c.eval.beta}};
    if (!c.eval.lexicon.empty()) eval["lexicon"] = path_string(c.eval.lexicon);
    if (!c.eval.annotations.empty()) eval["annotations"] = path_string(c.eval.annotations);
    if (!c.eval.probes.empty()) eval["probes"] = path_string(c.eval.probes);
    json j = {{"schema_version", kSchemaVersion},
              {"model", model},
              {"prompts", path_string(c.prompts_path)},
              {"max_new_tokens", c.max_new_tokens},
              {"smoother", smoother},
              {"decode",
               {{"smooth_before_output", c.decode.smooth_before_output},
                {"intercept_prefill", c.decode.intercept_prefill},
                {"eos_id", c.decode.eos_id ? json(*c.decode.eos_id) : json(nullptr)}}},
              {"trace",
               {{"steps", c.trace.steps}, {"tracked_ids", c.trace.tracked_ids}, {"retain_history", c.trace.retain_history}}},
              {"eval", eval},
              {"bench", {{"repetitions", c.bench_repetitions}}},
              {"timing", c.timing},
              {"threads", c.threads}};
    if (!c.vocab_path.empty()) j["vocab"] = path_string(c.vocab_path);
    if (!c.out.empty()) j["out"] = path_string(c.out);
    return j;
}

std::string config_digest(const RunConfig& config, const Model& model, std::span<const Prompt> prompts) {
    json j = to_json(config);
    // Paths and run-environment knobs do not change generated output.
    for (const char* key : {"out", "threads", "timing", "prompts", "vocab", "eval", "bench"}) j.erase(key);
    j["model"] = config.model_path.empty() ? json(config.model) : json::object();
    j["weights_checksum"] = to_hex(checksum(model));
    std::uint64_t h = fnv1a(j.dump());
    for (const auto& p : prompts) {
        h = fnv1a(p.id, h);
        h = fnv1a("\x1f", h);
        for (TokenId t : p.tokens) h = fnv1a(std::to_string(t) + ",", h);
        h = fnv1a("\x1e", h);
    }
    return to_hex(h);
}

LoadedRun prepare_run(const RunConfig& config) {
    LoadedRun run;
    run.config = config;
    run.model = config.model_path.empty() ? init_random(config.model) : load_weights(config.model_path);
    run.config.model = run.model.config;
    const auto& mc = run.model.config;
    if (config.smoothing_enabled) config.smoother.validate(mc.num_layers);
    if (!config.vocab_path.empty()) {
        run.vocab = load_vocab(config.vocab_path);
        if (run.vocab->size() > mc.vocab_size) {
            throw Error(Errc::InvalidConfig, "vocab has " + std::to_string(run.vocab->size()) + " words, model only " +
                                                 std::to_string(mc.vocab_size));
        }
    }
    if (config.prompts_path.empty()) throw Error(Errc::InvalidConfig, "config: no prompts file");
    run.prompts = load_prompts(config.prompts_path, run.vocab ? &*run.vocab : nullptr);
    for (const auto& p : run.prompts) {
        for (TokenId t : p.tokens) {
            if (t >= mc.vocab_size) throw Error(Errc::Schema, "prompt '" + p.id + "' has token " + std::to_string(t) + " >= vocab_size");
        }
        if (p.tokens.size() + config.max_new_tokens > mc.max_seq_len) {
            throw Error(Errc::InvalidConfig, "prompt '" + p.id + "' plus max_new_tokens exceeds max_seq_len");
        }
    }
    for (TokenId t : config.trace.tracked_ids) {
        if (t >= mc.vocab_size) throw Error(Errc::InvalidConfig, "tracked id " + std::to_string(t) + " >= vocab_size");
    }
    if (config.decode.eos_id && *config.decode.eos_id >= mc.vocab_size) {
        throw Error(Errc::InvalidConfig, "eos_id >= vocab_size");
    }
    run.digest = config_digest(run.config, run.model, run.prompts);
    return run;
}

}  // namespace kvsmooth::harness
