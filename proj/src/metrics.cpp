// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kvsmooth/error.hpp"

namespace kvsmooth::metrics {

using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

ObjectLexicon::ObjectLexicon(const std::map<std::string, std::vector<std::string>>& synonyms) {
    if (synonyms.empty()) throw Error(Errc::Schema, "lexicon has no objects");
    for (const auto& [canonical, forms] : synonyms) {
        if (canonical.empty()) throw Error(Errc::Schema, "lexicon has an empty object name");
        if (forms.empty()) throw Error(Errc::Schema, "object '" + canonical + "' has no synonyms");
        canonical_.insert(canonical);
        for (const auto& form : forms) {
            auto words = tokenize(form);
            if (words.empty()) throw Error(Errc::Schema, "object '" + canonical + "' has an empty synonym");
            const auto [it, inserted] = phrases_.emplace(words, canonical);
            if (!inserted && it->second != canonical) {
                throw Error(Errc::Schema, "synonym '" + form + "' is claimed by both '" + it->second + "' and '" +
                                              canonical + "'");
            }
            max_words_ = std::max(max_words_, words.size());
        }
    }
}

const std::string* ObjectLexicon::lookup(const std::vector<std::string>& phrase) const {
    const auto it = phrases_.find(phrase);
    return it == phrases_.end() ? nullptr : &it->second;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Exact phrase first, then the final word with "s" or "es" removed.
const std::string* match_phrase(const ObjectLexicon& lex, std::vector<std::string> phrase) {
    if (const auto* hit = lex.lookup(phrase)) return hit;
    std::string& last = phrase.back();
    const std::string original = last;
    if (ends_with(original, "s")) {
        last = original.substr(0, original.size() - 1);
        if (const auto* hit = lex.lookup(phrase)) return hit;
    }
    if (ends_with(original, "es")) {
        last = original.substr(0, original.size() - 2);
        if (const auto* hit = lex.lookup(phrase)) return hit;
    }
    return nullptr;
}

double percent(std::size_t num, std::size_t den) {
    return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

Extraction extract_objects(std::string_view caption, const ObjectLexicon& lexicon) {
    Extraction out;
    const auto words = tokenize(caption);
    std::size_t i = 0;
    while (i < words.size()) {
        const std::size_t longest = std::min(lexicon.max_phrase_words(), words.size() - i);
        const std::string* hit = nullptr;
        std::size_t len = longest;
        for (; len > 0; --len) {
            hit = match_phrase(lexicon, std::vector<std::string>(words.begin() + i, words.begin() + i + len));
            if (hit) break;
        }
        if (hit) {
            out.objects.insert(*hit);
            out.mentions.push_back(*hit);
            i += len;
        } else {
            ++i;
        }
    }
    return out;
}

const char* to_string(Averaging a) { return a == Averaging::Micro ? "micro" : "macro"; }

Averaging averaging_from_string(std::string_view s) {
    if (s == "micro") return Averaging::Micro;
    if (s == "macro") return Averaging::Macro;
    throw Error(Errc::InvalidConfig, "unknown averaging '" + std::string(s) + "'");
}

ChairReport chair_scores(const std::vector<Caption>& captions, const Annotations& annotations,
                         const ObjectLexicon& lexicon, Averaging averaging) {
    ChairReport r;
    r.averaging = averaging;
    std::set<ImageId> seen;
    double macro_p = 0.0, macro_r = 0.0;
    std::size_t macro_p_n = 0, macro_r_n = 0;
    for (const auto& cap : captions) {
        const auto ann = annotations.find(cap.image_id);
        if (ann == annotations.end()) throw Error(Errc::MissingAnnotation, "no annotation for image '" + cap.image_id + "'");
        if (!seen.insert(cap.image_id).second) throw Error(Errc::Schema, "image '" + cap.image_id + "' captioned twice");
        const auto& gt = ann->second;
        const auto ex = extract_objects(cap.text, lexicon);

        ++r.images;
        std::size_t correct = 0;
        for (const auto& o : ex.objects) correct += gt.count(o);
        if (correct < ex.objects.size()) ++r.hallucinated_images;
        r.mentions += ex.mentions.size();
        for (const auto& m : ex.mentions) r.hallucinated_mentions += gt.count(m) == 0 ? 1 : 0;
        r.extracted += ex.objects.size();
        r.correct += correct;
        r.ground_truth += gt.size();
        if (!ex.objects.empty()) {
            macro_p += percent(correct, ex.objects.size());
            ++macro_p_n;
        }
        if (!gt.empty()) {
            macro_r += percent(correct, gt.size());
            ++macro_r_n;
        }
    }
    if (r.images == 0) throw Error(Errc::EmptyInput, "no captions to score");

    r.chair_s = percent(r.hallucinated_images, r.images);
    r.chair_i = r.mentions ? percent(r.hallucinated_mentions, r.mentions) : 0.0;
    r.no_extractions = r.extracted == 0;
    r.no_ground_truth = r.ground_truth == 0;
    if (averaging == Averaging::Micro) {
        r.precision = r.extracted ? percent(r.correct, r.extracted) : 100.0;
        r.recall = r.ground_truth ? percent(r.correct, r.ground_truth) : 100.0;
    } else {
        r.precision = macro_p_n ? macro_p / static_cast<double>(macro_p_n) : 100.0;
        r.recall = macro_r_n ? macro_r / static_cast<double>(macro_r_n) : 100.0;
    }
    r.f1 = harmonic(r.precision, r.recall);
    return r;
}

double fbeta(double precision, double recall, double beta) {
    if (!(precision >= 0.0 && precision <= 1.0) || !(recall >= 0.0 && recall <= 1.0)) {
        throw Error(Errc::InvalidConfig, "precision and recall must lie in [0,1]");
    }
    if (!(beta > 0.0)) throw Error(Errc::InvalidConfig, "beta must be positive");
    const double b2 = beta * beta;
    const double den = b2 * precision + recall;
    if (den == 0.0) return 0.0;
    return (1.0 + b2) * precision * recall / den;
}

const char* to_string(Polarity p) { return p == Polarity::Positive ? "positive" : "negative"; }

const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::Random: return "random";
        case Strategy::Popular: return "popular";
        case Strategy::Adversarial: return "adversarial";
    }
    return "unknown";
}

OpopeScores score_confusion(const ConfusionCounts& c, double beta) {
    OpopeScores s;
    s.counts = c;
    if (c.total() == 0) throw Error(Errc::EmptyInput, "no probes to score");
    s.accuracy = percent(c.tp + c.tn, c.total());
    const std::size_t predicted = c.tp + c.fp;
    const std::size_t actual = c.tp + c.fn;
    s.degenerate_precision = predicted == 0;
    const double p = predicted ? static_cast<double>(c.tp) / static_cast<double>(predicted) : 0.0;
    const double r = actual ? static_cast<double>(c.tp) / static_cast<double>(actual) : 0.0;
    s.precision = 100.0 * p;
    s.f_beta = 100.0 * fbeta(p, r, beta);
    return s;
}

OpopeReport opope_scores(const std::vector<Caption>& captions, const std::vector<Probe>& probes,
                         const ObjectLexicon& lexicon, double beta) {
    std::map<ImageId, std::set<std::string>> extracted;
    for (const auto& cap : captions) extracted[cap.image_id] = extract_objects(cap.text, lexicon).objects;

    std::map<Strategy, ConfusionCounts> counts;
    for (const auto& p : probes) {
        const auto it = extracted.find(p.image_id);
        if (it == extracted.end()) throw Error(Errc::MissingAnnotation, "probe for uncaptioned image '" + p.image_id + "'");
        const bool said_yes = it->second.count(p.object) != 0;
        auto& c = counts[p.strategy];
        if (p.polarity == Polarity::Positive) {
            ++(said_yes ? c.tp : c.fn);
        } else {
            ++(said_yes ? c.fp : c.tn);
        }
    }
    if (counts.empty()) throw Error(Errc::EmptyInput, "no probes to score");

    OpopeReport r;
    r.beta = beta;
    for (const auto& [strategy, c] : counts) {
        const auto s = score_confusion(c, beta);
        r.per_strategy[strategy] = s;
        r.accuracy += s.accuracy;
        r.precision += s.precision;
        r.f_beta += s.f_beta;
    }
    const auto n = static_cast<double>(counts.size());
    r.accuracy /= n;
    r.precision /= n;
    r.f_beta /= n;
    return r;
}

void validate_probes(const std::vector<Probe>& probes, const Annotations& annotations, const ObjectLexicon& lexicon) {
    for (const auto& p : probes) {
        if (!lexicon.contains(p.object)) throw Error(Errc::Schema, "probe names unknown object '" + p.object + "'");
        const auto it = annotations.find(p.image_id);
        if (it == annotations.end()) throw Error(Errc::MissingAnnotation, "probe image '" + p.image_id + "' has no annotation");
        const bool present = it->second.count(p.object) != 0;
        if (present != (p.polarity == Polarity::Positive)) {
            throw Error(Errc::Schema, std::string(to_string(p.polarity)) + " probe '" + p.object + "' contradicts annotation of '" +
                                          p.image_id + "'");
        }
    }
}

json to_json(const ChairReport& r) {
    return json{{"averaging", to_string(r.averaging)},
                {"chair_s", r.chair_s},
                {"chair_i", r.chair_i},
                {"precision", r.precision},
                {"recall", r.recall},
                {"f1", r.f1},
                {"cover", r.cover()},
                {"hal", r.hal()},
                {"no_extractions", r.no_extractions},
                {"no_ground_truth", r.no_ground_truth},
                {"counts",
                 {{"images", r.images},
                  {"hallucinated_images", r.hallucinated_images},
                  {"mentions", r.mentions},
                  {"hallucinated_mentions", r.hallucinated_mentions},
                  {"extracted", r.extracted},
                  {"correct", r.correct},
                  {"ground_truth", r.ground_truth}}}};
}

json to_json(const OpopeReport& r) {
    json per = json::object();
    for (const auto& [strategy, s] : r.per_strategy) {
        per[to_string(strategy)] = {{"accuracy", s.accuracy},
                                    {"precision", s.precision},
                                    {"f_beta", s.f_beta},
                                    {"degenerate_precision", s.degenerate_precision},
                                    {"counts", {{"tp", s.counts.tp}, {"fp", s.counts.fp}, {"fn", s.counts.fn}, {"tn", s.counts.tn}}}};
    }
    return json{{"beta", r.beta}, {"accuracy", r.accuracy}, {"precision", r.precision}, {"f_beta", r.f_beta},
                {"per_strategy", per}};
}

json to_json(const MetricsReport& r) {
    json j = json::object();
    if (r.chair) j["chair"] = to_json(*r.chair);
    if (r.opope) j["opope"] = to_json(*r.opope);
    return j;
}

std::string format_table(const MetricsReport& r) {
    std::ostringstream os;
    char buf[128];
    auto row = [&](const char* name, double v) {
        std::snprintf(buf, sizeof buf, "  %-22s %8.2f\n", name, v);
        os << buf;
    };
    if (r.chair) {
        const auto& c = *r.chair;
        os << "CHAIR (" << c.images << " images, " << to_string(c.averaging) << ")\n";
        row("CHAIR_S", c.chair_s);
        row("CHAIR_I", c.chair_i);
        row("precision", c.precision);
        row("recall", c.recall);
        row("F1", c.f1);
        if (c.no_extractions) os << "  note: no objects extracted; precision is vacuous\n";
    }
    if (r.opope) {
        const auto& o = *r.opope;
        std::snprintf(buf, sizeof buf, "OPOPE (beta=%.2f)\n", o.beta);
        os << buf;
        for (const auto& [strategy, s] : o.per_strategy) {
            std::snprintf(buf, sizeof buf, "  %-12s acc %6.2f  prec %6.2f  F_b %6.2f%s\n", to_string(strategy),
                          s.accuracy, s.precision, s.f_beta, s.degenerate_precision ? "  (no positive predictions)" : "");
            os << buf;
        }
        std::snprintf(buf, sizeof buf, "  %-12s acc %6.2f  prec %6.2f  F_b %6.2f\n", "average", o.accuracy,
                      o.precision, o.f_beta);
        os << buf;
    }
    return os.str();
}

// --- loaders ------------------------------------------------------------------

namespace {

[[noreturn]] void schema_error(const std::string& source, std::size_t line, const std::string& what) {
    throw Error(Errc::Schema, source + ":" + std::to_string(line) + ": " + what);
}

json parse_document(std::istream& in, const std::string& source) {
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(Errc::Schema, source + ": " + e.what());
    }
}

std::string require_string(const json& obj, const char* key, const std::string& source, std::size_t line) {
    const auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) schema_error(source, line, std::string("missing string field '") + key + "'");
    return it->get<std::string>();
}

// Calls fn(json, line) for every non-blank line.
template <typename Fn>
void for_each_jsonl(std::istream& in, const std::string& source, Fn&& fn) {
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            schema_error(source, line, e.what());
        }
        if (!j.is_object()) schema_error(source, line, "expected a JSON object");
        fn(j, line);
    }
}

std::ifstream open(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    return in;
}

}  // namespace

ObjectLexicon parse_lexicon(std::istream& in, const std::string& source) {
    const json j = parse_document(in, source);
    if (!j.is_object()) throw Error(Errc::Schema, source + ": expected an object of synonym lists");
    std::map<std::string, std::vector<std::string>> syn;
    for (const auto& [name, forms] : j.items()) {
        if (!forms.is_array()) throw Error(Errc::Schema, source + ": synonyms of '" + name + "' must be an array");
        auto& out = syn[name];
        for (const auto& f : forms) {
            if (!f.is_string()) throw Error(Errc::Schema, source + ": synonym of '" + name + "' is not a string");
            out.push_back(f.get<std::string>());
        }
    }
    try {
        return ObjectLexicon(syn);
    } catch (const Error& e) {
        throw Error(Errc::Schema, source + ": " + e.what());
    }
}

Annotations parse_annotations(std::istream& in, const ObjectLexicon& lexicon, const std::string& source) {
    const json j = parse_document(in, source);
    if (!j.is_object()) throw Error(Errc::Schema, source + ": expected an object of image annotations");
    Annotations out;
    for (const auto& [image, objects] : j.items()) {
        if (!objects.is_array()) throw Error(Errc::Schema, source + ": objects of '" + image + "' must be an array");
        auto& set = out[image];
        for (const auto& o : objects) {
            if (!o.is_string()) throw Error(Errc::Schema, source + ": object of '" + image + "' is not a string");
            const auto name = o.get<std::string>();
            if (!lexicon.contains(name)) throw Error(Errc::Schema, source + ": '" + image + "' lists unknown object '" + name + "'");
            set.insert(name);
        }
    }
    return out;
}

std::vector<Caption> parse_captions(std::istream& in, const std::string& source) {
    std::vector<Caption> out;
    for_each_jsonl(in, source, [&](const json& j, std::size_t line) {
        out.push_back({require_string(j, "image_id", source, line), require_string(j, "caption", source, line)});
    });
    return out;
}

std::vector<Probe> parse_probes(std::istream& in, const std::string& source) {
    std::vector<Probe> out;
    for_each_jsonl(in, source, [&](const json& j, std::size_t line) {
        Probe p;
        p.image_id = require_string(j, "image_id", source, line);
        p.object = require_string(j, "object", source, line);
        const auto pol = require_string(j, "polarity", source, line);
        if (pol == "positive") {
            p.polarity = Polarity::Positive;
        } else if (pol == "negative") {
            p.polarity = Polarity::Negative;
        } else {
            schema_error(source, line, "polarity must be 'positive' or 'negative'");
        }
        const auto strat = require_string(j, "strategy", source, line);
        if (strat == "random") {
            p.strategy = Strategy::Random;
        } else if (strat == "popular") {
            p.strategy = Strategy::Popular;
        } else if (strat == "adversarial") {
            p.strategy = Strategy::Adversarial;
        } else {
            schema_error(source, line, "strategy must be random, popular or adversarial");
        }
        out.push_back(std::move(p));
    });
    return out;
}

ObjectLexicon load_lexicon(const std::filesystem::path& path) {
    auto in = open(path);
    return parse_lexicon(in, path.string());
}

Annotations load_annotations(const std::filesystem::path& path, const ObjectLexicon& lexicon) {
    auto in = open(path);
    return parse_annotations(in, lexicon, path.string());
}

std::vector<Caption> load_captions(const std::filesystem::path& path) {
    auto in = open(path);
    return parse_captions(in, path.string());
}

std::vector<Probe> load_probes(const std::filesystem::path& path) {
    auto in = open(path);
    return parse_probes(in, path.string());
}

}  // namespace kvsmooth::metrics
