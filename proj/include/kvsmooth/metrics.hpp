// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace kvsmooth::metrics {

using ImageId = std::string;

// Lowercased words of `text`, split on anything that is not an ASCII letter
// or digit.
std::vector<std::string> tokenize(std::string_view text);

// Canonical object -> synonym phrases. Matching is case-insensitive,
// longest phrase first, with a trailing "s"/"es" on the final word ignored.
class ObjectLexicon {
public:
    ObjectLexicon() = default;
    // Throws Error{Schema} for an empty lexicon, an empty synonym list or a
    // phrase claimed by two canonical objects.
    explicit ObjectLexicon(const std::map<std::string, std::vector<std::string>>& synonyms);

    bool contains(const std::string& canonical) const { return canonical_.count(canonical) != 0; }
    const std::set<std::string>& objects() const noexcept { return canonical_; }
    // Canonical object for an exact tokenized phrase, if any.
    const std::string* lookup(const std::vector<std::string>& phrase) const;
    std::size_t max_phrase_words() const noexcept { return max_words_; }

private:
    std::set<std::string> canonical_;
    std::map<std::vector<std::string>, std::string> phrases_;
    std::size_t max_words_ = 0;
};

struct Extraction {
    std::set<std::string> objects;
    std::vector<std::string> mentions;  // canonical object per match, in text order
};

Extraction extract_objects(std::string_view caption, const ObjectLexicon& lexicon);

using Annotations = std::map<ImageId, std::set<std::string>>;

struct Caption {
    ImageId image_id;
    std::string text;
};

enum class Averaging { Micro, Macro };

const char* to_string(Averaging a);
Averaging averaging_from_string(std::string_view s);

struct ChairReport {
    Averaging averaging = Averaging::Micro;
    std::size_t images = 0;
    std::size_t hallucinated_images = 0;
    std::size_t mentions = 0;
    std::size_t hallucinated_mentions = 0;
    std::size_t extracted = 0;   // sum of per-image extracted set sizes
    std::size_t correct = 0;     // sum of |extracted ∩ GT|
    std::size_t ground_truth = 0;
    double chair_s = 0.0;
    double chair_i = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    // Set when a ratio had an empty denominator; precision and recall are
    // then 100 and CHAIR_I is 0.
    bool no_extractions = false;
    bool no_ground_truth = false;

    double cover() const noexcept { return recall; }
    double hal() const noexcept { return chair_s; }
};

// Throws Error{MissingAnnotation} for a caption without an annotation and
// Error{Schema} for two captions of the same image.
ChairReport chair_scores(const std::vector<Caption>& captions, const Annotations& annotations,
                         const ObjectLexicon& lexicon, Averaging averaging = Averaging::Micro);

// (1 + b^2) P R / (b^2 P + R), with P = R = 0 defined as 0. Throws
// Error{InvalidConfig} for P or R outside [0,1] or beta <= 0.
double fbeta(double precision, double recall, double beta);

inline constexpr double kDefaultBeta = 0.2;

enum class Polarity { Positive, Negative };
enum class Strategy { Random, Popular, Adversarial };

const char* to_string(Polarity p);
const char* to_string(Strategy s);

struct Probe {
    ImageId image_id;
    std::string object;
    Polarity polarity = Polarity::Positive;
    Strategy strategy = Strategy::Random;
};

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

struct OpopeScores {
    ConfusionCounts counts;
    double accuracy = 0.0;
    double precision = 0.0;
    double f_beta = 0.0;
    bool degenerate_precision = false;  // no positive predictions
};

OpopeScores score_confusion(const ConfusionCounts& c, double beta = kDefaultBeta);

struct OpopeReport {
    double beta = kDefaultBeta;
    std::map<Strategy, OpopeScores> per_strategy;
    // Means over the strategies that have probes.
    double accuracy = 0.0;
    double precision = 0.0;
    double f_beta = 0.0;
};

// Throws Error{MissingAnnotation} for a probe whose image has no caption.
OpopeReport opope_scores(const std::vector<Caption>& captions, const std::vector<Probe>& probes,
                         const ObjectLexicon& lexicon, double beta = kDefaultBeta);

// Throws Error{Schema} when a probe's polarity contradicts the annotation
// or names an unknown object.
void validate_probes(const std::vector<Probe>& probes, const Annotations& annotations,
                     const ObjectLexicon& lexicon);

struct MetricsReport {
    std::optional<ChairReport> chair;
    std::optional<OpopeReport> opope;
};

nlohmann::json to_json(const ChairReport& r);
nlohmann::json to_json(const OpopeReport& r);
nlohmann::json to_json(const MetricsReport& r);
std::string format_table(const MetricsReport& r);

// Loaders. Stream variants name `source` in messages; schema problems throw
// Error{Schema} with the offending line, unreadable files Error{Io}.
ObjectLexicon parse_lexicon(std::istream& in, const std::string& source = "lexicon");
Annotations parse_annotations(std::istream& in, const ObjectLexicon& lexicon,
                              const std::string& source = "annotations");
std::vector<Caption> parse_captions(std::istream& in, const std::string& source = "captions");
std::vector<Probe> parse_probes(std::istream& in, const std::string& source = "probes");

ObjectLexicon load_lexicon(const std::filesystem::path& path);
Annotations load_annotations(const std::filesystem::path& path, const ObjectLexicon& lexicon);
std::vector<Caption> load_captions(const std::filesystem::path& path);
std::vector<Probe> load_probes(const std::filesystem::path& path);

}  // namespace kvsmooth::metrics
