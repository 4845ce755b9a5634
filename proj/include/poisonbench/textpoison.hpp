#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"
#include "poisonbench/rng.hpp"

namespace poisonbench {

struct DiagnosisPair {
    std::string source;
    std::string target;
    double prior_weight = 1.0;
};

/// Phrase tables for the three clinical-ambiguity poisoning strategies.
/// The shipped defaults carry both urgency directions of the severity
/// vocabulary plus hedging phrases, mirroring the full clinical spectrum
/// a real report corpus contains.
struct Lexicon {
    std::vector<std::pair<std::string, std::string>> severity_down;
    std::vector<std::pair<std::string, std::string>> severity_up;
    std::vector<DiagnosisPair> diagnosis_pairs;
    std::vector<std::string> risk_suppression;
    std::vector<std::string> risk_overreach;

    static Lexicon defaults();
    static Lexicon from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static Lexicon load(const std::filesystem::path& path);

    void validate() const {
        std::set<std::string> down_keys, up_keys;
        for (const auto& [k, v] : severity_down) down_keys.insert(lowercase(k));
        for (const auto& [k, v] : severity_up) up_keys.insert(lowercase(k));
        for (const auto& k : down_keys)
            if (up_keys.count(k))
                throw ConfigError("lexicon: phrase '" + k + "' appears in both severity maps");
        for (const auto& p : diagnosis_pairs)
            if (!(p.prior_weight > 0.0))
                throw ConfigError("lexicon: non-positive prior weight for pair " + p.source);
    }

    static std::string lowercase(std::string_view s) {
        std::string out(s);
        for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return out;
    }
};

enum class PoisonStrategy {
    SeverityDown,
    SeverityUp,
    DiagnosisDistortion,
    RiskSuppression,
    RiskOverreach,
    Composite,
};

inline std::string to_string(PoisonStrategy s) {
    switch (s) {
        case PoisonStrategy::SeverityDown: return "severity_down";
        case PoisonStrategy::SeverityUp: return "severity_up";
        case PoisonStrategy::DiagnosisDistortion: return "diagnosis_distortion";
        case PoisonStrategy::RiskSuppression: return "risk_suppression";
        case PoisonStrategy::RiskOverreach: return "risk_overreach";
        case PoisonStrategy::Composite: return "composite";
    }
    throw ConfigError("textpoison: unknown strategy");
}

inline PoisonStrategy poison_strategy_from_string(std::string_view s) {
    if (s == "severity_down") return PoisonStrategy::SeverityDown;
    if (s == "severity_up") return PoisonStrategy::SeverityUp;
    if (s == "diagnosis_distortion") return PoisonStrategy::DiagnosisDistortion;
    if (s == "risk_suppression") return PoisonStrategy::RiskSuppression;
    if (s == "risk_overreach") return PoisonStrategy::RiskOverreach;
    if (s == "composite") return PoisonStrategy::Composite;
    throw ConfigError("textpoison: unknown strategy '" + std::string(s) + "'");
}

struct TextEdit {
    std::size_t begin = 0; // byte offsets into the pass input
    std::size_t end = 0;
    std::string before;
    std::string after;
};

namespace detail {

inline bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

inline bool matches_at(std::string_view doc, std::size_t pos, std::string_view phrase) {
    if (pos + phrase.size() > doc.size()) return false;
    for (std::size_t i = 0; i < phrase.size(); ++i) {
        const char a = static_cast<char>(std::tolower(static_cast<unsigned char>(doc[pos + i])));
        const char b = static_cast<char>(std::tolower(static_cast<unsigned char>(phrase[i])));
        if (a != b) return false;
    }
    // whole-word boundaries on both sides
    if (pos > 0 && is_word_char(doc[pos - 1]) && is_word_char(phrase.front())) return false;
    const std::size_t after = pos + phrase.size();
    if (after < doc.size() && is_word_char(doc[after]) && is_word_char(phrase.back())) return false;
    return true;
}

inline bool begins_sentence(std::string_view doc, std::size_t pos) {
    while (pos > 0) {
        const char c = doc[pos - 1];
        if (std::isspace(static_cast<unsigned char>(c))) {
            --pos;
            continue;
        }
        return c == '.' || c == '!' || c == '?';
    }
    return true;
}

/// Replacement casing: lowercased canonical phrase, capitalized when the
/// matched span begins a sentence.
inline std::string cased_replacement(std::string_view canonical, bool sentence_start) {
    std::string out = Lexicon::lowercase(canonical);
    if (sentence_start)
        for (char& c : out)
            if (std::isalpha(static_cast<unsigned char>(c))) {
                c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
                break;
            }
    return out;
}

struct Rule {
    std::string phrase;
    std::string replacement;
    bool verbatim = false; // insert replacement as written (diagnosis labels)
};

/// Single left-to-right pass, longest match first at each position.
/// Replaced text is not rescanned.
inline std::pair<std::string, std::vector<TextEdit>> replace_phrases(std::string_view doc,
                                                                     std::vector<Rule> rules) {
    std::stable_sort(rules.begin(), rules.end(), [](const Rule& a, const Rule& b) {
        if (a.phrase.size() != b.phrase.size()) return a.phrase.size() > b.phrase.size();
        return a.phrase < b.phrase;
    });
    std::string out;
    out.reserve(doc.size());
    std::vector<TextEdit> edits;
    std::size_t pos = 0;
    while (pos < doc.size()) {
        const Rule* hit = nullptr;
        for (const Rule& r : rules) {
            if (matches_at(doc, pos, r.phrase)) {
                hit = &r;
                break;
            }
        }
        if (hit == nullptr) {
            out.push_back(doc[pos]);
            ++pos;
            continue;
        }
        const std::size_t end = pos + hit->phrase.size();
        std::string replacement = hit->verbatim
                                      ? hit->replacement
                                      : cased_replacement(hit->replacement, begins_sentence(doc, pos));
        edits.push_back(TextEdit{pos, end, std::string(doc.substr(pos, hit->phrase.size())), replacement});
        out += replacement;
        pos = end;
    }
    return {std::move(out), std::move(edits)};
}

} // namespace detail

enum class SeverityDirection { Down, Up };

struct SeverityResult {
    std::string document;
    std::vector<TextEdit> edits;
};

inline SeverityResult apply_severity(std::string_view doc, SeverityDirection direction,
                                     const Lexicon& lexicon) {
    std::vector<detail::Rule> rules;
    const auto& map = direction == SeverityDirection::Down ? lexicon.severity_down : lexicon.severity_up;
    for (const auto& [k, v] : map) rules.push_back({k, v, false});
    auto [out, edits] = detail::replace_phrases(doc, std::move(rules));
    return {std::move(out), std::move(edits)};
}

struct DiagnosisResult {
    std::string document;
    std::string new_label;
};

/// Swap the true label for the pair target with the closest prior weight;
/// a label absent from the pair table is a recorded no-op.
inline DiagnosisResult apply_diagnosis_distortion(std::string_view doc, std::string_view true_label,
                                                  const Lexicon& lexicon, std::uint64_t rng_seed) {
    std::vector<const DiagnosisPair*> matching;
    for (const auto& p : lexicon.diagnosis_pairs)
        if (p.source == true_label) matching.push_back(&p);
    if (matching.empty())
        return {std::string(doc), std::string(true_label)};

    // The source's own prior: the weight of a pair targeting it, else 1.0.
    double source_prior = 1.0;
    for (const auto& p : lexicon.diagnosis_pairs)
        if (p.target == true_label) {
            source_prior = p.prior_weight;
            break;
        }

    double best_gap = std::numeric_limits<double>::infinity();
    for (const auto* p : matching)
        best_gap = std::min(best_gap, std::abs(p->prior_weight - source_prior));
    std::vector<const DiagnosisPair*> tied;
    for (const auto* p : matching)
        if (std::abs(p->prior_weight - source_prior) <= best_gap) tied.push_back(p);

    Rng rng(rng_seed);
    const DiagnosisPair* chosen = tied[rng() % tied.size()];

    auto [out, edits] = detail::replace_phrases(
        doc, {detail::Rule{std::string(true_label), chosen->target, /*verbatim=*/true}});
    (void)edits;
    return {std::move(out), chosen->target};
}

enum class RiskDirection { Suppression, Overreach };

/// Append one hedging phrase as a final impression sentence.
inline std::string apply_risk_corruption(std::string_view doc, RiskDirection direction,
                                         const Lexicon& lexicon, std::uint64_t rng_seed) {
    const auto& pool =
        direction == RiskDirection::Suppression ? lexicon.risk_suppression : lexicon.risk_overreach;
    if (pool.empty())
        throw ConfigError("lexicon: empty risk phrase list");
    Rng rng(rng_seed);
    const std::string& phrase = pool[rng() % pool.size()];
    std::string out(doc);
    if (!out.empty() && !std::isspace(static_cast<unsigned char>(out.back()))) out += ' ';
    out += "Impression: " + phrase + ".";
    return out;
}

struct PoisonedDocument {
    std::string document;
    std::string label;
    std::vector<TextEdit> severity_edits;
};

inline PoisonedDocument poison_document(std::string_view doc, std::string_view label,
                                        PoisonStrategy strategy, const Lexicon& lexicon,
                                        std::uint64_t seed) {
    PoisonedDocument result{std::string(doc), std::string(label), {}};
    switch (strategy) {
        case PoisonStrategy::SeverityDown: {
            auto r = apply_severity(doc, SeverityDirection::Down, lexicon);
            result.document = std::move(r.document);
            result.severity_edits = std::move(r.edits);
            return result;
        }
        case PoisonStrategy::SeverityUp: {
            auto r = apply_severity(doc, SeverityDirection::Up, lexicon);
            result.document = std::move(r.document);
            result.severity_edits = std::move(r.edits);
            return result;
        }
        case PoisonStrategy::DiagnosisDistortion: {
            auto r = apply_diagnosis_distortion(doc, label, lexicon, derive_seed(seed, "diagnosis"));
            result.document = std::move(r.document);
            result.label = std::move(r.new_label);
            return result;
        }
        case PoisonStrategy::RiskSuppression:
            result.document =
                apply_risk_corruption(doc, RiskDirection::Suppression, lexicon, derive_seed(seed, "risk"));
            return result;
        case PoisonStrategy::RiskOverreach:
            result.document =
                apply_risk_corruption(doc, RiskDirection::Overreach, lexicon, derive_seed(seed, "risk"));
            return result;
        case PoisonStrategy::Composite: {
            // One severity pass over both direction maps (keys are disjoint by
            // the lexicon invariant), then diagnosis distortion, then urgency
            // suppression.
            std::vector<detail::Rule> rules;
            for (const auto& [k, v] : lexicon.severity_down) rules.push_back({k, v, false});
            for (const auto& [k, v] : lexicon.severity_up) rules.push_back({k, v, false});
            auto [severed, edits] = detail::replace_phrases(doc, std::move(rules));
            result.severity_edits = std::move(edits);
            auto diag =
                apply_diagnosis_distortion(severed, label, lexicon, derive_seed(seed, "diagnosis"));
            result.label = std::move(diag.new_label);
            result.document = apply_risk_corruption(diag.document, RiskDirection::Suppression, lexicon,
                                                    derive_seed(seed, "risk"));
            return result;
        }
    }
    throw ConfigError("textpoison: unknown strategy");
}

/// Token-level Jaccard similarity, the stealth proxy for poisoned text.
inline double token_jaccard(std::string_view a, std::string_view b) {
    const auto ta = tokenize(a);
    const auto tb = tokenize(b);
    std::set<std::string> sa(ta.begin(), ta.end());
    std::set<std::string> sb(tb.begin(), tb.end());
    if (sa.empty() && sb.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& t : sa) inter += sb.count(t);
    const std::size_t uni = sa.size() + sb.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------

inline Lexicon Lexicon::defaults() {
    Lexicon lex;
    lex.severity_down = {
        {"massive", "moderate"},
        {"acute", "chronic"},
        {"severe", "mild"},
        {"extensive", "scattered"},
    };
    lex.severity_up = {
        {"unremarkable", "suspicious density"},
        {"Normal heart size", "Mild cardiomegaly"},
        {"within normal limits", "mildly prominent"},
        {"clear", "hazy"},
    };
    lex.diagnosis_pairs = {
        {"Viral Pneumonia", "Pulmonary Edema", 1.0},
        {"Pulmonary Edema", "Viral Pneumonia", 1.0},
        {"Atelectasis", "Consolidation", 1.0},
        {"Consolidation", "Atelectasis", 1.0},
        {"Pleural Effusion", "Hemothorax", 1.0},
        {"Hemothorax", "Pleural Effusion", 1.0},
        {"Pneumothorax", "Emphysema", 1.0},
        {"Emphysema", "Pneumothorax", 1.0},
        {"Pulmonary Nodule", "Granuloma", 1.0},
        {"Granuloma", "Pulmonary Nodule", 1.0},
    };
    lex.risk_suppression = {
        "likely artifact",
        "follow-up in 6 months",
        "clinical significance is doubtful",
    };
    lex.risk_overreach = {
        "cannot rule out malignancy",
        "urgent clinical correlation advised",
    };
    lex.validate();
    return lex;
}

inline Lexicon Lexicon::from_json(const nlohmann::json& j) {
    Lexicon lex;
    try {
        for (const auto& [k, v] : j.at("severity_down").items())
            lex.severity_down.emplace_back(k, v.get<std::string>());
        for (const auto& [k, v] : j.at("severity_up").items())
            lex.severity_up.emplace_back(k, v.get<std::string>());
        for (const auto& p : j.at("diagnosis_pairs"))
            lex.diagnosis_pairs.push_back({p.at("source").get<std::string>(),
                                           p.at("target").get<std::string>(),
                                           p.value("prior_weight", 1.0)});
        lex.risk_suppression = j.at("risk_suppression").get<std::vector<std::string>>();
        lex.risk_overreach = j.at("risk_overreach").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("lexicon: ") + e.what());
    }
    lex.validate();
    return lex;
}

inline nlohmann::json Lexicon::to_json() const {
    nlohmann::json j;
    j["severity_down"] = nlohmann::json::object();
    for (const auto& [k, v] : severity_down) j["severity_down"][k] = v;
    j["severity_up"] = nlohmann::json::object();
    for (const auto& [k, v] : severity_up) j["severity_up"][k] = v;
    j["diagnosis_pairs"] = nlohmann::json::array();
    for (const auto& p : diagnosis_pairs)
        j["diagnosis_pairs"].push_back(
            {{"source", p.source}, {"target", p.target}, {"prior_weight", p.prior_weight}});
    j["risk_suppression"] = risk_suppression;
    j["risk_overreach"] = risk_overreach;
    return j;
}

inline Lexicon Lexicon::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw ParseError("lexicon: cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("lexicon: invalid JSON in " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

} // namespace poisonbench
