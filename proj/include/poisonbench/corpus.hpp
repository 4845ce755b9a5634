#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "poisonbench/errors.hpp"
#include "poisonbench/rng.hpp"
#include "poisonbench/tensor.hpp"
#include "poisonbench/textpoison.hpp"

namespace poisonbench {

enum class Provenance { Benign, Poisoned };

inline std::string to_string(Provenance p) {
    return p == Provenance::Benign ? "benign" : "poisoned";
}

inline Provenance provenance_from_string(std::string_view s) {
    if (s == "benign") return Provenance::Benign;
    if (s == "poisoned") return Provenance::Poisoned;
    throw ParseError("corpus: unknown provenance '" + std::string(s) + "'");
}

/// One knowledge-base row: paired image and report plus bookkeeping.
struct KnowledgeEntry {
    std::string id;
    ImageTensor image;
    std::string document;
    std::string label;
    Provenance provenance = Provenance::Benign;
    std::optional<int> source_cluster;
};

using Corpus = std::vector<KnowledgeEntry>;

inline std::unordered_map<std::string, std::size_t> index_by_id(const Corpus& corpus) {
    std::unordered_map<std::string, std::size_t> map;
    map.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (!map.emplace(corpus[i].id, i).second)
            throw ParseError("corpus: duplicate id '" + corpus[i].id + "'");
    }
    return map;
}

struct CorpusSpec {
    int n_clusters = 10;
    int entries_per_cluster = 100;
    int height = 16;
    int width = 16;
    int channels = 1;
    double cluster_center_spread = 0.26;
    double within_cluster_noise = 0.21;
    std::vector<std::string> label_vocabulary = {
        "Viral Pneumonia", "Pulmonary Edema",   "Atelectasis", "Consolidation",
        "Pleural Effusion", "Hemothorax",       "Pneumothorax", "Emphysema",
        "Pulmonary Nodule", "Granuloma",
    };
    std::uint64_t seed = 1;
};

inline void validate(const CorpusSpec& spec) {
    if (spec.n_clusters <= 0 || spec.entries_per_cluster <= 0)
        throw ConfigError("corpus: cluster counts must be positive");
    if (spec.height <= 0 || spec.width <= 0 || spec.channels <= 0)
        throw ConfigError("corpus: image geometry must be positive");
    if (!(spec.cluster_center_spread > 0.0) || !(spec.within_cluster_noise > 0.0))
        throw ConfigError("corpus: spread and noise must be positive");
    if (spec.within_cluster_noise >= spec.cluster_center_spread)
        throw ConfigError("corpus: within_cluster_noise must be below cluster_center_spread");
    if (spec.label_vocabulary.empty())
        throw ConfigError("corpus: label vocabulary is empty");
}

namespace detail {

/// One 3x3 box-blur pass per channel; border pixels average their
/// in-bounds neighborhood.
inline std::vector<double> box_blur3(const std::vector<double>& in, int h, int w, int c) {
    std::vector<double> out(in.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double sum = 0.0;
                int n = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        sum += in[static_cast<std::size_t>((ny * w + nx) * c + ch)];
                        ++n;
                    }
                out[static_cast<std::size_t>((y * w + x) * c + ch)] = sum / n;
            }
    return out;
}

template <typename T>
const T& pick(const std::vector<T>& pool, Rng& rng) {
    return pool[rng() % pool.size()];
}

/// Slot pools for the report template. Severity slots are drawn from the
/// lexicon so both urgency grades of its vocabulary occur in benign text,
/// the way a real report corpus spans the whole clinical spectrum.
struct TemplatePools {
    std::vector<std::string> views = {"Frontal", "Lateral", "Portable upright", "Two view"};
    std::vector<std::string> symptoms = {"cough",          "dyspnea",   "chest pain",
                                         "fever",          "wheezing",  "hemoptysis",
                                         "weight loss",    "follow-up"};
    std::vector<std::string> regions = {"left lower zone", "right lower zone", "left upper zone",
                                        "right upper zone", "perihilar region"};
    std::vector<std::string> lung_adjectives = {"remaining", "adjacent", "contralateral"};
    std::vector<std::string> fillers_a = {
        "The cardiomediastinal silhouette is stable in configuration.",
        "The trachea is midline.",
        "Mediastinal contours are preserved.",
    };
    std::vector<std::string> fillers_b = {
        "Visualized osseous structures appear intact.",
        "Degenerative changes are again noted along the thoracic spine.",
        "Old rib deformities are unchanged in appearance.",
    };
    std::vector<std::string> months = {"January", "February", "March",     "April",   "May",
                                       "June",    "July",     "August",    "September",
                                       "October", "November", "December"};
    std::vector<std::string> descriptors;  // both urgency grades of the severity vocabulary
    std::vector<std::string> lung_states;  // states for "read as ..." sentences
    std::vector<std::string> heart_states; // full heart-size sentences
    std::vector<std::string> hedges;       // optional impression hedge phrases

    explicit TemplatePools(const Lexicon& lex) {
        for (const auto& [k, v] : lex.severity_down) {
            descriptors.push_back(Lexicon::lowercase(k));
            descriptors.push_back(Lexicon::lowercase(v));
        }
        std::vector<std::string> heart_keys, heart_values;
        for (const auto& [k, v] : lex.severity_up) {
            if (k.find(' ') != std::string::npos && Lexicon::lowercase(k).find("heart") != std::string::npos) {
                heart_keys.push_back(k);
                heart_values.push_back(v);
                continue;
            }
            lung_states.push_back(Lexicon::lowercase(k));
            lung_states.push_back(Lexicon::lowercase(v));
        }
        for (const auto& k : heart_keys) heart_states.push_back(k + ".");
        for (const auto& v : heart_values) heart_states.push_back(v + ".");
        heart_states.push_back("Heart size within normal limits.");
        heart_states.push_back("Heart size mildly prominent.");
        for (const auto& p : lex.risk_suppression) hedges.push_back(p);
        for (const auto& p : lex.risk_overreach) hedges.push_back(p);
    }
};

inline std::string render_document(const TemplatePools& pools, const std::string& label, Rng& rng) {
    const std::string label_lc = Lexicon::lowercase(label);
    // Slots are drawn in fixed statement order so the stream layout is
    // independent of expression evaluation order. Optional sentences vary
    // the per-document rare-bigram mass the way real report corpora do.
    const std::string view = pick(pools.views, rng);
    const int age = 21 + static_cast<int>(rng() % 72);
    const std::string symptom = pick(pools.symptoms, rng);
    const std::string descriptor = pick(pools.descriptors, rng);
    const std::string region = pick(pools.regions, rng);
    const bool measured = rng() % 100 < 70;
    const int meas_whole = static_cast<int>(rng() % 9) + 1;
    const int meas_frac = static_cast<int>(rng() % 100);
    const bool compared = rng() % 100 < 35;
    const std::string month = pick(pools.months, rng);
    const int day = 1 + static_cast<int>(rng() % 28);
    const int year = 2019 + static_cast<int>(rng() % 6);
    const std::string heart = pick(pools.heart_states, rng);
    const std::string lung_adj = pick(pools.lung_adjectives, rng);
    const std::string lung_state = pick(pools.lung_states, rng);
    const std::string filler_a = pick(pools.fillers_a, rng);
    const std::string filler_b = pick(pools.fillers_b, rng);
    const int hedge_draw = static_cast<int>(rng() % 100);
    const std::string hedge_one = pick(pools.hedges, rng);
    const std::string hedge_two = pick(pools.hedges, rng);
    const bool dictated = rng() % 100 < 8;
    const int dictation_id = 1000 + static_cast<int>(rng() % 9000);

    char measurement[16];
    std::snprintf(measurement, sizeof(measurement), "%d.%02d", meas_whole, meas_frac);

    std::string doc;
    doc += view + " chest radiograph. ";
    doc += "Indication: " + std::to_string(age) + "-year-old patient with " + symptom + ". ";
    if (compared)
        doc += "Comparison: prior study dated " + month + " " + std::to_string(day) + ", " +
               std::to_string(year) + ". ";
    doc += "Findings: " + descriptor + " " + label_lc + " in the " + region;
    if (measured)
        doc += ", measuring " + std::string(measurement) + " cm. ";
    else
        doc += ". ";
    doc += heart + " ";
    doc += "The " + lung_adj + " lung fields are read as " + lung_state + ". ";
    doc += filler_a + " ";
    doc += filler_b + " ";
    doc += "Lines and tubes are in standard position. ";
    doc += "The upper abdomen is without focal finding. ";
    doc += "Visualized soft tissues appear within expected limits. ";
    doc += "No displaced fracture or free air is identified. ";
    doc += "Conclusion: " + label + ".";
    // most reports close with one, sometimes two, hedged impression items
    if (hedge_draw < 60)
        doc += " Impression: " + hedge_one + ".";
    if (hedge_draw < 15)
        doc += " Impression: " + hedge_two + ".";
    // occasional transcription tail with a unique staff id, the corpus's own
    // noise floor for language-model filters
    if (dictated)
        doc += " Dictated by staff physician " + std::to_string(dictation_id) + ".";
    return doc;
}

} // namespace detail

/// Synthetic clustered corpus: per cluster a blurred-uniform center image
/// plus Gaussian member noise, and template reports built around the
/// cluster label.
inline Corpus generate_corpus(const CorpusSpec& spec, const Lexicon& lexicon = Lexicon::defaults()) {
    validate(spec);
    const detail::TemplatePools pools(lexicon);
    const int pixels = spec.height * spec.width * spec.channels;

    // Raw per-cluster fields. Odd clusters mix in their even neighbor's
    // field: consecutive labels form diagnosis pairs, and the paired
    // conditions are the visually confusable ones, so their image clusters
    // overlap the way the corresponding findings do on real radiographs.
    constexpr double kSiblingMix = 0.85;
    std::vector<std::vector<double>> fields(static_cast<std::size_t>(spec.n_clusters));
    for (int c = 0; c < spec.n_clusters; ++c) {
        Rng center_rng(derive_seed(spec.seed, "corpus.center", static_cast<std::uint64_t>(c)));
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        auto& field = fields[static_cast<std::size_t>(c)];
        field.resize(static_cast<std::size_t>(pixels));
        for (double& v : field) v = uniform(center_rng) - 0.5;
    }
    for (int c = spec.n_clusters - 1; c > 0; c -= 2) {
        auto& field = fields[static_cast<std::size_t>(c)];
        const auto& sibling = fields[static_cast<std::size_t>(c - 1)];
        for (std::size_t p = 0; p < field.size(); ++p)
            field[p] = kSiblingMix * sibling[p] +
                       std::sqrt(1.0 - kSiblingMix * kSiblingMix) * field[p];
    }

    Corpus corpus;
    corpus.reserve(static_cast<std::size_t>(spec.n_clusters) *
                   static_cast<std::size_t>(spec.entries_per_cluster));
    for (int c = 0; c < spec.n_clusters; ++c) {
        std::vector<double> center =
            detail::box_blur3(fields[static_cast<std::size_t>(c)], spec.height, spec.width,
                              spec.channels);
        // Standardize the blurred field so cluster_center_spread is the
        // per-pixel std of the center around the baseline. Without this the
        // shared brightness component dominates every cosine and clusters
        // cannot separate in angle.
        double mean = 0.0;
        for (double v : center) mean += v;
        mean /= static_cast<double>(pixels);
        double var = 0.0;
        for (double v : center) var += (v - mean) * (v - mean);
        const double stddev = std::sqrt(var / static_cast<double>(pixels));
        // Radiograph-style dark baseline: keeps the shared brightness from
        // crowding out the angular structure retrieval operates on.
        constexpr double kBaseBrightness = 0.08;
        for (double& v : center)
            v = std::clamp(kBaseBrightness + spec.cluster_center_spread * (v - mean) / stddev, 0.0, 1.0);

        Rng member_rng(derive_seed(spec.seed, "corpus.member", static_cast<std::uint64_t>(c)));
        Rng doc_rng(derive_seed(spec.seed, "corpus.doc", static_cast<std::uint64_t>(c)));
        std::normal_distribution<double> noise(0.0, spec.within_cluster_noise);
        const std::string& label =
            spec.label_vocabulary[static_cast<std::size_t>(c) % spec.label_vocabulary.size()];

        for (int e = 0; e < spec.entries_per_cluster; ++e) {
            KnowledgeEntry entry;
            char id[32];
            std::snprintf(id, sizeof(id), "c%02d_e%04d", c, e);
            entry.id = id;
            entry.image.height = spec.height;
            entry.image.width = spec.width;
            entry.image.channels = spec.channels;
            entry.image.data.resize(static_cast<std::size_t>(pixels));
            for (int p = 0; p < pixels; ++p)
                entry.image.data[static_cast<std::size_t>(p)] = quantize_f32(
                    std::clamp(center[static_cast<std::size_t>(p)] + noise(member_rng), 0.0, 1.0));
            entry.document = detail::render_document(pools, label, doc_rng);
            entry.label = label;
            entry.provenance = Provenance::Benign;
            entry.source_cluster = c;
            corpus.push_back(std::move(entry));
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitFractions {
    double reference = 0.5;
    double candidate = 0.25;
    double query = 0.25;
};

struct CorpusSplit {
    std::vector<std::string> reference_pool;
    std::vector<std::string> candidate_pool;
    std::vector<std::string> query_set;

    nlohmann::json to_json() const {
        return {{"reference_pool", reference_pool},
                {"candidate_pool", candidate_pool},
                {"query_set", query_set}};
    }

    static CorpusSplit from_json(const nlohmann::json& j) {
        CorpusSplit s;
        try {
            s.reference_pool = j.at("reference_pool").get<std::vector<std::string>>();
            s.candidate_pool = j.at("candidate_pool").get<std::vector<std::string>>();
            s.query_set = j.at("query_set").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("split: ") + e.what());
        }
        return s;
    }
};

/// Seeded stratified partition: every cluster contributes to every pool,
/// with largest-remainder rounding of the per-cluster quotas.
inline CorpusSplit split_corpus(const Corpus& corpus, const SplitFractions& fractions,
                                std::uint64_t seed) {
    const std::array<double, 3> f = {fractions.reference, fractions.candidate, fractions.query};
    for (double v : f)
        if (!(v > 0.0)) throw ConfigError("split: fractions must be positive");
    if (f[0] + f[1] + f[2] > 1.0 + 1e-9)
        throw ConfigError("split: fractions must sum to at most 1");

    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        strata[corpus[i].source_cluster.value_or(-1)].push_back(i);

    CorpusSplit split;
    for (auto& [cluster, members] : strata) {
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(cluster + 1)));
        std::shuffle(members.begin(), members.end(), rng);

        const auto m = static_cast<double>(members.size());
        std::array<std::size_t, 3> counts{};
        std::array<double, 3> remainders{};
        std::size_t assigned = 0;
        for (int k = 0; k < 3; ++k) {
            const double quota = f[static_cast<std::size_t>(k)] * m;
            counts[static_cast<std::size_t>(k)] = static_cast<std::size_t>(quota);
            remainders[static_cast<std::size_t>(k)] = quota - std::floor(quota);
            assigned += counts[static_cast<std::size_t>(k)];
        }
        std::size_t total = static_cast<std::size_t>(std::floor((f[0] + f[1] + f[2]) * m + 1e-9));
        while (assigned < total) {
            int best = 0;
            for (int k = 1; k < 3; ++k)
                if (remainders[static_cast<std::size_t>(k)] > remainders[static_cast<std::size_t>(best)])
                    best = k;
            remainders[static_cast<std::size_t>(best)] = -1.0;
            ++counts[static_cast<std::size_t>(best)];
            ++assigned;
        }
        for (int k = 0; k < 3; ++k)
            if (counts[static_cast<std::size_t>(k)] == 0)
                throw SplitError("split: empty pool for cluster " + std::to_string(cluster));

        std::size_t offset = 0;
        auto take = [&](std::vector<std::string>& pool, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i)
                pool.push_back(corpus[members[offset + i]].id);
            offset += n;
        };
        take(split.reference_pool, counts[0]);
        take(split.candidate_pool, counts[1]);
        take(split.query_set, counts[2]);
    }
    std::sort(split.reference_pool.begin(), split.reference_pool.end());
    std::sort(split.candidate_pool.begin(), split.candidate_pool.end());
    std::sort(split.query_set.begin(), split.query_set.end());
    return split;
}

// ---------------------------------------------------------------------------
// On-disk format: corpus.jsonl manifest plus one image blob per entry.
// ---------------------------------------------------------------------------

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream manifest(dir / "corpus.jsonl");
    if (!manifest)
        throw FormatError("corpus: cannot write manifest in " + dir.string());
    for (const auto& entry : corpus) {
        for (char c : entry.id)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'))
                throw ConfigError("corpus: id '" + entry.id + "' is not filename-safe");
        const std::string rel = "images/" + entry.id + ".bin";
        save_image(dir / rel, entry.image);
        nlohmann::json line = {
            {"id", entry.id},
            {"label", entry.label},
            {"provenance", to_string(entry.provenance)},
            {"document", entry.document},
            {"image", rel},
            {"height", entry.image.height},
            {"width", entry.image.width},
            {"channels", entry.image.channels},
        };
        if (entry.source_cluster)
            line["source_cluster"] = *entry.source_cluster;
        else
            line["source_cluster"] = nullptr;
        manifest << line.dump() << '\n';
    }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "corpus.jsonl";
    std::ifstream manifest(manifest_path);
    if (!manifest)
        throw MissingArtifactError("corpus: no manifest at " + manifest_path.string());

    Corpus corpus;
    std::set<std::string> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("corpus: manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        KnowledgeEntry entry;
        try {
            entry.id = j.at("id").get<std::string>();
            entry.label = j.at("label").get<std::string>();
            entry.provenance = provenance_from_string(j.at("provenance").get<std::string>());
            entry.document = j.at("document").get<std::string>();
            const auto& sc = j.at("source_cluster");
            if (!sc.is_null()) entry.source_cluster = sc.get<int>();
            const auto rel = j.at("image").get<std::string>();
            entry.image = load_image(dir / rel, j.at("height").get<int>(), j.at("width").get<int>(),
                                     j.at("channels").get<int>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("corpus: manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!seen.insert(entry.id).second)
            throw ParseError("corpus: manifest line " + std::to_string(line_no) + ": duplicate id '" +
                             entry.id + "'");
        corpus.push_back(std::move(entry));
    }
    return corpus;
}

} // namespace poisonbench
