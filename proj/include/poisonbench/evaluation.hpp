#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "poisonbench/attack.hpp"
#include "poisonbench/corpus.hpp"
#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"
#include "poisonbench/retrieval.hpp"

namespace poisonbench {

// ---------------------------------------------------------------------------
// Retrieval attack success rate
// ---------------------------------------------------------------------------

struct ASRTable {
    std::map<int, double> rates; // k -> fraction of queries with a poisoned hit
    int query_count = 0;
    int poisoned_count = 0;
};

/// Fraction of queries whose top-k contains at least one poisoned id.
/// All depths are read off one ranked list per query, so rates are
/// nondecreasing in k by construction.
inline ASRTable asr_at_k(const RetrievalIndex& index, const Encoder& encoder,
                         std::span<const ImageTensor> queries,
                         const std::set<std::string>& poisoned_ids, const std::vector<int>& ks) {
    if (queries.empty())
        throw ConfigError("asr: empty query set");
    if (ks.empty())
        throw ConfigError("asr: no depths requested");
    for (int k : ks)
        if (k < 1) throw ConfigError("asr: depths must be at least 1");

    const int max_k = *std::max_element(ks.begin(), ks.end());
    ASRTable table;
    table.query_count = static_cast<int>(queries.size());
    table.poisoned_count = static_cast<int>(poisoned_ids.size());
    std::map<int, int> hits;
    for (int k : ks) hits[k] = 0;

    for (const auto& query : queries) {
        const RetrievalResult result = retrieve(index, encoder, query, max_k);
        int first_poisoned = -1;
        for (std::size_t r = 0; r < result.ranked.size(); ++r)
            if (poisoned_ids.count(result.ranked[r].id)) {
                first_poisoned = static_cast<int>(r);
                break;
            }
        if (first_poisoned < 0) continue;
        for (int k : ks)
            if (first_poisoned < k) ++hits[k];
    }
    for (int k : ks)
        table.rates[k] = static_cast<double>(hits[k]) / static_cast<double>(queries.size());
    return table;
}

// ---------------------------------------------------------------------------
// Chance-normalized accuracy
// ---------------------------------------------------------------------------

/// max(0, (s - s_rand) / (1 - s_rand)): random guessing maps to 0,
/// perfection to 1, below-chance results clamp to 0.
inline double chance_normalized(double s, double s_rand) {
    if (!(s >= 0.0 && s <= 1.0))
        throw ConfigError("chance_normalized: s outside [0,1]");
    if (!(s_rand >= 0.0 && s_rand < 1.0))
        throw ConfigError("chance_normalized: s_rand outside [0,1)");
    return std::max(0.0, (s - s_rand) / (1.0 - s_rand));
}

// ---------------------------------------------------------------------------
// Retrieval-voting generator
// ---------------------------------------------------------------------------

enum class GeneratorKind { MajorityVote, SimilarityWeightedVote };

inline std::string to_string(GeneratorKind k) {
    return k == GeneratorKind::MajorityVote ? "majority_vote" : "similarity_weighted_vote";
}

inline GeneratorKind generator_kind_from_string(std::string_view s) {
    if (s == "majority_vote") return GeneratorKind::MajorityVote;
    if (s == "similarity_weighted_vote") return GeneratorKind::SimilarityWeightedVote;
    throw ConfigError("generator: unknown kind '" + std::string(s) + "'");
}

struct GeneratorSpec {
    GeneratorKind kind = GeneratorKind::MajorityVote;
    int k = 5;
};

/// Answer by voting over the labels of the retrieved entries; poisoned
/// entries vote with their distorted labels. Ties break lexicographically.
inline std::string generate_answer(const RetrievalIndex& index, const Corpus& corpus,
                                   const std::unordered_map<std::string, std::size_t>& by_id,
                                   const Encoder& encoder, const ImageTensor& query,
                                   const GeneratorSpec& spec) {
    if (spec.k < 1)
        throw ConfigError("generator: k must be at least 1");
    const RetrievalResult result = retrieve(index, encoder, query, spec.k);
    std::map<std::string, double> votes;
    for (const auto& [id, score] : result.ranked) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw ConfigError("generator: retrieved id '" + id + "' not in corpus");
        const std::string& label = corpus[it->second].label;
        votes[label] += spec.kind == GeneratorKind::MajorityVote ? 1.0 : score;
    }
    std::string best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const auto& [label, score] : votes) // std::map: lexicographic order, first max wins ties
        if (score > best_score) {
            best_score = score;
            best = label;
        }
    return best;
}

// ---------------------------------------------------------------------------
// Downstream utility
// ---------------------------------------------------------------------------

enum class Condition { NoRag, CleanRag, Attacked, AblationNoHijack, AblationNoInjection };

inline std::string to_string(Condition c) {
    switch (c) {
        case Condition::NoRag: return "no_rag";
        case Condition::CleanRag: return "clean_rag";
        case Condition::Attacked: return "attacked";
        case Condition::AblationNoHijack: return "ablation_no_hijack";
        case Condition::AblationNoInjection: return "ablation_no_injection";
    }
    throw ConfigError("condition: unknown");
}

struct UtilityReport {
    Condition condition = Condition::CleanRag;
    double s = 0.0;        // raw accuracy
    double s_rand = 0.0;   // random baseline
    double s_scaled = 0.0; // chance-normalized
};

struct QueryCase {
    ImageTensor image;
    std::string truth_label;
};

inline UtilityReport evaluate_utility(const RetrievalIndex& index, const Corpus& corpus,
                                      const Encoder& encoder, std::span<const QueryCase> queries,
                                      const GeneratorSpec& generator,
                                      const std::vector<std::string>& label_vocab,
                                      Condition condition) {
    if (queries.empty())
        throw ConfigError("utility: empty query set");
    if (label_vocab.empty())
        throw ConfigError("utility: empty label vocabulary");
    const auto by_id = index_by_id(corpus);
    int correct = 0;
    for (const auto& q : queries)
        if (generate_answer(index, corpus, by_id, encoder, q.image, generator) == q.truth_label)
            ++correct;
    UtilityReport report;
    report.condition = condition;
    report.s = static_cast<double>(correct) / static_cast<double>(queries.size());
    report.s_rand = 1.0 / static_cast<double>(label_vocab.size());
    report.s_scaled = chance_normalized(report.s, report.s_rand);
    return report;
}

// ---------------------------------------------------------------------------
// Experiment description shared by the ablation suite, the sweeps and the
// pipeline driver.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    CorpusSpec corpus;
    SplitFractions fractions;
    EncoderKind image_encoder_kind = EncoderKind::Linear;
    int embed_dim = 64;
    int text_buckets = 4096;
    ProfilingConfig profiling{10, 10, 100, 1e-6, 0};
    AttackConfig attack;
    TextPoisonConfig text;
    std::vector<int> ks = {1, 3, 5};
    GeneratorSpec generator{GeneratorKind::MajorityVote, 5};
    std::uint64_t seed = 888;
    int n_threads = 1;

    /// Stage seeds derive from the global seed; called once by the driver.
    void resolve_seeds() {
        corpus.seed = derive_seed(seed, "corpus");
        profiling.seed = derive_seed(seed, "profiling");
        attack.seed = derive_seed(seed, "attack");
    }

    EncoderSpec image_encoder_spec() const {
        return {image_encoder_kind, corpus.height * corpus.width * corpus.channels, embed_dim,
                derive_seed(seed, "image_encoder")};
    }

    EncoderSpec text_encoder_spec() const {
        return {EncoderKind::HashedBowText, text_buckets, embed_dim, derive_seed(seed, "text_encoder")};
    }
};

/// Mean within-cluster minus mean cross-cluster embedding cosine, sampled.
inline double separability_margin(const Corpus& corpus, const Encoder& encoder) {
    std::vector<Embedding> embeddings;
    embeddings.reserve(corpus.size());
    for (const auto& e : corpus) embeddings.push_back(encoder.embed_image(e.image));
    double within = 0.0, cross = 0.0;
    std::size_t n_within = 0, n_cross = 0;
    const std::size_t stride = corpus.size() > 400 ? 3 : 1;
    for (std::size_t i = 0; i < corpus.size(); i += stride)
        for (std::size_t j = i + 1; j < corpus.size(); j += stride) {
            const double s = cosine_similarity(embeddings[i], embeddings[j]);
            if (corpus[i].source_cluster == corpus[j].source_cluster) {
                within += s;
                ++n_within;
            } else {
                cross += s;
                ++n_cross;
            }
        }
    if (n_within == 0 || n_cross == 0) return 0.0;
    return within / static_cast<double>(n_within) - cross / static_cast<double>(n_cross);
}

/// Materialized experiment state: corpus, split, encoders, profiles.
struct ExperimentContext {
    Corpus corpus;
    CorpusSplit split;
    Encoder image_encoder;
    Encoder text_encoder;
    ProfilingResult profiling;
    Corpus knowledge_base; // every non-query entry
    std::vector<QueryCase> queries;
    double margin = 0.0;        // separability of the accepted corpus draw
    int corpus_regenerations = 0;
};

/// Corpus, split, encoders and derived pools; no profiling yet.
inline ExperimentContext prepare_corpus_context(ExperimentConfig config) {
    config.resolve_seeds();
    ExperimentContext ctx{.corpus = {},
                          .split = {},
                          .image_encoder = Encoder::build(config.image_encoder_spec()),
                          .text_encoder = Encoder::build(config.text_encoder_spec()),
                          .profiling = {},
                          .knowledge_base = {},
                          .queries = {},
                          .margin = 0.0,
                          .corpus_regenerations = 0};

    // Separability contract: mean within-cluster cosine must exceed mean
    // cross-cluster cosine by 0.1. A failing draw is regenerated under a
    // shifted seed and the event surfaces in the stage report.
    CorpusSpec corpus_spec = config.corpus;
    for (int attempt = 0; attempt < 4; ++attempt) {
        ctx.corpus = generate_corpus(corpus_spec, config.text.lexicon);
        ctx.margin = separability_margin(ctx.corpus, ctx.image_encoder);
        if (ctx.margin >= 0.1) break;
        ++ctx.corpus_regenerations;
        corpus_spec.seed = derive_seed(corpus_spec.seed, "regenerate");
    }
    if (ctx.margin < 0.1)
        throw ConfigError("corpus: separability margin stayed below 0.1 after regeneration; "
                          "widen cluster_center_spread relative to within_cluster_noise");

    ctx.split = split_corpus(ctx.corpus, config.fractions, derive_seed(config.seed, "split"));
    const std::set<std::string> query_ids(ctx.split.query_set.begin(), ctx.split.query_set.end());
    for (const auto& entry : ctx.corpus) {
        if (query_ids.count(entry.id))
            ctx.queries.push_back({entry.image, entry.label});
        else
            ctx.knowledge_base.push_back(entry);
    }
    return ctx;
}

inline ExperimentContext prepare_experiment(const ExperimentConfig& config_in) {
    ExperimentConfig config = config_in;
    config.resolve_seeds();
    ExperimentContext ctx = prepare_corpus_context(config_in);
    const std::set<std::string> reference_ids(ctx.split.reference_pool.begin(),
                                              ctx.split.reference_pool.end());
    Corpus reference;
    for (const auto& entry : ctx.corpus)
        if (reference_ids.count(entry.id)) reference.push_back(entry);
    ctx.profiling = profile_clusters(reference, ctx.image_encoder, config.profiling);
    return ctx;
}

inline Corpus inject_poisons(const Corpus& knowledge_base, const std::vector<PoisonedEntry>& poisons) {
    Corpus merged = knowledge_base;
    for (const auto& p : poisons) merged.push_back(p.entry);
    return merged;
}

inline std::set<std::string> poison_ids(const std::vector<PoisonedEntry>& poisons) {
    std::set<std::string> ids;
    for (const auto& p : poisons) ids.insert(p.entry.id);
    return ids;
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

struct ConditionOutcome {
    ASRTable asr;
    UtilityReport utility;
};

inline std::vector<ImageTensor> query_images(std::span<const QueryCase> queries) {
    std::vector<ImageTensor> images;
    images.reserve(queries.size());
    for (const auto& q : queries) images.push_back(q.image);
    return images;
}

/// Clean / attacked / w-o hijack / w-o injection, sharing one corpus,
/// split and profile set.
inline std::map<Condition, ConditionOutcome> run_ablation_suite(const ExperimentConfig& config_in) {
    ExperimentConfig config = config_in;
    config.resolve_seeds();
    const ExperimentContext ctx = prepare_experiment(config_in);
    const std::vector<ImageTensor> qimages = query_images(ctx.queries);

    std::map<Condition, ConditionOutcome> outcomes;

    auto evaluate_condition = [&](Condition condition, AblationMode ablation) {
        AttackConfig attack = config.attack;
        attack.ablation = ablation;
        const std::vector<PoisonedEntry> poisons = run_attack(
            ctx.corpus, ctx.split, ctx.profiling.profiles, ctx.image_encoder, attack, config.text,
            config.n_threads);
        const Corpus poisoned = inject_poisons(ctx.knowledge_base, poisons);
        const RetrievalIndex index = build_index(poisoned, ctx.image_encoder);
        ConditionOutcome outcome;
        outcome.asr = asr_at_k(index, ctx.image_encoder, qimages, poison_ids(poisons), config.ks);
        outcome.utility = evaluate_utility(index, poisoned, ctx.image_encoder, ctx.queries,
                                           config.generator, config.corpus.label_vocabulary, condition);
        outcomes[condition] = std::move(outcome);
    };

    {
        const RetrievalIndex clean_index = build_index(ctx.knowledge_base, ctx.image_encoder);
        ConditionOutcome clean;
        clean.asr.query_count = static_cast<int>(ctx.queries.size());
        clean.asr.poisoned_count = 0;
        for (int k : config.ks) clean.asr.rates[k] = 0.0;
        clean.utility = evaluate_utility(clean_index, ctx.knowledge_base, ctx.image_encoder,
                                         ctx.queries, config.generator,
                                         config.corpus.label_vocabulary, Condition::CleanRag);
        outcomes[Condition::CleanRag] = std::move(clean);
    }
    evaluate_condition(Condition::Attacked, AblationMode::None);
    evaluate_condition(Condition::AblationNoHijack, AblationMode::NoHijack);
    evaluate_condition(Condition::AblationNoInjection, AblationMode::NoInjection);
    return outcomes;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { PoisonRatio, Epsilon, NClusters };

inline std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::PoisonRatio: return "poison_ratio";
        case SweepAxis::Epsilon: return "epsilon";
        case SweepAxis::NClusters: return "n_clusters";
    }
    throw ConfigError("sweep: unknown axis");
}

inline SweepAxis sweep_axis_from_string(std::string_view s) {
    if (s == "poison_ratio") return SweepAxis::PoisonRatio;
    if (s == "epsilon") return SweepAxis::Epsilon;
    if (s == "n_clusters") return SweepAxis::NClusters;
    throw ConfigError("sweep: unknown axis '" + std::string(s) + "'");
}

struct SweepRow {
    double value = 0.0;
    ASRTable asr;
};

/// One full attack + ASR measurement per grid point. The corpus, split and
/// encoders are shared across points; profiles are recomputed only when
/// the cluster-count axis changes them.
inline std::vector<SweepRow> run_hyperparameter_sweep(SweepAxis axis, const std::vector<double>& grid,
                                                      const ExperimentConfig& config_in) {
    if (grid.empty())
        throw ConfigError("sweep: empty grid");
    ExperimentConfig config = config_in;
    config.resolve_seeds();
    const ExperimentContext ctx = prepare_experiment(config_in);
    const std::vector<ImageTensor> qimages = query_images(ctx.queries);

    Corpus reference;
    if (axis == SweepAxis::NClusters) {
        const std::set<std::string> reference_ids(ctx.split.reference_pool.begin(),
                                                  ctx.split.reference_pool.end());
        for (const auto& entry : ctx.corpus)
            if (reference_ids.count(entry.id)) reference.push_back(entry);
    }

    std::vector<SweepRow> rows;
    for (double value : grid) {
        AttackConfig attack = config.attack;
        const std::vector<ClusterProfile>* profiles = &ctx.profiling.profiles;
        ProfilingResult reprofiled;
        switch (axis) {
            case SweepAxis::PoisonRatio: {
                const int budget = std::max(
                    1, static_cast<int>(std::llround(value * static_cast<double>(ctx.corpus.size()))));
                attack.budget = budget;
                break;
            }
            case SweepAxis::Epsilon:
                attack.epsilon = value;
                if (value > 0.0) attack.alpha = std::min(attack.alpha, value);
                break;
            case SweepAxis::NClusters: {
                ProfilingConfig pc = config.profiling;
                pc.clusters = static_cast<int>(value);
                reprofiled = profile_clusters(reference, ctx.image_encoder, pc);
                profiles = &reprofiled.profiles;
                break;
            }
        }
        const std::vector<PoisonedEntry> poisons =
            run_attack(ctx.corpus, ctx.split, *profiles, ctx.image_encoder, attack, config.text,
                       config.n_threads);
        const Corpus poisoned = inject_poisons(ctx.knowledge_base, poisons);
        const RetrievalIndex index = build_index(poisoned, ctx.image_encoder);
        rows.push_back({value, asr_at_k(index, ctx.image_encoder, qimages, poison_ids(poisons),
                                        config.ks)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// 2-D PCA coordinate export
// ---------------------------------------------------------------------------

struct Projection2D {
    std::vector<std::array<double, 2>> coords;
    std::array<double, 2> explained_variance{};
};

/// Top-2 principal components by power iteration with deflation.
/// Sign convention: the first nonzero loading of each component is positive.
inline Projection2D pca_top2(const std::vector<Embedding>& points) {
    if (points.size() < 2)
        throw ConfigError("pca: need at least 2 points");
    const std::size_t n = points.size();
    const std::size_t dim = points[0].size();

    Embedding mean(dim, 0.0);
    for (const auto& p : points)
        for (std::size_t j = 0; j < dim; ++j) mean[j] += p[j];
    for (double& v : mean) v /= static_cast<double>(n);

    std::vector<Embedding> centered(points);
    for (auto& p : centered)
        for (std::size_t j = 0; j < dim; ++j) p[j] -= mean[j];

    std::vector<std::vector<double>> cov(dim, std::vector<double>(dim, 0.0));
    for (const auto& p : centered)
        for (std::size_t a = 0; a < dim; ++a)
            for (std::size_t b = a; b < dim; ++b) cov[a][b] += p[a] * p[b];
    for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = a; b < dim; ++b) {
            cov[a][b] /= static_cast<double>(n);
            cov[b][a] = cov[a][b];
        }

    auto power_component = [&](std::array<double, 2>& lambda_out, int which) -> Embedding {
        Embedding v(dim);
        for (std::size_t j = 0; j < dim; ++j)
            v[j] = 1.0 + static_cast<double>(j % 7) * 0.01; // deterministic non-degenerate start
        double lambda = 0.0;
        for (int iter = 0; iter < 1000; ++iter) {
            Embedding next(dim, 0.0);
            for (std::size_t a = 0; a < dim; ++a)
                for (std::size_t b = 0; b < dim; ++b) next[a] += cov[a][b] * v[b];
            double norm = 0.0;
            for (double x : next) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-300) break; // degenerate direction; keep current v
            for (double& x : next) x /= norm;
            double shift = 0.0;
            for (std::size_t j = 0; j < dim; ++j) shift = std::max(shift, std::abs(next[j] - v[j]));
            v = std::move(next);
            lambda = norm;
            if (shift < 1e-13) break;
        }
        for (std::size_t j = 0; j < dim; ++j)
            if (std::abs(v[j]) > 1e-12) {
                if (v[j] < 0.0)
                    for (double& x : v) x = -x;
                break;
            }
        lambda_out[static_cast<std::size_t>(which)] = lambda;
        return v;
    };

    Projection2D projection;
    const Embedding v1 = power_component(projection.explained_variance, 0);
    for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = 0; b < dim; ++b)
            cov[a][b] -= projection.explained_variance[0] * v1[a] * v1[b];
    const Embedding v2 = power_component(projection.explained_variance, 1);

    projection.coords.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = 0.0, y = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            x += centered[i][j] * v1[j];
            y += centered[i][j] * v2[j];
        }
        projection.coords[i] = {x, y};
    }
    return projection;
}

/// CSV columns: id, x, y, provenance, cluster.
inline void export_projection(const Corpus& corpus, const Encoder& encoder,
                              const std::filesystem::path& path) {
    if (corpus.size() < 2)
        throw ConfigError("projection: corpus smaller than 2");
    std::vector<Embedding> embeddings;
    embeddings.reserve(corpus.size());
    for (const auto& entry : corpus)
        embeddings.push_back(encoder.embed_image(entry.image));
    const Projection2D projection = pca_top2(embeddings);

    std::ofstream out(path);
    if (!out)
        throw FormatError("projection: cannot write " + path.string());
    out << "id,x,y,provenance,cluster\n";
    char buf[64];
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        out << corpus[i].id << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", projection.coords[i][0]);
        out << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", projection.coords[i][1]);
        out << buf << ',';
        out << to_string(corpus[i].provenance) << ','
            << (corpus[i].source_cluster ? std::to_string(*corpus[i].source_cluster) : "") << '\n';
    }
}

} // namespace poisonbench
