#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "poisonbench/corpus.hpp"
#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"
#include "poisonbench/evaluation.hpp"
#include "poisonbench/profiling.hpp"
#include "poisonbench/retrieval.hpp"

namespace poisonbench {

enum class DefenseKind {
    ImageClustering,
    TextClustering,
    CrossModalConsistency,
    Perplexity,
    AnomalyDetection,
    HighScoreTruncation,
    LowScoreThreshold,
};

inline std::string to_string(DefenseKind k) {
    switch (k) {
        case DefenseKind::ImageClustering: return "image_clustering";
        case DefenseKind::TextClustering: return "text_clustering";
        case DefenseKind::CrossModalConsistency: return "cross_modal_consistency";
        case DefenseKind::Perplexity: return "perplexity";
        case DefenseKind::AnomalyDetection: return "anomaly_detection";
        case DefenseKind::HighScoreTruncation: return "high_score_truncation";
        case DefenseKind::LowScoreThreshold: return "low_score_threshold";
    }
    throw ConfigError("defense: unknown kind");
}

inline DefenseKind defense_kind_from_string(std::string_view s) {
    if (s == "image_clustering") return DefenseKind::ImageClustering;
    if (s == "text_clustering") return DefenseKind::TextClustering;
    if (s == "cross_modal_consistency") return DefenseKind::CrossModalConsistency;
    if (s == "perplexity") return DefenseKind::Perplexity;
    if (s == "anomaly_detection") return DefenseKind::AnomalyDetection;
    if (s == "high_score_truncation") return DefenseKind::HighScoreTruncation;
    if (s == "low_score_threshold") return DefenseKind::LowScoreThreshold;
    throw ConfigError("defense: unknown kind '" + std::string(s) + "'");
}

inline const std::vector<DefenseKind>& all_defense_kinds() {
    static const std::vector<DefenseKind> kinds = {
        DefenseKind::ImageClustering,      DefenseKind::TextClustering,
        DefenseKind::CrossModalConsistency, DefenseKind::Perplexity,
        DefenseKind::AnomalyDetection,     DefenseKind::HighScoreTruncation,
        DefenseKind::LowScoreThreshold,
    };
    return kinds;
}

/// Per-kind thresholds. Defaults are the shipped operating points; the
/// identity() configuration of every kind is an exact no-op.
struct DefenseConfig {
    DefenseKind kind = DefenseKind::ImageClustering;
    int clusters = 16;                    // clustering filters: k-means cluster count
    double high_similarity = 0.999;       // clustering filters: near-duplicate cutoff
    int sparsity_floor = 2;               // clustering filters: minimum cluster size
    double consistency_percentile = 5.0;  // cross-modal: removal tail, percent
    double perplexity_percentile = 95.0;  // perplexity: keep below this percentile
    double anomaly_threshold = 2.0;       // anomaly: z-score distance t
    double high_score = 0.9999;           // truncation: scores above are dropped
    double low_score = 0.2;               // thresholding: scores below are dropped
    std::uint64_t seed = 0;

    static DefenseConfig identity(DefenseKind kind) {
        DefenseConfig c;
        c.kind = kind;
        c.high_similarity = 2.0;
        c.sparsity_floor = 0;
        c.consistency_percentile = 0.0;
        c.perplexity_percentile = 100.0;
        c.anomaly_threshold = std::numeric_limits<double>::infinity();
        c.high_score = std::numeric_limits<double>::infinity();
        c.low_score = -std::numeric_limits<double>::infinity();
        return c;
    }
};

struct RemovedEntry {
    std::string id;
    std::string reason;
};

struct FilterReport {
    std::vector<RemovedEntry> removed;
    std::vector<std::string> kept; // input order preserved
    std::map<std::string, double> stats;
};

namespace detail {

/// Shared mechanics of the image/text clustering defenses: drop
/// near-duplicate-dense clusters and clusters below the sparsity floor.
inline FilterReport cluster_filter(const Corpus& corpus, const std::vector<Embedding>& embeddings,
                                   const DefenseConfig& config) {
    if (config.clusters < 1)
        throw ConfigError("defense: cluster count must be positive");
    if (static_cast<std::size_t>(config.clusters) > corpus.size())
        throw ConfigError("defense: cluster count exceeds corpus size");

    const KMeansResult km = kmeans(embeddings, config.clusters, config.seed);
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(config.clusters));
    for (std::size_t i = 0; i < corpus.size(); ++i)
        members[static_cast<std::size_t>(km.assignments[i])].push_back(i);

    std::vector<std::string> reasons(static_cast<std::size_t>(config.clusters));
    for (std::size_t c = 0; c < members.size(); ++c) {
        const auto& m = members[c];
        if (static_cast<int>(m.size()) < config.sparsity_floor) {
            reasons[c] = "sparse_cluster";
            continue;
        }
        if (m.size() < 2) continue;
        double sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < m.size(); ++a)
            for (std::size_t b = a + 1; b < m.size(); ++b) {
                sum += cosine_similarity(embeddings[m[a]], embeddings[m[b]]);
                ++pairs;
            }
        if (sum / static_cast<double>(pairs) > config.high_similarity)
            reasons[c] = "high_density_cluster";
    }

    FilterReport report;
    int removed_clusters = 0;
    for (const auto& r : reasons)
        if (!r.empty()) ++removed_clusters;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto c = static_cast<std::size_t>(km.assignments[i]);
        if (reasons[c].empty())
            report.kept.push_back(corpus[i].id);
        else
            report.removed.push_back({corpus[i].id, reasons[c]});
    }
    report.stats["clusters"] = static_cast<double>(config.clusters);
    report.stats["removed_clusters"] = static_cast<double>(removed_clusters);
    return report;
}

/// Remove the lowest/highest `count` entries of `values` (ties by id).
inline FilterReport tail_filter(const Corpus& corpus, const std::vector<double>& values,
                                std::size_t count, bool remove_low, const std::string& reason) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return remove_low ? values[a] < values[b] : values[a] > values[b];
        return corpus[a].id < corpus[b].id;
    });
    std::set<std::size_t> drop(order.begin(),
                               order.begin() + static_cast<std::ptrdiff_t>(std::min(count, order.size())));
    FilterReport report;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (drop.count(i))
            report.removed.push_back({corpus[i].id, reason});
        else
            report.kept.push_back(corpus[i].id);
    }
    return report;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Pre-retrieval corpus filters
// ---------------------------------------------------------------------------

inline FilterReport image_cluster_filter(const Corpus& corpus, const Encoder& image_encoder,
                                         const DefenseConfig& config) {
    std::vector<Embedding> embeddings;
    embeddings.reserve(corpus.size());
    for (const auto& entry : corpus)
        embeddings.push_back(image_encoder.embed_image(entry.image));
    return detail::cluster_filter(corpus, embeddings, config);
}

inline FilterReport text_cluster_filter(const Corpus& corpus, const Encoder& text_encoder,
                                        const DefenseConfig& config) {
    std::vector<Embedding> embeddings;
    embeddings.reserve(corpus.size());
    for (const auto& entry : corpus)
        embeddings.push_back(text_encoder.embed_text(entry.document));
    return detail::cluster_filter(corpus, embeddings, config);
}

/// Drop the lowest p-percent tail of per-entry image/text cosine alignment.
inline FilterReport cross_modal_consistency_filter(const Corpus& corpus, const Encoder& image_encoder,
                                                   const Encoder& text_encoder,
                                                   const DefenseConfig& config) {
    if (image_encoder.spec().embed_dim != text_encoder.spec().embed_dim)
        throw DimensionError("defense: encoders disagree on embed_dim");
    if (!(config.consistency_percentile >= 0.0 && config.consistency_percentile <= 100.0))
        throw ConfigError("defense: consistency percentile outside [0,100]");

    std::vector<double> consistency(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i)
        consistency[i] = cosine_similarity(image_encoder.embed_image(corpus[i].image),
                                           text_encoder.embed_text(corpus[i].document));
    const std::size_t count = static_cast<std::size_t>(
        std::ceil(config.consistency_percentile / 100.0 * static_cast<double>(corpus.size()) - 1e-12));
    FilterReport report =
        detail::tail_filter(corpus, consistency, count, /*remove_low=*/true, "low_cross_modal");
    report.stats["removed"] = static_cast<double>(report.removed.size());
    return report;
}

/// Add-one-smoothed word-bigram model; documents in the top perplexity
/// tail are dropped. The defender trains on the corpus it is given
/// (no ground-truth provenance).
class BigramModel {
public:
    explicit BigramModel(const Corpus& train) {
        for (const auto& entry : train) {
            const auto tokens = tokenize(entry.document);
            for (const auto& t : tokens) vocabulary_.insert(t);
            for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
                ++bigram_[tokens[i] + "\x1f" + tokens[i + 1]];
                ++context_[tokens[i]];
            }
        }
    }

    /// exp(-mean log P(w_i | w_{i-1})); documents without bigrams are
    /// treated as maximal perplexity.
    double perplexity(std::string_view document) const {
        const auto tokens = tokenize(document);
        if (tokens.size() < 2)
            return std::numeric_limits<double>::infinity();
        const double v = static_cast<double>(vocabulary_.size()) + 1.0;
        double nll = 0.0;
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
            const auto big = bigram_.find(tokens[i] + "\x1f" + tokens[i + 1]);
            const auto ctx = context_.find(tokens[i]);
            const double num = 1.0 + (big == bigram_.end() ? 0.0 : static_cast<double>(big->second));
            const double den = v + (ctx == context_.end() ? 0.0 : static_cast<double>(ctx->second));
            nll -= std::log(num / den);
        }
        return std::exp(nll / static_cast<double>(tokens.size() - 1));
    }

private:
    std::set<std::string> vocabulary_;
    std::unordered_map<std::string, long> bigram_;
    std::unordered_map<std::string, long> context_;
};

inline FilterReport perplexity_filter(const Corpus& corpus, const DefenseConfig& config) {
    if (!(config.perplexity_percentile >= 0.0 && config.perplexity_percentile <= 100.0))
        throw ConfigError("defense: perplexity percentile outside [0,100]");
    const BigramModel model(corpus);
    std::vector<double> perplexities(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i)
        perplexities[i] = model.perplexity(corpus[i].document);
    const double tail = 100.0 - config.perplexity_percentile;
    const std::size_t count = static_cast<std::size_t>(
        std::ceil(tail / 100.0 * static_cast<double>(corpus.size()) - 1e-12));
    FilterReport report =
        detail::tail_filter(corpus, perplexities, count, /*remove_low=*/false, "high_perplexity");
    report.stats["removed"] = static_cast<double>(report.removed.size());
    return report;
}

// ---------------------------------------------------------------------------
// Retrieval-time filters
// ---------------------------------------------------------------------------

/// Mean-similarity z-score outlier removal among the retrieved items.
/// A zero-variance result carries no outlier signal and is left intact.
inline FilterReport anomaly_detect(const RetrievalResult& result, const RetrievalIndex& index,
                                   const DefenseConfig& config) {
    FilterReport report;
    if (result.ranked.size() < 2) {
        for (const auto& item : result.ranked) report.kept.push_back(item.id);
        report.stats["sigma"] = 0.0;
        return report;
    }
    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < index.ids.size(); ++i) row_of[index.ids[i]] = i;

    const std::size_t m = result.ranked.size();
    std::vector<double> mean_sim(m, 0.0);
    for (std::size_t a = 0; a < m; ++a) {
        const auto ra = row_of.find(result.ranked[a].id);
        if (ra == row_of.end())
            throw ConfigError("defense: retrieved id not in index");
        double sum = 0.0;
        for (std::size_t b = 0; b < m; ++b) {
            if (a == b) continue;
            sum += cosine_similarity(index.rows[ra->second], index.rows[row_of[result.ranked[b].id]]);
        }
        mean_sim[a] = sum / static_cast<double>(m - 1);
    }
    double mu = 0.0;
    for (double v : mean_sim) mu += v;
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (double v : mean_sim) var += (v - mu) * (v - mu);
    const double sigma = std::sqrt(var / static_cast<double>(m));

    report.stats["sigma"] = sigma;
    for (std::size_t a = 0; a < m; ++a) {
        if (sigma > 0.0 && mean_sim[a] < mu - config.anomaly_threshold * sigma)
            report.removed.push_back({result.ranked[a].id, "semantic_outlier"});
        else
            report.kept.push_back(result.ranked[a].id);
    }
    return report;
}

enum class TruncationSide { High, Low };

/// High side drops suspiciously large scores, low side enforces a minimum
/// relevance; both preserve the order of kept items.
inline FilterReport score_truncation(const RetrievalResult& result, const DefenseConfig& config,
                                     TruncationSide side) {
    FilterReport report;
    for (const auto& item : result.ranked) {
        const bool drop = side == TruncationSide::High ? item.score > config.high_score
                                                       : item.score < config.low_score;
        if (drop)
            report.removed.push_back(
                {item.id, side == TruncationSide::High ? "score_too_high" : "score_too_low"});
        else
            report.kept.push_back(item.id);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Battery
// ---------------------------------------------------------------------------

struct DefenseOutcome {
    ASRTable asr_before;
    ASRTable asr_after;
    double benign_retention = 1.0;
    int removed_total = 0;
};

/// Run each configured defense independently against the poisoned
/// knowledge base and recompute ASR@k. Provenance is used for scoring
/// only; no filter reads it.
inline std::map<DefenseKind, DefenseOutcome> run_defense_battery(
    const Corpus& poisoned_kb, std::span<const ImageTensor> queries, const Encoder& image_encoder,
    const Encoder& text_encoder, const std::vector<DefenseConfig>& configs,
    const std::vector<int>& ks) {
    if (poisoned_kb.empty())
        throw ConfigError("defense: empty knowledge base");

    std::set<std::string> poisoned_ids;
    std::size_t benign_total = 0;
    for (const auto& entry : poisoned_kb) {
        if (entry.provenance == Provenance::Poisoned)
            poisoned_ids.insert(entry.id);
        else
            ++benign_total;
    }

    const RetrievalIndex base_index = build_index(poisoned_kb, image_encoder);
    const ASRTable undefended = asr_at_k(base_index, image_encoder, queries, poisoned_ids, ks);
    const auto by_id = index_by_id(poisoned_kb);

    std::map<DefenseKind, DefenseOutcome> outcomes;
    for (const DefenseConfig& config : configs) {
        DefenseOutcome outcome;
        outcome.asr_before = undefended;

        const bool corpus_level = config.kind == DefenseKind::ImageClustering ||
                                  config.kind == DefenseKind::TextClustering ||
                                  config.kind == DefenseKind::CrossModalConsistency ||
                                  config.kind == DefenseKind::Perplexity;
        if (corpus_level) {
            FilterReport report;
            switch (config.kind) {
                case DefenseKind::ImageClustering:
                    report = image_cluster_filter(poisoned_kb, image_encoder, config);
                    break;
                case DefenseKind::TextClustering:
                    report = text_cluster_filter(poisoned_kb, text_encoder, config);
                    break;
                case DefenseKind::CrossModalConsistency:
                    report = cross_modal_consistency_filter(poisoned_kb, image_encoder, text_encoder,
                                                            config);
                    break;
                default:
                    report = perplexity_filter(poisoned_kb, config);
                    break;
            }
            Corpus kept;
            std::size_t benign_kept = 0;
            std::set<std::string> kept_poisoned;
            for (const auto& id : report.kept) {
                const auto& entry = poisoned_kb[by_id.at(id)];
                kept.push_back(entry);
                if (entry.provenance == Provenance::Poisoned)
                    kept_poisoned.insert(id);
                else
                    ++benign_kept;
            }
            outcome.removed_total = static_cast<int>(report.removed.size());
            outcome.benign_retention = benign_total == 0 ? 1.0
                                                         : static_cast<double>(benign_kept) /
                                                               static_cast<double>(benign_total);
            if (kept.empty()) {
                for (int k : ks) outcome.asr_after.rates[k] = 0.0;
                outcome.asr_after.query_count = static_cast<int>(queries.size());
            } else {
                const RetrievalIndex filtered_index = build_index(kept, image_encoder);
                outcome.asr_after =
                    asr_at_k(filtered_index, image_encoder, queries, kept_poisoned, ks);
            }
        } else {
            // retrieval-time: filter each query's top-k result list, no refill
            outcome.asr_after.query_count = static_cast<int>(queries.size());
            outcome.asr_after.poisoned_count = static_cast<int>(poisoned_ids.size());
            std::size_t benign_retrieved = 0, benign_kept = 0;
            std::map<int, int> hits;
            for (int k : ks) hits[k] = 0;
            const int max_k = *std::max_element(ks.begin(), ks.end());
            for (const auto& query : queries) {
                const Embedding qe = image_encoder.embed_image(query);
                for (int k : ks) {
                    RetrievalResult result = retrieve_embedding(base_index, qe, k);
                    FilterReport report;
                    switch (config.kind) {
                        case DefenseKind::AnomalyDetection:
                            report = anomaly_detect(result, base_index, config);
                            break;
                        case DefenseKind::HighScoreTruncation:
                            report = score_truncation(result, config, TruncationSide::High);
                            break;
                        default:
                            report = score_truncation(result, config, TruncationSide::Low);
                            break;
                    }
                    bool hit = false;
                    for (const auto& id : report.kept)
                        if (poisoned_ids.count(id)) hit = true;
                    if (hit) ++hits[k];
                    if (k == max_k) {
                        for (const auto& item : result.ranked)
                            if (!poisoned_ids.count(item.id)) ++benign_retrieved;
                        for (const auto& id : report.kept)
                            if (!poisoned_ids.count(id)) ++benign_kept;
                        outcome.removed_total += static_cast<int>(report.removed.size());
                    }
                }
            }
            for (int k : ks)
                outcome.asr_after.rates[k] =
                    static_cast<double>(hits[k]) / static_cast<double>(queries.size());
            outcome.benign_retention = benign_retrieved == 0
                                           ? 1.0
                                           : static_cast<double>(benign_kept) /
                                                 static_cast<double>(benign_retrieved);
        }
        outcomes[config.kind] = std::move(outcome);
    }
    return outcomes;
}

} // namespace poisonbench
