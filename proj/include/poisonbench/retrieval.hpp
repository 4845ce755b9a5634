#pragma once

#include <algorithm>
#include <future>
#include <span>
#include <string>
#include <vector>

#include "poisonbench/corpus.hpp"
#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"

namespace poisonbench {

/// Exact brute-force cosine index; immutable after build. Corpora stay
/// small enough at desk scale that approximate search would only add
/// recall noise to the attack measurements.
struct RetrievalIndex {
    std::vector<std::string> ids;   // insertion order
    std::vector<Embedding> rows;    // unit-norm image embeddings, one per id
    EncoderSpec encoder_spec;
};

struct ScoredEntry {
    std::string id;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<ScoredEntry> ranked; // nonincreasing score, ties by ascending id
    int k = 0;
};

inline RetrievalIndex build_index(const Corpus& corpus, const Encoder& encoder) {
    if (corpus.empty())
        throw ConfigError("retrieval: cannot index an empty corpus");
    RetrievalIndex index;
    index.encoder_spec = encoder.spec();
    index.ids.reserve(corpus.size());
    index.rows.reserve(corpus.size());
    for (const auto& entry : corpus) {
        index.ids.push_back(entry.id);
        index.rows.push_back(encoder.embed_image(entry.image));
    }
    return index;
}

inline RetrievalResult retrieve_embedding(const RetrievalIndex& index, const Embedding& query, int k) {
    if (k < 1)
        throw ConfigError("retrieval: k must be at least 1");
    const std::size_t n = index.rows.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i)
        scores[i] = cosine_similarity(index.rows[i], query);

    const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(k), n);
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return index.ids[a] < index.ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(depth), order.end(),
                      better);

    RetrievalResult result;
    result.k = k;
    result.ranked.reserve(depth);
    for (std::size_t i = 0; i < depth; ++i)
        result.ranked.push_back({index.ids[order[i]], scores[order[i]]});
    return result;
}

inline RetrievalResult retrieve(const RetrievalIndex& index, const Encoder& encoder,
                                const ImageTensor& query, int k) {
    return retrieve_embedding(index, encoder.embed_image(query), k);
}

/// Elementwise equal to repeated retrieve; chunks may run on worker
/// threads, results land in fixed slots so output is schedule-independent.
inline std::vector<RetrievalResult> retrieve_batch(const RetrievalIndex& index, const Encoder& encoder,
                                                   std::span<const ImageTensor> queries, int k,
                                                   int n_threads = 1) {
    std::vector<RetrievalResult> results(queries.size());
    if (n_threads <= 1 || queries.size() < 2) {
        for (std::size_t i = 0; i < queries.size(); ++i)
            results[i] = retrieve(index, encoder, queries[i], k);
        return results;
    }
    const std::size_t chunk =
        (queries.size() + static_cast<std::size_t>(n_threads) - 1) / static_cast<std::size_t>(n_threads);
    std::vector<std::future<void>> workers;
    for (std::size_t begin = 0; begin < queries.size(); begin += chunk) {
        const std::size_t end = std::min(queries.size(), begin + chunk);
        workers.push_back(std::async(std::launch::async, [&, begin, end] {
            for (std::size_t i = begin; i < end; ++i)
                results[i] = retrieve(index, encoder, queries[i], k);
        }));
    }
    for (auto& w : workers) w.get();
    return results;
}

} // namespace poisonbench
