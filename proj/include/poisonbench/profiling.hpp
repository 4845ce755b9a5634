#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonbench/corpus.hpp"
#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"
#include "poisonbench/rng.hpp"

namespace poisonbench {

struct KMeansResult {
    std::vector<int> assignments;
    std::vector<Embedding> centroids;
    std::vector<double> inertia_trace; // inertia after each assignment phase
    int iterations = 0;
};

namespace detail {

inline double sq_dist(const Embedding& a, const Embedding& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

} // namespace detail

/// Lloyd iterations with k-means++ seeding on Euclidean distance.
/// Empty clusters are repaired by reassigning the globally farthest point.
inline KMeansResult kmeans(const std::vector<Embedding>& points, int k, std::uint64_t seed,
                           int max_iters = 100, double tolerance = 1e-6) {
    const std::size_t n = points.size();
    if (k < 1 || static_cast<std::size_t>(k) > n)
        throw ConfigError("kmeans: need 1 <= k <= n");

    Rng rng(seed);
    std::vector<Embedding> centroids;
    centroids.reserve(static_cast<std::size_t>(k));

    // k-means++: D^2-weighted seeding, deterministic fallback when all
    // remaining mass is zero (duplicate-heavy inputs).
    std::vector<bool> chosen(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    {
        const std::size_t first = rng() % n;
        centroids.push_back(points[first]);
        chosen[first] = true;
    }
    while (centroids.size() < static_cast<std::size_t>(k)) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], detail::sq_dist(points[i], centroids.back()));
            if (!chosen[i]) total += d2[i];
        }
        std::size_t next = n;
        if (total > 0.0) {
            std::uniform_real_distribution<double> uniform(0.0, total);
            double r = uniform(rng);
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen[i]) continue;
                r -= d2[i];
                if (r <= 0.0) {
                    next = i;
                    break;
                }
            }
        }
        if (next == n)
            for (std::size_t i = 0; i < n; ++i)
                if (!chosen[i]) {
                    next = i;
                    break;
                }
        centroids.push_back(points[next]);
        chosen[next] = true;
    }

    KMeansResult result;
    result.assignments.assign(n, 0);
    const std::size_t uk = static_cast<std::size_t>(k);

    // Assignment ties prefer the point's current cluster (then the lowest
    // centroid index); without stickiness an exact tie between duplicate
    // centroids would undo empty-cluster repair on the next pass.
    auto assign_all = [&]() {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = detail::sq_dist(points[i], centroids[0]);
            for (int c = 1; c < k; ++c) {
                const double d = detail::sq_dist(points[i], centroids[static_cast<std::size_t>(c)]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            const int current = result.assignments[i];
            if (current != best &&
                detail::sq_dist(points[i], centroids[static_cast<std::size_t>(current)]) == best_d)
                best = current;
            result.assignments[i] = best;
            inertia += best_d;
        }
        return inertia;
    };

    for (int iter = 0; iter < max_iters; ++iter) {
        result.inertia_trace.push_back(assign_all());
        result.iterations = iter + 1;

        // update
        const std::size_t dim = points[0].size();
        std::vector<Embedding> next(uk, Embedding(dim, 0.0));
        std::vector<std::size_t> counts(uk, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<std::size_t>(result.assignments[i]);
            for (std::size_t j = 0; j < dim; ++j) next[c][j] += points[i][j];
            ++counts[c];
        }
        for (std::size_t c = 0; c < uk; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t j = 0; j < dim; ++j) next[c][j] /= static_cast<double>(counts[c]);
        }

        // repair empty clusters with the globally farthest point
        for (std::size_t c = 0; c < uk; ++c) {
            if (counts[c] != 0) continue;
            std::size_t farthest = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const auto a = static_cast<std::size_t>(result.assignments[i]);
                if (counts[a] <= 1) continue; // do not empty another cluster
                const double d = detail::sq_dist(points[i], next[a]);
                if (d > far_d) {
                    far_d = d;
                    farthest = i;
                }
            }
            const auto old = static_cast<std::size_t>(result.assignments[farthest]);
            --counts[old];
            result.assignments[farthest] = static_cast<int>(c);
            counts[c] = 1;
            next[c] = points[farthest];
            // recompute the donor centroid without the moved point
            Embedding donor(dim, 0.0);
            std::size_t donor_count = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (static_cast<std::size_t>(result.assignments[i]) == old) {
                    for (std::size_t j = 0; j < dim; ++j) donor[j] += points[i][j];
                    ++donor_count;
                }
            if (donor_count > 0)
                for (std::size_t j = 0; j < dim; ++j) donor[j] /= static_cast<double>(donor_count);
            next[old] = donor;
        }

        double max_shift = 0.0;
        for (std::size_t c = 0; c < uk; ++c)
            max_shift = std::max(max_shift, std::sqrt(detail::sq_dist(next[c], centroids[c])));
        centroids = std::move(next);
        if (max_shift < tolerance) break;
    }

    // final assignment so centroids and labels are mutually consistent
    result.inertia_trace.push_back(assign_all());
    result.centroids = std::move(centroids);
    return result;
}

// ---------------------------------------------------------------------------

/// Cluster-level proxy target: renormalized centroid, nearest prototypes,
/// and their normalized mean embedding.
struct ClusterProfile {
    int cluster_id = 0;
    Embedding center;                        // unit norm
    std::vector<std::string> prototype_ids;  // descending similarity to center
    Embedding proxy_target;                  // unit norm
};

struct ProfilingConfig {
    int clusters = 40;   // K
    int prototypes = 50; // M
    int max_iters = 100;
    double tolerance = 1e-6;
    std::uint64_t seed = 0;
};

struct ProfilingResult {
    std::vector<ClusterProfile> profiles;
    std::vector<std::string> warnings;
};

inline Embedding normalized(Embedding v) {
    double norm_sq = 0.0;
    for (double x : v) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-300)
        throw SingularityError("profiling: cannot normalize zero vector");
    for (double& x : v) x /= norm;
    return v;
}

inline ProfilingResult profile_clusters(const Corpus& reference_pool, const Encoder& encoder,
                                        const ProfilingConfig& config) {
    if (config.clusters < 1 || config.prototypes < 1)
        throw ConfigError("profiling: K and M must be positive");
    if (reference_pool.size() < static_cast<std::size_t>(config.clusters))
        throw ConfigError("profiling: reference pool smaller than K");
    if (reference_pool.size() < static_cast<std::size_t>(config.prototypes))
        throw ConfigError("profiling: reference pool smaller than M");

    std::vector<Embedding> embeddings;
    embeddings.reserve(reference_pool.size());
    for (const auto& entry : reference_pool)
        embeddings.push_back(encoder.embed_image(entry.image));

    // Best-of-8 seeded restarts, lowest final inertia wins (ties keep the
    // earliest restart). Single-init Lloyd lands in poor local minima often
    // enough to distort the proxy targets.
    KMeansResult km;
    double best_inertia = std::numeric_limits<double>::infinity();
    for (int restart = 0; restart < 8; ++restart) {
        KMeansResult candidate =
            kmeans(embeddings, config.clusters, derive_seed(config.seed, "restart",
                                                            static_cast<std::uint64_t>(restart)),
                   config.max_iters, config.tolerance);
        if (candidate.inertia_trace.back() < best_inertia) {
            best_inertia = candidate.inertia_trace.back();
            km = std::move(candidate);
        }
    }

    ProfilingResult result;
    for (int c = 0; c < config.clusters; ++c) {
        ClusterProfile profile;
        profile.cluster_id = c;
        profile.center = normalized(km.centroids[static_cast<std::size_t>(c)]);

        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < embeddings.size(); ++i)
            if (km.assignments[i] == c) members.push_back(i);
        if (members.size() < static_cast<std::size_t>(config.prototypes))
            result.warnings.push_back("cluster " + std::to_string(c) + " has " +
                                      std::to_string(members.size()) + " members, fewer than M=" +
                                      std::to_string(config.prototypes) + "; using all members");

        std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            const double sa = cosine_similarity(embeddings[a], profile.center);
            const double sb = cosine_similarity(embeddings[b], profile.center);
            if (sa != sb) return sa > sb;
            return reference_pool[a].id < reference_pool[b].id;
        });
        const std::size_t m = std::min(members.size(), static_cast<std::size_t>(config.prototypes));

        Embedding mean(profile.center.size(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            profile.prototype_ids.push_back(reference_pool[members[i]].id);
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += embeddings[members[i]][j];
        }
        for (double& v : mean) v /= static_cast<double>(m);
        profile.proxy_target = normalized(std::move(mean));
        result.profiles.push_back(std::move(profile));
    }
    return result;
}

inline nlohmann::json profiles_to_json(const ProfilingResult& result) {
    nlohmann::json j;
    j["clusters"] = nlohmann::json::array();
    for (const auto& p : result.profiles)
        j["clusters"].push_back({{"cluster_id", p.cluster_id},
                                 {"center", p.center},
                                 {"prototype_ids", p.prototype_ids},
                                 {"proxy_target", p.proxy_target}});
    j["warnings"] = result.warnings;
    return j;
}

inline ProfilingResult profiles_from_json(const nlohmann::json& j) {
    ProfilingResult result;
    try {
        for (const auto& p : j.at("clusters")) {
            ClusterProfile profile;
            profile.cluster_id = p.at("cluster_id").get<int>();
            profile.center = p.at("center").get<Embedding>();
            profile.prototype_ids = p.at("prototype_ids").get<std::vector<std::string>>();
            profile.proxy_target = p.at("proxy_target").get<Embedding>();
            result.profiles.push_back(std::move(profile));
        }
        result.warnings = j.value("warnings", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("profiles: ") + e.what());
    }
    return result;
}

} // namespace poisonbench
