#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poisonbench/corpus.hpp"
#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"
#include "poisonbench/profiling.hpp"
#include "poisonbench/rng.hpp"
#include "poisonbench/textpoison.hpp"

namespace poisonbench {

enum class AttackMode { WhiteBox, BlackBox };

inline std::string to_string(AttackMode m) {
    return m == AttackMode::WhiteBox ? "white_box" : "black_box";
}

inline AttackMode attack_mode_from_string(std::string_view s) {
    if (s == "white_box") return AttackMode::WhiteBox;
    if (s == "black_box") return AttackMode::BlackBox;
    throw ConfigError("attack: unknown mode '" + std::string(s) + "'");
}

enum class AblationMode { None, NoHijack, NoInjection };

inline std::string to_string(AblationMode m) {
    switch (m) {
        case AblationMode::None: return "none";
        case AblationMode::NoHijack: return "no_hijack";
        case AblationMode::NoInjection: return "no_injection";
    }
    throw ConfigError("attack: unknown ablation");
}

inline AblationMode ablation_mode_from_string(std::string_view s) {
    if (s == "none") return AblationMode::None;
    if (s == "no_hijack") return AblationMode::NoHijack;
    if (s == "no_injection") return AblationMode::NoInjection;
    throw ConfigError("attack: unknown ablation '" + std::string(s) + "'");
}

struct AttackConfig {
    double epsilon = 16.0 / 255.0;
    double alpha = 1.0 / 255.0;
    int iterations = 500; // N
    int warmup_iters = 10;
    int candidates_per_cluster = 5;
    double sigma = 1e-3;  // ZO probe radius
    int n_directions = 16;
    AttackMode mode = AttackMode::WhiteBox;
    AblationMode ablation = AblationMode::None;
    std::optional<int> budget; // total poisons; default one per cluster
    std::uint64_t seed = 0;
};

inline void validate(const AttackConfig& c) {
    if (c.epsilon < 0.0)
        throw ConfigError("attack: epsilon must be nonnegative");
    // epsilon == 0 degenerates to the identity attack; alpha only has to be
    // inside the ball when the ball has volume.
    if (!(c.alpha > 0.0) || (c.epsilon > 0.0 && c.alpha > c.epsilon))
        throw ConfigError("attack: need 0 < alpha <= epsilon");
    if (c.iterations < 1)
        throw ConfigError("attack: N must be at least 1");
    if (!(c.sigma > 0.0))
        throw ConfigError("attack: sigma must be positive");
    if (c.n_directions < 1)
        throw ConfigError("attack: n_directions must be at least 1");
    if (c.warmup_iters < 0 || c.candidates_per_cluster < 1)
        throw ConfigError("attack: bad warm-up configuration");
    if (c.budget && *c.budget < 1)
        throw ConfigError("attack: budget must be positive");
}

// ---------------------------------------------------------------------------
// Constraint projection
// ---------------------------------------------------------------------------

/// Elementwise clamp into the eps-ball around origin, then into [0,1].
inline void project_linf_inplace(std::span<double> x, std::span<const double> origin, double epsilon) {
    if (x.size() != origin.size())
        throw DimensionError("attack: projection geometry mismatch");
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = std::clamp(std::clamp(x[i], origin[i] - epsilon, origin[i] + epsilon), 0.0, 1.0);
}

inline ImageTensor project_linf(const ImageTensor& x, const ImageTensor& origin, double epsilon) {
    if (!x.same_geometry(origin))
        throw DimensionError("attack: projection geometry mismatch");
    ImageTensor out = x;
    project_linf_inplace(out.data, origin.data, epsilon);
    return out;
}

inline double sign_or_zero(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// ---------------------------------------------------------------------------
// Gradient steps
// ---------------------------------------------------------------------------

inline void pgd_step_whitebox_inplace(const Encoder& enc, std::span<double> x,
                                      std::span<const double> origin, const Embedding& mu,
                                      double alpha, double epsilon) {
    const std::vector<double> grad = enc.grad_cosine_raw(x, mu);
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] += alpha * sign_or_zero(grad[i]);
    project_linf_inplace(x, origin, epsilon);
}

inline ImageTensor pgd_step_whitebox(const Encoder& enc, const ImageTensor& x,
                                     const ImageTensor& origin, const Embedding& mu, double alpha,
                                     double epsilon) {
    if (!x.same_geometry(origin))
        throw DimensionError("attack: step geometry mismatch");
    ImageTensor out = x;
    pgd_step_whitebox_inplace(enc, out.data, origin.data, mu, alpha, epsilon);
    return out;
}

/// Symmetric-difference estimate over explicit probe directions:
///   (1/K) sum_k [(L(x + sigma u_k) - L(x - sigma u_k)) / (2 sigma)] u_k
/// Exact on objectives linear in x.
template <typename Objective>
std::vector<double> zo_estimate(Objective&& objective, std::span<const double> x, double sigma,
                                std::span<const std::vector<double>> directions) {
    if (!(sigma > 0.0))
        throw ConfigError("attack: sigma must be positive");
    std::vector<double> estimate(x.size(), 0.0);
    std::vector<double> probe(x.begin(), x.end());
    for (const auto& u : directions) {
        for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] + sigma * u[i];
        const double up = objective(std::span<const double>(probe));
        for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] - sigma * u[i];
        const double down = objective(std::span<const double>(probe));
        const double coeff = (up - down) / (2.0 * sigma);
        for (std::size_t i = 0; i < x.size(); ++i) estimate[i] += coeff * u[i];
    }
    for (double& v : estimate) v /= static_cast<double>(directions.size());
    return estimate;
}

/// Gaussian-direction ZO gradient of cos(f(x), mu); the encoder is queried
/// as a black box only. A probe that lands on an encoder singularity is
/// retried with a fresh direction, at most three times.
inline std::vector<double> zo_gradient_raw(const Encoder& enc, std::span<const double> x,
                                           const Embedding& mu, double sigma, int n_directions,
                                           Rng& rng) {
    if (!(sigma > 0.0))
        throw ConfigError("attack: sigma must be positive");
    if (n_directions < 1)
        throw ConfigError("attack: n_directions must be at least 1");
    std::normal_distribution<double> normal(0.0, 1.0);
    auto objective = [&](std::span<const double> p) { return cosine_similarity(enc.embed_raw(p), mu); };

    std::vector<double> estimate(x.size(), 0.0);
    std::vector<double> u(x.size());
    std::vector<double> probe(x.size());
    for (int k = 0; k < n_directions; ++k) {
        int attempts = 0;
        while (true) {
            for (double& v : u) v = normal(rng);
            try {
                for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] + sigma * u[i];
                const double up = objective(probe);
                for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] - sigma * u[i];
                const double down = objective(probe);
                const double coeff = (up - down) / (2.0 * sigma);
                for (std::size_t i = 0; i < x.size(); ++i) estimate[i] += coeff * u[i];
                break;
            } catch (const SingularityError&) {
                if (++attempts > 3) throw;
            }
        }
    }
    for (double& v : estimate) v /= static_cast<double>(n_directions);
    return estimate;
}

inline std::vector<double> zo_gradient(const Encoder& enc, const ImageTensor& x, const Embedding& mu,
                                       double sigma, int n_directions, std::uint64_t seed) {
    Rng rng(seed);
    return zo_gradient_raw(enc, x.data, mu, sigma, n_directions, rng);
}

// ---------------------------------------------------------------------------
// Refinement loop
// ---------------------------------------------------------------------------

struct RefineResult {
    ImageTensor image;         // float32-quantized, inside the eps-ball of source
    std::vector<double> trace; // objective after each iteration
};

namespace detail {

/// Quantize to float32 and nudge any pixel the rounding pushed out of the
/// ball back toward the origin, so the constraint also holds for the
/// on-disk representation.
inline void quantize_into_ball(std::vector<double>& x, std::span<const double> origin,
                               double epsilon) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        float q = static_cast<float>(std::clamp(x[i], 0.0, 1.0));
        while (std::abs(static_cast<double>(q) - origin[i]) > epsilon)
            q = std::nextafterf(q, static_cast<float>(origin[i]));
        x[i] = static_cast<double>(q);
    }
}

} // namespace detail

/// N constrained PGD iterations from `source`, ascending cos(f(x), mu).
/// White-box uses the analytic gradient, black-box the ZO estimate with a
/// sequential seeded direction stream.
inline RefineResult pgd_refine(const Encoder& enc, const ImageTensor& source, const Embedding& mu,
                               const AttackConfig& config, int iterations,
                               std::uint64_t stream_seed) {
    RefineResult result;
    result.image = source;
    if (iterations <= 0) return result;

    std::vector<double>& x = result.image.data;
    Rng zo_rng(stream_seed);
    for (int i = 0; i < iterations; ++i) {
        if (config.mode == AttackMode::WhiteBox) {
            pgd_step_whitebox_inplace(enc, x, source.data, mu, config.alpha, config.epsilon);
        } else {
            const std::vector<double> grad =
                zo_gradient_raw(enc, x, mu, config.sigma, config.n_directions, zo_rng);
            for (std::size_t p = 0; p < x.size(); ++p)
                x[p] += config.alpha * sign_or_zero(grad[p]);
            project_linf_inplace(x, source.data, config.epsilon);
        }
        result.trace.push_back(cosine_similarity(enc.embed_raw(x), mu));
    }
    detail::quantize_into_ball(x, source.data, config.epsilon);
    return result;
}

inline RefineResult pgd_refine(const Encoder& enc, const ImageTensor& source, const Embedding& mu,
                               const AttackConfig& config) {
    return pgd_refine(enc, source, mu, config, config.iterations, config.seed);
}

// ---------------------------------------------------------------------------
// Candidate sampling and the full attack
// ---------------------------------------------------------------------------

struct PoisonCandidate {
    std::string source_id;
    int cluster_id = 0;
    double warmup_objective = 0.0;
    bool selected = false;
};

/// Rank the candidate pool against each proxy target, warm up the top
/// slice with a few PGD iterations, and flag the best seed per cluster.
inline std::vector<PoisonCandidate> sample_and_warmup(const Corpus& candidate_pool,
                                                      const std::vector<ClusterProfile>& profiles,
                                                      const Encoder& enc, const AttackConfig& config) {
    if (candidate_pool.empty())
        throw ConfigError("attack: candidate pool is empty");

    std::vector<Embedding> embeddings;
    embeddings.reserve(candidate_pool.size());
    for (const auto& entry : candidate_pool)
        embeddings.push_back(enc.embed_image(entry.image));

    std::vector<PoisonCandidate> all;
    for (const auto& profile : profiles) {
        std::vector<std::size_t> order(candidate_pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double sa = cosine_similarity(embeddings[a], profile.proxy_target);
            const double sb = cosine_similarity(embeddings[b], profile.proxy_target);
            if (sa != sb) return sa > sb;
            return candidate_pool[a].id < candidate_pool[b].id;
        });
        const std::size_t take =
            std::min(order.size(), static_cast<std::size_t>(config.candidates_per_cluster));

        std::vector<PoisonCandidate> cluster_candidates;
        for (std::size_t r = 0; r < take; ++r) {
            const auto& entry = candidate_pool[order[r]];
            PoisonCandidate candidate;
            candidate.source_id = entry.id;
            candidate.cluster_id = profile.cluster_id;
            if (config.warmup_iters > 0) {
                const std::uint64_t warm_seed = derive_seed(
                    derive_seed(config.seed, "warmup", static_cast<std::uint64_t>(profile.cluster_id)),
                    "candidate", static_cast<std::uint64_t>(r));
                const RefineResult warm =
                    pgd_refine(enc, entry.image, profile.proxy_target, config, config.warmup_iters,
                               warm_seed);
                candidate.warmup_objective = warm.trace.back();
            } else {
                candidate.warmup_objective =
                    cosine_similarity(embeddings[order[r]], profile.proxy_target);
            }
            cluster_candidates.push_back(std::move(candidate));
        }
        std::size_t best = 0;
        for (std::size_t r = 1; r < cluster_candidates.size(); ++r) {
            const auto& cur = cluster_candidates[r];
            const auto& top = cluster_candidates[best];
            if (cur.warmup_objective > top.warmup_objective ||
                (cur.warmup_objective == top.warmup_objective && cur.source_id < top.source_id))
                best = r;
        }
        cluster_candidates[best].selected = true;
        all.insert(all.end(), cluster_candidates.begin(), cluster_candidates.end());
    }
    return all;
}

struct TextPoisonConfig {
    PoisonStrategy strategy = PoisonStrategy::Composite;
    Lexicon lexicon = Lexicon::defaults();
};

struct PoisonedEntry {
    KnowledgeEntry entry; // provenance = Poisoned
    std::string source_id;
    int cluster_id = 0;
    AttackMode mode = AttackMode::WhiteBox;
    AblationMode ablation = AblationMode::None;
    double warmup_objective = 0.0;
    double initial_objective = 0.0; // cos(f(source), mu_c)
    double final_objective = 0.0;   // cos(f(emitted image), mu_c)
    std::vector<double> trace;
    bool epsilon_ok = false;
};

namespace detail {

inline bool check_epsilon(const ImageTensor& poisoned, const ImageTensor& source, double epsilon) {
    for (std::size_t i = 0; i < poisoned.data.size(); ++i) {
        if (std::abs(poisoned.data[i] - source.data[i]) > epsilon + 1e-9) return false;
        if (poisoned.data[i] < 0.0 || poisoned.data[i] > 1.0) return false;
    }
    return true;
}

} // namespace detail

/// End-to-end poisoning: per cluster, select a seed from the candidate
/// pool, refine it toward the proxy target, and pair it with a poisoned
/// document. `n_threads > 1` processes clusters concurrently; per-cluster
/// seed streams keep the output schedule-independent.
inline std::vector<PoisonedEntry> run_attack(const Corpus& corpus, const CorpusSplit& split,
                                             const std::vector<ClusterProfile>& profiles,
                                             const Encoder& enc, const AttackConfig& config,
                                             const TextPoisonConfig& text, int n_threads = 1) {
    validate(config);
    if (profiles.empty())
        throw ConfigError("attack: no cluster profiles");
    if (static_cast<int>(enc.spec().embed_dim) != static_cast<int>(profiles[0].proxy_target.size()))
        throw DimensionError("attack: profiles were built with a different embed_dim");

    const auto by_id = index_by_id(corpus);
    Corpus candidates;
    candidates.reserve(split.candidate_pool.size());
    for (const auto& id : split.candidate_pool) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw ConfigError("attack: candidate id '" + id + "' not in corpus");
        candidates.push_back(corpus[it->second]);
    }
    if (candidates.empty())
        throw ConfigError("attack: candidate pool is empty");

    std::vector<Embedding> cand_embeddings;
    cand_embeddings.reserve(candidates.size());
    for (const auto& entry : candidates)
        cand_embeddings.push_back(enc.embed_image(entry.image));

    const int k = static_cast<int>(profiles.size());
    const int budget = config.budget.value_or(k);
    // Round-robin budget distribution across clusters in cluster order.
    std::vector<int> per_cluster(static_cast<std::size_t>(k), budget / k);
    for (int c = 0; c < budget % k; ++c) ++per_cluster[static_cast<std::size_t>(c)];

    std::vector<std::vector<PoisonedEntry>> slots(static_cast<std::size_t>(k));

    auto process_cluster = [&](int ci) {
        const ClusterProfile& profile = profiles[static_cast<std::size_t>(ci)];
        const int count = per_cluster[static_cast<std::size_t>(ci)];
        if (count == 0) return;

        std::vector<std::size_t> order(candidates.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double sa = cosine_similarity(cand_embeddings[a], profile.proxy_target);
            const double sb = cosine_similarity(cand_embeddings[b], profile.proxy_target);
            if (sa != sb) return sa > sb;
            return candidates[a].id < candidates[b].id;
        });

        std::vector<std::size_t> seeds; // candidate indices chosen for this cluster
        std::vector<double> warm_objectives;
        if (config.ablation == AblationMode::NoHijack) {
            // nearest-to-center candidates, no optimization
            for (std::size_t r = 0; r < static_cast<std::size_t>(count) && r < order.size(); ++r) {
                seeds.push_back(order[r]);
                warm_objectives.push_back(
                    cosine_similarity(cand_embeddings[order[r]], profile.proxy_target));
            }
        } else {
            const std::size_t pool = std::min(
                order.size(),
                static_cast<std::size_t>(std::max(config.candidates_per_cluster, count)));
            std::vector<std::pair<double, std::size_t>> warmed; // (objective, candidate index)
            for (std::size_t r = 0; r < pool; ++r) {
                const auto& entry = candidates[order[r]];
                double objective;
                if (config.warmup_iters > 0) {
                    const std::uint64_t warm_seed = derive_seed(
                        derive_seed(config.seed, "warmup", static_cast<std::uint64_t>(ci)),
                        "candidate", static_cast<std::uint64_t>(r));
                    objective = pgd_refine(enc, entry.image, profile.proxy_target, config,
                                           config.warmup_iters, warm_seed)
                                    .trace.back();
                } else {
                    objective = cosine_similarity(cand_embeddings[order[r]], profile.proxy_target);
                }
                warmed.emplace_back(objective, order[r]);
            }
            std::sort(warmed.begin(), warmed.end(), [&](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return candidates[a.second].id < candidates[b.second].id;
            });
            for (std::size_t r = 0; r < static_cast<std::size_t>(count) && r < warmed.size(); ++r) {
                seeds.push_back(warmed[r].second);
                warm_objectives.push_back(warmed[r].first);
            }
        }

        for (std::size_t r = 0; r < seeds.size(); ++r) {
            const KnowledgeEntry& source = candidates[seeds[r]];
            PoisonedEntry poison;
            poison.source_id = source.id;
            poison.cluster_id = profile.cluster_id;
            poison.mode = config.mode;
            poison.ablation = config.ablation;
            poison.warmup_objective = warm_objectives[r];
            poison.initial_objective =
                cosine_similarity(cand_embeddings[seeds[r]], profile.proxy_target);

            KnowledgeEntry entry;
            char id[32];
            std::snprintf(id, sizeof(id), "p_c%02d_%02d", profile.cluster_id, static_cast<int>(r));
            entry.id = id;
            entry.provenance = Provenance::Poisoned;
            entry.source_cluster = profile.cluster_id;

            if (config.ablation == AblationMode::NoHijack) {
                entry.image = source.image;
            } else {
                const std::uint64_t refine_seed = derive_seed(
                    derive_seed(config.seed, "refine", static_cast<std::uint64_t>(ci)), "rank",
                    static_cast<std::uint64_t>(r));
                RefineResult refined = pgd_refine(enc, source.image, profile.proxy_target, config,
                                                  config.iterations, refine_seed);
                poison.trace = std::move(refined.trace);
                entry.image = std::move(refined.image);
            }
            poison.final_objective =
                cosine_similarity(enc.embed_image(entry.image), profile.proxy_target);
            poison.epsilon_ok = detail::check_epsilon(entry.image, source.image, config.epsilon);

            if (config.ablation == AblationMode::NoInjection) {
                entry.document = source.document;
                entry.label = source.label;
            } else {
                const std::uint64_t text_seed = derive_seed(
                    derive_seed(config.seed, "text", static_cast<std::uint64_t>(ci)), "rank",
                    static_cast<std::uint64_t>(r));
                const PoisonedDocument doc =
                    poison_document(source.document, source.label, text.strategy, text.lexicon,
                                    text_seed);
                entry.document = doc.document;
                entry.label = doc.label;
            }
            poison.entry = std::move(entry);
            slots[static_cast<std::size_t>(ci)].push_back(std::move(poison));
        }
    };

    if (n_threads <= 1) {
        for (int ci = 0; ci < k; ++ci) process_cluster(ci);
    } else {
        std::vector<std::future<void>> workers;
        std::atomic<int> cursor{0};
        for (int t = 0; t < n_threads; ++t)
            workers.push_back(std::async(std::launch::async, [&] {
                while (true) {
                    const int ci = cursor.fetch_add(1);
                    if (ci >= k) return;
                    process_cluster(ci);
                }
            }));
        for (auto& w : workers) w.get();
    }

    std::vector<PoisonedEntry> poisons;
    for (auto& slot : slots)
        for (auto& p : slot) poisons.push_back(std::move(p));
    return poisons;
}

} // namespace poisonbench
