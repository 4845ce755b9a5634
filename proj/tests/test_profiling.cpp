#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "poisonbench/corpus.hpp"
#include "poisonbench/profiling.hpp"

using namespace poisonbench;

namespace {

double partition_inertia(const std::vector<Embedding>& points, unsigned mask) {
    // inertia of the 2-partition encoded by mask bits
    double total = 0.0;
    for (int side = 0; side < 2; ++side) {
        Embedding mean(points[0].size(), 0.0);
        int count = 0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (((mask >> i) & 1u) != static_cast<unsigned>(side)) continue;
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += points[i][j];
            ++count;
        }
        if (count == 0) return std::numeric_limits<double>::infinity();
        for (double& v : mean) v /= count;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (((mask >> i) & 1u) != static_cast<unsigned>(side)) continue;
            for (std::size_t j = 0; j < mean.size(); ++j) {
                const double d = points[i][j] - mean[j];
                total += d * d;
            }
        }
    }
    return total;
}

} // namespace

TEST_CASE("k equal to n gives a zero-inertia partition", "[profiling]") {
    std::vector<Embedding> points = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {2.0, 2.0}};
    const KMeansResult km = kmeans(points, 4, 7);
    REQUIRE(km.inertia_trace.back() == 0.0);
    std::set<int> used(km.assignments.begin(), km.assignments.end());
    REQUIRE(used.size() == 4);
}

TEST_CASE("two separated blobs recover the optimal 2-partition", "[profiling][oracle]") {
    // 10 points in 2-D, blob A near (0,0), blob B near (8,8)
    Rng rng(13);
    std::normal_distribution<double> noise(0.0, 0.3);
    std::vector<Embedding> points;
    for (int i = 0; i < 5; ++i) points.push_back({noise(rng), noise(rng)});
    for (int i = 0; i < 5; ++i) points.push_back({8.0 + noise(rng), 8.0 + noise(rng)});

    // brute-force optimal 2-partition
    unsigned best_mask = 1;
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask < (1u << points.size()) - 1; ++mask) {
        const double inertia = partition_inertia(points, mask);
        if (inertia < best) {
            best = inertia;
            best_mask = mask;
        }
    }
    // the optimum must be the blob split
    REQUIRE(((best_mask & 0x1fu) == 0x1fu || (best_mask & 0x1fu) == 0u));

    const KMeansResult km = kmeans(points, 2, 99);
    REQUIRE(km.inertia_trace.back() == Catch::Approx(best).epsilon(1e-9));
    for (int i = 0; i < 5; ++i) REQUIRE(km.assignments[static_cast<std::size_t>(i)] == km.assignments[0]);
    for (int i = 5; i < 10; ++i) REQUIRE(km.assignments[static_cast<std::size_t>(i)] == km.assignments[5]);
    REQUIRE(km.assignments[0] != km.assignments[5]);
}

TEST_CASE("kmeans is deterministic and monotone in inertia", "[profiling]") {
    Rng rng(4);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Embedding> points;
    for (int i = 0; i < 60; ++i) {
        Embedding p(6);
        for (double& v : p) v = normal(rng);
        points.push_back(p);
    }
    const KMeansResult a = kmeans(points, 5, 21);
    const KMeansResult b = kmeans(points, 5, 21);
    REQUIRE(a.assignments == b.assignments);

    for (std::size_t i = 1; i < a.inertia_trace.size(); ++i)
        REQUIRE(a.inertia_trace[i] <= a.inertia_trace[i - 1] + 1e-12);
}

TEST_CASE("no cluster is left empty, even with heavy duplicates", "[profiling]") {
    std::vector<Embedding> points;
    for (int i = 0; i < 8; ++i) points.push_back({1.0, 1.0});
    points.push_back({5.0, 5.0});
    points.push_back({5.0, 5.0});
    const KMeansResult km = kmeans(points, 4, 3);
    std::set<int> used(km.assignments.begin(), km.assignments.end());
    REQUIRE(used.size() == 4);

    REQUIRE_THROWS_AS(kmeans(points, 11, 3), ConfigError);
}

namespace {

struct ProfilingFixture {
    CorpusSpec spec;
    Corpus corpus;
    Encoder encoder;

    ProfilingFixture() {
        spec.n_clusters = 4;
        spec.entries_per_cluster = 20;
        spec.seed = 17;
        corpus = generate_corpus(spec);
        encoder = build_encoder(
            {EncoderKind::Linear, spec.height * spec.width * spec.channels, 32, 41});
    }
};

} // namespace

TEST_CASE("proxy target is the normalized prototype mean", "[profiling]") {
    const ProfilingFixture f;

    SECTION("M = 1 collapses to the nearest prototype") {
        const ProfilingResult r = profile_clusters(f.corpus, f.encoder, {4, 1, 100, 1e-6, 5});
        for (const auto& p : r.profiles) {
            REQUIRE(p.prototype_ids.size() == 1);
            const auto by_id = index_by_id(f.corpus);
            const Embedding proto =
                f.encoder.embed_image(f.corpus[by_id.at(p.prototype_ids[0])].image);
            for (std::size_t j = 0; j < proto.size(); ++j)
                REQUIRE(p.proxy_target[j] == Catch::Approx(proto[j]).margin(1e-12));
        }
    }

    SECTION("proxy target reconstructs from prototype embeddings") {
        const ProfilingResult r = profile_clusters(f.corpus, f.encoder, {4, 6, 100, 1e-6, 5});
        const auto by_id = index_by_id(f.corpus);
        for (const auto& p : r.profiles) {
            REQUIRE(p.prototype_ids.size() == 6);
            Embedding mean(32, 0.0);
            for (const auto& id : p.prototype_ids) {
                const Embedding e = f.encoder.embed_image(f.corpus[by_id.at(id)].image);
                for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += e[j];
            }
            const Embedding expected = normalized(std::move(mean));
            double norm = 0.0;
            for (std::size_t j = 0; j < expected.size(); ++j) {
                REQUIRE(p.proxy_target[j] == Catch::Approx(expected[j]).margin(1e-9));
                norm += p.proxy_target[j] * p.proxy_target[j];
            }
            REQUIRE(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-9));
        }
    }

    SECTION("prototypes are sorted by similarity to the center") {
        const ProfilingResult r = profile_clusters(f.corpus, f.encoder, {4, 6, 100, 1e-6, 5});
        const auto by_id = index_by_id(f.corpus);
        for (const auto& p : r.profiles) {
            double prev = 2.0;
            for (const auto& id : p.prototype_ids) {
                const double sim = cosine_similarity(
                    f.encoder.embed_image(f.corpus[by_id.at(id)].image), p.center);
                REQUIRE(sim <= prev + 1e-12);
                prev = sim;
            }
        }
    }
}

TEST_CASE("identical members collapse the proxy to their embedding", "[profiling]") {
    const ProfilingFixture f;
    Corpus uniform;
    for (int i = 0; i < 8; ++i) {
        KnowledgeEntry e = f.corpus[0];
        e.id = "u" + std::to_string(i);
        uniform.push_back(e);
    }
    const ProfilingResult r = profile_clusters(uniform, f.encoder, {1, 4, 50, 1e-9, 2});
    const Embedding expected = f.encoder.embed_image(f.corpus[0].image);
    for (std::size_t j = 0; j < expected.size(); ++j)
        REQUIRE(r.profiles[0].proxy_target[j] == Catch::Approx(expected[j]).margin(1e-9));
}

TEST_CASE("proxy targets stay closest to their own generated cluster", "[profiling][oracle]") {
    const ProfilingFixture f;
    const ProfilingResult r = profile_clusters(f.corpus, f.encoder, {4, 5, 100, 1e-6, 5});

    // map each profile to the generated cluster by prototype majority
    const auto by_id = index_by_id(f.corpus);
    for (const auto& p : r.profiles) {
        std::map<int, int> votes;
        for (const auto& id : p.prototype_ids)
            ++votes[*f.corpus[by_id.at(id)].source_cluster];
        const int own =
            std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
                return a.second < b.second;
            })->first;

        std::map<int, std::pair<double, int>> sums;
        for (const auto& entry : f.corpus) {
            const double sim = cosine_similarity(f.encoder.embed_image(entry.image), p.proxy_target);
            auto& [sum, count] = sums[*entry.source_cluster];
            sum += sim;
            ++count;
        }
        const double own_mean = sums[own].first / sums[own].second;
        for (const auto& [cluster, sum_count] : sums) {
            if (cluster == own) continue;
            REQUIRE(own_mean > sum_count.first / sum_count.second);
        }
    }
}

TEST_CASE("undersized clusters fall back to all members with a warning", "[profiling]") {
    const ProfilingFixture f;
    // M larger than any single cluster (20 members each, M = 25 <= pool size 80)
    const ProfilingResult r = profile_clusters(f.corpus, f.encoder, {4, 25, 100, 1e-6, 5});
    REQUIRE_FALSE(r.warnings.empty());
    for (const auto& p : r.profiles) REQUIRE(p.prototype_ids.size() <= 25);

    REQUIRE_THROWS_AS(profile_clusters(f.corpus, f.encoder, {100, 5, 100, 1e-6, 5}), ConfigError);
    REQUIRE_THROWS_AS(profile_clusters(f.corpus, f.encoder, {4, 100, 100, 1e-6, 5}), ConfigError);
}

TEST_CASE("profiles serialize to json and back", "[profiling]") {
    const ProfilingFixture f;
    const ProfilingResult r = profile_clusters(f.corpus, f.encoder, {4, 5, 100, 1e-6, 5});
    const ProfilingResult back = profiles_from_json(profiles_to_json(r));
    REQUIRE(back.profiles.size() == r.profiles.size());
    for (std::size_t i = 0; i < r.profiles.size(); ++i) {
        REQUIRE(back.profiles[i].cluster_id == r.profiles[i].cluster_id);
        REQUIRE(back.profiles[i].prototype_ids == r.profiles[i].prototype_ids);
        REQUIRE(back.profiles[i].proxy_target == r.profiles[i].proxy_target);
        REQUIRE(back.profiles[i].center == r.profiles[i].center);
    }
}
