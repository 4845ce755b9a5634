#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "poisonbench/evaluation.hpp"

using namespace poisonbench;

namespace {

ExperimentConfig small_experiment() {
    ExperimentConfig config;
    config.corpus.n_clusters = 4;
    config.corpus.entries_per_cluster = 24;
    config.corpus.seed = 5;
    config.embed_dim = 32;
    config.profiling = {4, 4, 100, 1e-6, 0};
    config.attack.iterations = 25;
    config.attack.warmup_iters = 3;
    config.seed = 31337;
    return config;
}

} // namespace

TEST_CASE("asr counts poisoned hits per depth", "[evaluation]") {
    CorpusSpec spec;
    spec.n_clusters = 3;
    spec.entries_per_cluster = 10;
    spec.seed = 88;
    Corpus corpus = generate_corpus(spec);
    const Encoder enc =
        build_encoder({EncoderKind::Linear, spec.height * spec.width * spec.channels, 16, 5});

    SECTION("empty poisoned set gives zero rates") {
        const RetrievalIndex index = build_index(corpus, enc);
        const std::vector<ImageTensor> queries = {corpus[0].image, corpus[5].image};
        const ASRTable table = asr_at_k(index, enc, queries, {}, {1, 3, 5});
        for (const auto& [k, rate] : table.rates) REQUIRE(rate == 0.0);
    }
    SECTION("a poisoned duplicate of the query is an ASR@1 hit") {
        KnowledgeEntry poison = corpus[0];
        poison.id = "p_dup";
        poison.provenance = Provenance::Poisoned;
        corpus.push_back(poison);
        const RetrievalIndex index = build_index(corpus, enc);
        const std::vector<ImageTensor> queries = {corpus[0].image};
        // poison ties the original; lexicographic rule favors "c00..." over "p_dup"
        // so measure at the duplicate itself: rank 2 -> hit at k=2 but also check k=1 via id order
        const ASRTable table = asr_at_k(index, enc, queries, {"p_dup"}, {1, 2});
        REQUIRE(table.rates.at(2) == 1.0);
    }
    SECTION("rates are nondecreasing in k") {
        KnowledgeEntry poison = corpus[3];
        poison.id = "p_x";
        poison.provenance = Provenance::Poisoned;
        corpus.push_back(poison);
        const RetrievalIndex index = build_index(corpus, enc);
        std::vector<ImageTensor> queries;
        for (int i = 0; i < 10; ++i) queries.push_back(corpus[static_cast<std::size_t>(i * 3)].image);
        const ASRTable table = asr_at_k(index, enc, queries, {"p_x"}, {1, 3, 5});
        REQUIRE(table.rates.at(1) <= table.rates.at(3));
        REQUIRE(table.rates.at(3) <= table.rates.at(5));
    }
    SECTION("empty query set is an error") {
        const RetrievalIndex index = build_index(corpus, enc);
        REQUIRE_THROWS_AS(asr_at_k(index, enc, {}, {}, {1}), ConfigError);
    }
}

TEST_CASE("chance normalization follows the clamped rescale", "[evaluation][oracle]") {
    REQUIRE(chance_normalized(0.75, 0.5) == 0.5);
    REQUIRE(chance_normalized(0.5, 0.5) == 0.0);
    REQUIRE(chance_normalized(0.4, 0.5) == 0.0);
    REQUIRE_THROWS_AS(chance_normalized(0.5, 1.0), ConfigError);

    Rng rng(1);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double s = uniform(rng);
        const double s_rand = uniform(rng) * 0.999;
        const double got = chance_normalized(s, s_rand);
        const double direct = std::max(0.0, (s - s_rand) / (1.0 - s_rand));
        REQUIRE(got == direct);
        REQUIRE(got >= 0.0);
        REQUIRE(got <= 1.0);
    }
}

TEST_CASE("the voting generator tallies retrieved labels", "[evaluation]") {
    // identity-weight encoder: embeddings are normalized pixel pairs
    const Encoder enc = Encoder::with_weights({EncoderKind::Linear, 2, 2, 0}, {1.f, 0.f, 0.f, 1.f});
    Corpus corpus;
    auto add = [&](const std::string& id, double a, double b, const std::string& label) {
        KnowledgeEntry e;
        e.id = id;
        e.image = {1, 2, 1, {a, b}};
        e.label = label;
        corpus.push_back(e);
    };
    add("e1", 1.0, 0.02, "A");
    add("e2", 1.0, 0.04, "A");
    add("e3", 1.0, 0.06, "B");
    const RetrievalIndex index = build_index(corpus, enc);
    const auto by_id = index_by_id(corpus);
    const ImageTensor query{1, 2, 1, {1.0, 0.0}};

    SECTION("k = 1 returns the nearest label") {
        REQUIRE(generate_answer(index, corpus, by_id, enc, query, {GeneratorKind::MajorityVote, 1}) ==
                "A");
    }
    SECTION("majority {A, A, B} at k = 3") {
        REQUIRE(generate_answer(index, corpus, by_id, enc, query, {GeneratorKind::MajorityVote, 3}) ==
                "A");
    }
    SECTION("unanimity wins under both weightings") {
        for (auto kind : {GeneratorKind::MajorityVote, GeneratorKind::SimilarityWeightedVote}) {
            Corpus uni = corpus;
            for (auto& e : uni) e.label = "Z";
            const RetrievalIndex uindex = build_index(uni, enc);
            REQUIRE(generate_answer(uindex, uni, index_by_id(uni), enc, query, {kind, 3}) == "Z");
        }
    }
    SECTION("exact vote ties break lexicographically") {
        Corpus pair;
        KnowledgeEntry t;
        t.id = "t1";
        t.image = ImageTensor{1, 2, 1, {1.0, 0.02}};
        t.label = "B";
        pair.push_back(t);
        t.id = "t2";
        t.image = ImageTensor{1, 2, 1, {0.02, 1.0}};
        t.label = "A";
        pair.push_back(t);
        const RetrievalIndex pindex = build_index(pair, enc);
        REQUIRE(generate_answer(pindex, pair, index_by_id(pair), enc, query,
                                {GeneratorKind::MajorityVote, 2}) == "A");
    }
}

TEST_CASE("utility on a near-noiseless corpus is perfect at k = 1", "[evaluation][oracle]") {
    CorpusSpec spec;
    spec.n_clusters = 4;
    spec.entries_per_cluster = 10;
    spec.within_cluster_noise = 1e-4;
    spec.cluster_center_spread = 0.6;
    spec.seed = 9;
    const Corpus corpus = generate_corpus(spec);
    const Encoder enc =
        build_encoder({EncoderKind::Linear, spec.height * spec.width * spec.channels, 32, 2});
    const CorpusSplit split = split_corpus(corpus, {0.5, 0.25, 0.25}, 4);

    Corpus kb;
    std::vector<QueryCase> queries;
    const std::set<std::string> qids(split.query_set.begin(), split.query_set.end());
    for (const auto& e : corpus) {
        if (qids.count(e.id))
            queries.push_back({e.image, e.label});
        else
            kb.push_back(e);
    }
    const RetrievalIndex index = build_index(kb, enc);
    const UtilityReport r = evaluate_utility(index, kb, enc, queries, {GeneratorKind::MajorityVote, 1},
                                             spec.label_vocabulary, Condition::CleanRag);
    REQUIRE(r.s == 1.0);
    REQUIRE(r.s_scaled == 1.0);
}

TEST_CASE("random labels score at chance after normalization", "[evaluation]") {
    CorpusSpec spec;
    spec.n_clusters = 4;
    spec.entries_per_cluster = 30;
    spec.seed = 77;
    spec.label_vocabulary = {"A", "B", "C", "D"};
    Corpus corpus = generate_corpus(spec);
    Rng rng(123);
    for (auto& e : corpus) e.label = spec.label_vocabulary[rng() % 4];

    const Encoder enc =
        build_encoder({EncoderKind::Linear, spec.height * spec.width * spec.channels, 32, 6});
    const CorpusSplit split = split_corpus(corpus, {0.5, 0.25, 0.25}, 4);
    Corpus kb;
    std::vector<QueryCase> queries;
    const std::set<std::string> qids(split.query_set.begin(), split.query_set.end());
    for (const auto& e : corpus) {
        if (qids.count(e.id))
            queries.push_back({e.image, e.label});
        else
            kb.push_back(e);
    }
    const RetrievalIndex index = build_index(kb, enc);
    const UtilityReport r = evaluate_utility(index, kb, enc, queries, {GeneratorKind::MajorityVote, 5},
                                             spec.label_vocabulary, Condition::CleanRag);
    // 30 queries, binomial 3-sigma band around 0.25
    const double sigma = std::sqrt(0.25 * 0.75 / static_cast<double>(queries.size()));
    REQUIRE(r.s <= 0.25 + 3.0 * sigma);
    REQUIRE(r.s_scaled <= (3.0 * sigma) / 0.75 + 1e-12);
}

TEST_CASE("ablation suite produces ordered conditions", "[evaluation]") {
    const auto outcomes = run_ablation_suite(small_experiment());
    REQUIRE(outcomes.size() == 4);
    REQUIRE(outcomes.count(Condition::CleanRag) == 1);
    REQUIRE(outcomes.count(Condition::Attacked) == 1);
    REQUIRE(outcomes.count(Condition::AblationNoHijack) == 1);
    REQUIRE(outcomes.count(Condition::AblationNoInjection) == 1);

    for (const auto& [condition, outcome] : outcomes) {
        double prev = 0.0;
        for (const auto& [k, rate] : outcome.asr.rates) {
            REQUIRE(rate >= prev - 1e-12);
            prev = rate;
        }
    }
    REQUIRE(outcomes.at(Condition::CleanRag).asr.rates.at(5) == 0.0);
    REQUIRE(outcomes.at(Condition::Attacked).asr.rates.at(5) >=
            outcomes.at(Condition::AblationNoHijack).asr.rates.at(5));
}

TEST_CASE("sweeps emit one row per grid point", "[evaluation]") {
    const ExperimentConfig config = small_experiment();
    SECTION("single point grids") {
        const auto rows = run_hyperparameter_sweep(SweepAxis::PoisonRatio, {0.02}, config);
        REQUIRE(rows.size() == 1);
        REQUIRE(rows[0].value == 0.02);
    }
    SECTION("zero epsilon equals the no-hijack ablation") {
        const auto rows = run_hyperparameter_sweep(SweepAxis::Epsilon, {0.0}, config);
        ExperimentConfig ablated = config;
        ablated.attack.ablation = AblationMode::NoHijack;
        const auto outcomes = run_ablation_suite(ablated);
        for (int k : config.ks)
            REQUIRE(rows[0].asr.rates.at(k) ==
                    outcomes.at(Condition::AblationNoHijack).asr.rates.at(k));
    }
    SECTION("empty grid is an error") {
        REQUIRE_THROWS_AS(run_hyperparameter_sweep(SweepAxis::Epsilon, {}, config), ConfigError);
    }
}

TEST_CASE("pca projection is centered and deterministic", "[evaluation]") {
    Rng rng(42);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Embedding> points;
    for (int i = 0; i < 40; ++i) {
        Embedding p(6);
        for (double& v : p) v = normal(rng) + (i < 20 ? 2.0 : -2.0);
        points.push_back(p);
    }
    const Projection2D a = pca_top2(points);
    const Projection2D b = pca_top2(points);
    REQUIRE(a.coords == b.coords); // deterministic

    SECTION("translation invariance") {
        std::vector<Embedding> shifted = points;
        for (auto& p : shifted)
            for (std::size_t j = 0; j < p.size(); ++j) p[j] += 17.5;
        const Projection2D c = pca_top2(shifted);
        for (std::size_t i = 0; i < points.size(); ++i) {
            REQUIRE(c.coords[i][0] == Catch::Approx(a.coords[i][0]).margin(1e-6));
            REQUIRE(c.coords[i][1] == Catch::Approx(a.coords[i][1]).margin(1e-6));
        }
    }
    SECTION("projected variance is bounded by total variance") {
        Embedding mean(6, 0.0);
        for (const auto& p : points)
            for (std::size_t j = 0; j < 6; ++j) mean[j] += p[j] / points.size();
        double total = 0.0;
        for (const auto& p : points)
            for (std::size_t j = 0; j < 6; ++j) total += (p[j] - mean[j]) * (p[j] - mean[j]);
        total /= static_cast<double>(points.size());
        double projected = 0.0;
        for (const auto& c : a.coords) projected += c[0] * c[0] + c[1] * c[1];
        projected /= static_cast<double>(points.size());
        REQUIRE(projected <= total + 1e-9);
    }
    SECTION("too-small input is an error") {
        REQUIRE_THROWS_AS(pca_top2({points[0]}), ConfigError);
    }
}

TEST_CASE("projection export writes the csv contract", "[evaluation]") {
    namespace fs = std::filesystem;
    CorpusSpec spec;
    spec.n_clusters = 2;
    spec.entries_per_cluster = 5;
    spec.seed = 3;
    const Corpus corpus = generate_corpus(spec);
    const Encoder enc =
        build_encoder({EncoderKind::Linear, spec.height * spec.width * spec.channels, 16, 5});
    const fs::path path = fs::temp_directory_path() / "poisonbench_projection.csv";
    export_projection(corpus, enc, path);

    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "id,x,y,provenance,cluster");
    int lines = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    REQUIRE(lines == 10);
    fs::remove(path);
}
