#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonbench/attack.hpp"
#include "poisonbench/corpus.hpp"
#include "poisonbench/defense.hpp"
#include "poisonbench/embedding.hpp"
#include "poisonbench/errors.hpp"
#include "poisonbench/evaluation.hpp"
#include "poisonbench/profiling.hpp"
#include "poisonbench/retrieval.hpp"
#include "poisonbench/textpoison.hpp"

namespace poisonbench::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration file handling
// ---------------------------------------------------------------------------

struct DefenseSettings {
    int clusters = 16;
    double high_similarity = 0.999;
    int sparsity_floor = 2;
    double consistency_percentile = 5.0;
    double perplexity_percentile = 95.0;
    double anomaly_threshold = 2.0;
    double high_score = 0.9999;
    double low_score = 0.2;
};

struct PipelineConfig {
    ExperimentConfig experiment;
    DefenseSettings defense;
    std::map<SweepAxis, std::vector<double>> sweeps;
    std::optional<std::string> lexicon_path;
    json resolved; // defaults + file + flag overrides, emitted next to outputs

    std::vector<DefenseConfig> defense_configs() const {
        std::vector<DefenseConfig> configs;
        for (DefenseKind kind : all_defense_kinds()) {
            DefenseConfig c;
            c.kind = kind;
            c.clusters = defense.clusters;
            c.high_similarity = defense.high_similarity;
            c.sparsity_floor = defense.sparsity_floor;
            c.consistency_percentile = defense.consistency_percentile;
            c.perplexity_percentile = defense.perplexity_percentile;
            c.anomaly_threshold = defense.anomaly_threshold;
            c.high_score = defense.high_score;
            c.low_score = defense.low_score;
            c.seed = derive_seed(experiment.seed, "defense");
            configs.push_back(c);
        }
        return configs;
    }
};

inline json default_config_json() {
    return json{
        {"seed", 888},
        {"n_threads", 1},
        {"corpus",
         {{"n_clusters", 10},
          {"entries_per_cluster", 100},
          {"height", 16},
          {"width", 16},
          {"channels", 1},
          {"cluster_center_spread", 0.26},
          {"within_cluster_noise", 0.21},
          {"label_vocabulary", CorpusSpec{}.label_vocabulary}}},
        {"split", {{"reference", 0.5}, {"candidate", 0.25}, {"query", 0.25}}},
        {"image_encoder", {{"kind", "linear"}, {"embed_dim", 64}}},
        {"text_encoder", {{"buckets", 4096}}},
        {"profiling",
         {{"clusters", 10}, {"prototypes", 10}, {"max_iters", 100}, {"tolerance", 1e-6}}},
        {"attack",
         {{"epsilon", 16.0 / 255.0},
          {"alpha", 1.0 / 255.0},
          {"iterations", 100},
          {"warmup_iters", 10},
          {"candidates_per_cluster", 5},
          {"sigma", 1e-3},
          {"n_directions", 16},
          {"mode", "white_box"},
          {"ablation", "none"},
          {"budget", nullptr}}},
        {"textpoison", {{"strategy", "composite"}, {"lexicon", nullptr}}},
        {"defense",
         {{"clusters", 16},
          {"high_similarity", 0.999},
          {"sparsity_floor", 2},
          {"consistency_percentile", 5.0},
          {"perplexity_percentile", 95.0},
          {"anomaly_threshold", 2.0},
          {"high_score", 0.9999},
          {"low_score", 0.2}}},
        {"evaluation",
         {{"ks", {1, 3, 5}}, {"generator", "majority_vote"}, {"generator_k", 5}, {"filtered_k", 1}}},
        {"sweep",
         {{"poison_ratio", {0.002, 0.005, 0.01, 0.02, 0.04}},
          {"epsilon", {2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0}},
          {"n_clusters", {5, 10, 20}}}},
    };
}

namespace detail {

inline void deep_merge(json& base, const json& overlay) {
    if (!overlay.is_object() || !base.is_object()) {
        base = overlay;
        return;
    }
    for (const auto& [key, value] : overlay.items()) {
        if (base.contains(key) && base[key].is_object() && value.is_object())
            deep_merge(base[key], value);
        else
            base[key] = value;
    }
}

inline void check_keys(const json& j, const std::string& section,
                       const std::set<std::string>& allowed) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + (section.empty() ? key : section + "." + key) +
                              "'");
}

template <typename T>
T field(const json& j, const std::string& section, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: invalid value for '" + section + "." + key + "'");
    }
}

} // namespace detail

/// Strictly validate and materialize a merged config document.
inline PipelineConfig parse_config(const json& merged) {
    using detail::check_keys;
    using detail::field;
    PipelineConfig cfg;
    cfg.resolved = merged;

    check_keys(merged, "",
               {"seed", "n_threads", "corpus", "split", "image_encoder", "text_encoder", "profiling",
                "attack", "textpoison", "defense", "evaluation", "sweep"});

    cfg.experiment.seed = field<std::uint64_t>(merged, "", "seed");
    cfg.experiment.n_threads = field<int>(merged, "", "n_threads");

    const json& corpus = merged.at("corpus");
    check_keys(corpus, "corpus",
               {"n_clusters", "entries_per_cluster", "height", "width", "channels",
                "cluster_center_spread", "within_cluster_noise", "label_vocabulary"});
    cfg.experiment.corpus.n_clusters = field<int>(corpus, "corpus", "n_clusters");
    cfg.experiment.corpus.entries_per_cluster = field<int>(corpus, "corpus", "entries_per_cluster");
    cfg.experiment.corpus.height = field<int>(corpus, "corpus", "height");
    cfg.experiment.corpus.width = field<int>(corpus, "corpus", "width");
    cfg.experiment.corpus.channels = field<int>(corpus, "corpus", "channels");
    cfg.experiment.corpus.cluster_center_spread =
        field<double>(corpus, "corpus", "cluster_center_spread");
    cfg.experiment.corpus.within_cluster_noise =
        field<double>(corpus, "corpus", "within_cluster_noise");
    cfg.experiment.corpus.label_vocabulary =
        field<std::vector<std::string>>(corpus, "corpus", "label_vocabulary");

    const json& split = merged.at("split");
    check_keys(split, "split", {"reference", "candidate", "query"});
    cfg.experiment.fractions.reference = field<double>(split, "split", "reference");
    cfg.experiment.fractions.candidate = field<double>(split, "split", "candidate");
    cfg.experiment.fractions.query = field<double>(split, "split", "query");

    const json& image_encoder = merged.at("image_encoder");
    check_keys(image_encoder, "image_encoder", {"kind", "embed_dim"});
    cfg.experiment.image_encoder_kind =
        encoder_kind_from_string(field<std::string>(image_encoder, "image_encoder", "kind"));
    if (cfg.experiment.image_encoder_kind == EncoderKind::HashedBowText)
        throw ConfigError("config: invalid value for 'image_encoder.kind'");
    cfg.experiment.embed_dim = field<int>(image_encoder, "image_encoder", "embed_dim");

    const json& text_encoder = merged.at("text_encoder");
    check_keys(text_encoder, "text_encoder", {"buckets"});
    cfg.experiment.text_buckets = field<int>(text_encoder, "text_encoder", "buckets");

    const json& profiling = merged.at("profiling");
    check_keys(profiling, "profiling", {"clusters", "prototypes", "max_iters", "tolerance"});
    cfg.experiment.profiling.clusters = field<int>(profiling, "profiling", "clusters");
    cfg.experiment.profiling.prototypes = field<int>(profiling, "profiling", "prototypes");
    cfg.experiment.profiling.max_iters = field<int>(profiling, "profiling", "max_iters");
    cfg.experiment.profiling.tolerance = field<double>(profiling, "profiling", "tolerance");

    const json& attack = merged.at("attack");
    check_keys(attack, "attack",
               {"epsilon", "alpha", "iterations", "warmup_iters", "candidates_per_cluster", "sigma",
                "n_directions", "mode", "ablation", "budget"});
    cfg.experiment.attack.epsilon = field<double>(attack, "attack", "epsilon");
    cfg.experiment.attack.alpha = field<double>(attack, "attack", "alpha");
    cfg.experiment.attack.iterations = field<int>(attack, "attack", "iterations");
    cfg.experiment.attack.warmup_iters = field<int>(attack, "attack", "warmup_iters");
    cfg.experiment.attack.candidates_per_cluster =
        field<int>(attack, "attack", "candidates_per_cluster");
    cfg.experiment.attack.sigma = field<double>(attack, "attack", "sigma");
    cfg.experiment.attack.n_directions = field<int>(attack, "attack", "n_directions");
    cfg.experiment.attack.mode =
        attack_mode_from_string(field<std::string>(attack, "attack", "mode"));
    cfg.experiment.attack.ablation =
        ablation_mode_from_string(field<std::string>(attack, "attack", "ablation"));
    if (!attack.at("budget").is_null())
        cfg.experiment.attack.budget = field<int>(attack, "attack", "budget");

    const json& textpoison = merged.at("textpoison");
    check_keys(textpoison, "textpoison", {"strategy", "lexicon"});
    cfg.experiment.text.strategy =
        poison_strategy_from_string(field<std::string>(textpoison, "textpoison", "strategy"));
    if (!textpoison.at("lexicon").is_null()) {
        cfg.lexicon_path = field<std::string>(textpoison, "textpoison", "lexicon");
        try {
            cfg.experiment.text.lexicon = Lexicon::load(*cfg.lexicon_path);
        } catch (const ParseError& e) {
            throw ConfigError(e.what()); // a broken lexicon is a config problem
        }
    }

    const json& defense = merged.at("defense");
    check_keys(defense, "defense",
               {"clusters", "high_similarity", "sparsity_floor", "consistency_percentile",
                "perplexity_percentile", "anomaly_threshold", "high_score", "low_score"});
    cfg.defense.clusters = field<int>(defense, "defense", "clusters");
    cfg.defense.high_similarity = field<double>(defense, "defense", "high_similarity");
    cfg.defense.sparsity_floor = field<int>(defense, "defense", "sparsity_floor");
    cfg.defense.consistency_percentile = field<double>(defense, "defense", "consistency_percentile");
    cfg.defense.perplexity_percentile = field<double>(defense, "defense", "perplexity_percentile");
    cfg.defense.anomaly_threshold = field<double>(defense, "defense", "anomaly_threshold");
    cfg.defense.high_score = field<double>(defense, "defense", "high_score");
    cfg.defense.low_score = field<double>(defense, "defense", "low_score");

    const json& evaluation = merged.at("evaluation");
    check_keys(evaluation, "evaluation", {"ks", "generator", "generator_k", "filtered_k"});
    cfg.experiment.ks = field<std::vector<int>>(evaluation, "evaluation", "ks");
    cfg.experiment.generator.kind =
        generator_kind_from_string(field<std::string>(evaluation, "evaluation", "generator"));
    cfg.experiment.generator.k = field<int>(evaluation, "evaluation", "generator_k");

    const json& sweep = merged.at("sweep");
    check_keys(sweep, "sweep", {"poison_ratio", "epsilon", "n_clusters"});
    cfg.sweeps[SweepAxis::PoisonRatio] = field<std::vector<double>>(sweep, "sweep", "poison_ratio");
    cfg.sweeps[SweepAxis::Epsilon] = field<std::vector<double>>(sweep, "sweep", "epsilon");
    cfg.sweeps[SweepAxis::NClusters] = field<std::vector<double>>(sweep, "sweep", "n_clusters");

    cfg.experiment.resolve_seeds();
    return cfg;
}

/// Apply one `--section.key value` style override onto the config document.
inline void apply_override(json& config, const std::string& dotted_path, const std::string& value) {
    json* node = &config;
    std::size_t begin = 0;
    std::vector<std::string> parts;
    while (begin <= dotted_path.size()) {
        const std::size_t dot = dotted_path.find('.', begin);
        if (dot == std::string::npos) {
            parts.push_back(dotted_path.substr(begin));
            break;
        }
        parts.push_back(dotted_path.substr(begin, dot - begin));
        begin = dot + 1;
    }
    if (parts.empty() || parts.front().empty())
        throw ConfigError("config: bad override path '" + dotted_path + "'");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i]))
            throw ConfigError("config: unknown key '" + dotted_path + "'");
        node = &(*node)[parts[i]];
    }
    json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
    if (parsed.is_discarded()) parsed = value; // plain strings stay strings
    (*node)[parts.back()] = parsed;
}

inline PipelineConfig load_config(const std::optional<fs::path>& path,
                                  const std::vector<std::pair<std::string, std::string>>& overrides) {
    json merged = default_config_json();
    if (path) {
        std::ifstream in(*path);
        if (!in)
            throw ConfigError("config: cannot open " + path->string());
        json user;
        try {
            in >> user;
        } catch (const json::exception& e) {
            throw ConfigError("config: invalid JSON in " + path->string() + ": " + e.what());
        }
        detail::deep_merge(merged, user);
    }
    for (const auto& [key, value] : overrides) apply_override(merged, key, value);
    return parse_config(merged);
}

// ---------------------------------------------------------------------------
// Artifact i/o
// ---------------------------------------------------------------------------

namespace artifact {

inline fs::path corpus_dir(const fs::path& out) { return out / "corpus"; }
inline fs::path split_file(const fs::path& out) { return out / "split.json"; }
inline fs::path encoders_dir(const fs::path& out) { return out / "encoders"; }
inline fs::path profiles_file(const fs::path& out) { return out / "profiles.json"; }
inline fs::path poisons_dir(const fs::path& out) { return out / "poisons"; }
inline fs::path poisoned_dir(const fs::path& out) { return out / "poisoned"; }

inline void require(const fs::path& path, const std::string& stage, const std::string& producer) {
    if (!fs::exists(path))
        throw MissingArtifactError(stage + ": missing artifact " + path.string() + "; run the " +
                                   producer + " command first");
}

} // namespace artifact

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out)
        throw FormatError("pipeline: cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw MissingArtifactError("pipeline: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("pipeline: invalid JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

inline void write_resolved_config(const PipelineConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    write_json_file(out / "resolved_config.json", cfg.resolved);
}

inline void save_poisons(const std::vector<PoisonedEntry>& poisons, const fs::path& dir) {
    fs::create_directories(dir / "images");
    std::ofstream manifest(dir / "poison_manifest.jsonl");
    if (!manifest)
        throw FormatError("attack: cannot write poison manifest in " + dir.string());
    for (const auto& p : poisons) {
        const std::string rel = "images/" + p.entry.id + ".bin";
        save_image(dir / rel, p.entry.image);
        const json line = {{"id", p.entry.id},
                           {"source_id", p.source_id},
                           {"cluster_id", p.cluster_id},
                           {"mode", to_string(p.mode)},
                           {"ablation", to_string(p.ablation)},
                           {"warmup_objective", p.warmup_objective},
                           {"initial_objective", p.initial_objective},
                           {"final_objective", p.final_objective},
                           {"epsilon_ok", p.epsilon_ok},
                           {"image", rel},
                           {"height", p.entry.image.height},
                           {"width", p.entry.image.width},
                           {"channels", p.entry.image.channels},
                           {"document", p.entry.document},
                           {"label", p.entry.label},
                           {"trace", p.trace}};
        manifest << line.dump() << '\n';
    }
}

inline std::vector<PoisonedEntry> load_poisons(const fs::path& dir) {
    std::ifstream manifest(dir / "poison_manifest.jsonl");
    if (!manifest)
        throw MissingArtifactError("pipeline: no poison manifest in " + dir.string());
    std::vector<PoisonedEntry> poisons;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("poisons: manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            PoisonedEntry p;
            p.entry.id = j.at("id").get<std::string>();
            p.source_id = j.at("source_id").get<std::string>();
            p.cluster_id = j.at("cluster_id").get<int>();
            p.mode = attack_mode_from_string(j.at("mode").get<std::string>());
            p.ablation = ablation_mode_from_string(j.at("ablation").get<std::string>());
            p.warmup_objective = j.at("warmup_objective").get<double>();
            p.initial_objective = j.at("initial_objective").get<double>();
            p.final_objective = j.at("final_objective").get<double>();
            p.epsilon_ok = j.at("epsilon_ok").get<bool>();
            p.trace = j.at("trace").get<std::vector<double>>();
            p.entry.document = j.at("document").get<std::string>();
            p.entry.label = j.at("label").get<std::string>();
            p.entry.provenance = Provenance::Poisoned;
            p.entry.source_cluster = p.cluster_id;
            p.entry.image = load_image(dir / j.at("image").get<std::string>(), j.at("height").get<int>(),
                                       j.at("width").get<int>(), j.at("channels").get<int>());
            poisons.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw ParseError("poisons: manifest line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return poisons;
}

// ---------------------------------------------------------------------------
// CSV helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace detail

inline void write_asr_csv(const fs::path& path, const ASRTable& table) {
    std::ofstream out(path);
    out << "k,rate,query_count,poisoned_count\n";
    for (const auto& [k, rate] : table.rates)
        out << k << ',' << detail::fmt(rate) << ',' << table.query_count << ','
            << table.poisoned_count << '\n';
}

inline void write_utility_csv(const fs::path& path, const std::vector<UtilityReport>& reports) {
    std::ofstream out(path);
    out << "condition,s,s_rand,s_scaled\n";
    for (const auto& r : reports)
        out << to_string(r.condition) << ',' << detail::fmt(r.s) << ',' << detail::fmt(r.s_rand)
            << ',' << detail::fmt(r.s_scaled) << '\n';
}

inline json asr_to_json(const ASRTable& table) {
    json rates = json::object();
    for (const auto& [k, rate] : table.rates) rates[std::to_string(k)] = rate;
    return {{"rates", rates},
            {"query_count", table.query_count},
            {"poisoned_count", table.poisoned_count}};
}

inline json utility_to_json(const UtilityReport& r) {
    return {{"condition", to_string(r.condition)},
            {"s", r.s},
            {"s_rand", r.s_rand},
            {"s_scaled", r.s_scaled}};
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct StageResult {
    std::string summary;
    json report = json::object();
};

inline StageResult cmd_gen_corpus(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const ExperimentConfig& exp = cfg.experiment;
    const ExperimentContext ctx = prepare_corpus_context(exp);
    save_corpus(ctx.corpus, artifact::corpus_dir(out));
    write_json_file(artifact::split_file(out), ctx.split.to_json());

    fs::create_directories(artifact::encoders_dir(out));
    ctx.image_encoder.save_weights(artifact::encoders_dir(out) / "image_encoder.bin");
    ctx.text_encoder.save_weights(artifact::encoders_dir(out) / "text_encoder.bin");

    StageResult result;
    result.summary = "gen-corpus: " + std::to_string(ctx.corpus.size()) + " entries in " +
                     std::to_string(exp.corpus.n_clusters) + " clusters (margin " +
                     detail::fmt(ctx.margin) + ") -> " + artifact::corpus_dir(out).string();
    result.report = {{"entries", ctx.corpus.size()},
                     {"clusters", exp.corpus.n_clusters},
                     {"separability_margin", ctx.margin},
                     {"corpus_regenerations", ctx.corpus_regenerations},
                     {"reference_pool", ctx.split.reference_pool.size()},
                     {"candidate_pool", ctx.split.candidate_pool.size()},
                     {"query_set", ctx.split.query_set.size()}};
    return result;
}

namespace detail {

struct LoadedExperiment {
    Corpus corpus;
    CorpusSplit split;
    Encoder image_encoder;
    Encoder text_encoder;
    Corpus knowledge_base;
    std::vector<QueryCase> queries;
};

inline LoadedExperiment load_experiment(const PipelineConfig& cfg, const fs::path& out,
                                        const std::string& stage) {
    artifact::require(artifact::corpus_dir(out) / "corpus.jsonl", stage, "gen-corpus");
    artifact::require(artifact::split_file(out), stage, "gen-corpus");
    LoadedExperiment loaded{.corpus = load_corpus(artifact::corpus_dir(out)),
                            .split = CorpusSplit::from_json(read_json_file(artifact::split_file(out))),
                            .image_encoder = Encoder::build(cfg.experiment.image_encoder_spec()),
                            .text_encoder = Encoder::build(cfg.experiment.text_encoder_spec()),
                            .knowledge_base = {},
                            .queries = {}};
    const std::set<std::string> query_ids(loaded.split.query_set.begin(),
                                          loaded.split.query_set.end());
    for (const auto& entry : loaded.corpus) {
        if (query_ids.count(entry.id))
            loaded.queries.push_back({entry.image, entry.label});
        else
            loaded.knowledge_base.push_back(entry);
    }
    return loaded;
}

} // namespace detail

inline StageResult cmd_profile(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const auto loaded = detail::load_experiment(cfg, out, "profile");
    const std::set<std::string> reference_ids(loaded.split.reference_pool.begin(),
                                              loaded.split.reference_pool.end());
    Corpus reference;
    for (const auto& entry : loaded.corpus)
        if (reference_ids.count(entry.id)) reference.push_back(entry);
    const ProfilingResult profiling =
        profile_clusters(reference, loaded.image_encoder, cfg.experiment.profiling);
    write_json_file(artifact::profiles_file(out), profiles_to_json(profiling));

    StageResult result;
    result.summary = "profile: " + std::to_string(profiling.profiles.size()) + " cluster profiles (" +
                     std::to_string(profiling.warnings.size()) + " warnings) -> " +
                     artifact::profiles_file(out).string();
    result.report = {{"clusters", profiling.profiles.size()}, {"warnings", profiling.warnings}};
    return result;
}

inline StageResult cmd_attack(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const auto loaded = detail::load_experiment(cfg, out, "attack");
    artifact::require(artifact::profiles_file(out), "attack", "profile");
    const ProfilingResult profiling = profiles_from_json(read_json_file(artifact::profiles_file(out)));

    const std::vector<PoisonedEntry> poisons =
        run_attack(loaded.corpus, loaded.split, profiling.profiles, loaded.image_encoder,
                   cfg.experiment.attack, cfg.experiment.text, cfg.experiment.n_threads);
    save_poisons(poisons, artifact::poisons_dir(out));

    int epsilon_violations = 0;
    double mean_gain = 0.0;
    for (const auto& p : poisons) {
        if (!p.epsilon_ok) ++epsilon_violations;
        mean_gain += p.final_objective - p.initial_objective;
    }
    if (!poisons.empty()) mean_gain /= static_cast<double>(poisons.size());

    StageResult result;
    result.summary = "attack: " + std::to_string(poisons.size()) + " poisoned entries (" +
                     to_string(cfg.experiment.attack.mode) +
                     ", mean objective gain " + detail::fmt(mean_gain) + ") -> " +
                     artifact::poisons_dir(out).string();
    result.report = {{"poisons", poisons.size()},
                     {"mode", to_string(cfg.experiment.attack.mode)},
                     {"ablation", to_string(cfg.experiment.attack.ablation)},
                     {"mean_objective_gain", mean_gain},
                     {"epsilon_violations", epsilon_violations}};
    return result;
}

inline StageResult cmd_inject(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const auto loaded = detail::load_experiment(cfg, out, "inject");
    artifact::require(artifact::poisons_dir(out) / "poison_manifest.jsonl", "inject", "attack");
    const std::vector<PoisonedEntry> poisons = load_poisons(artifact::poisons_dir(out));
    const Corpus poisoned = inject_poisons(loaded.knowledge_base, poisons);
    save_corpus(poisoned, artifact::poisoned_dir(out));

    StageResult result;
    const double rate = static_cast<double>(poisons.size()) / static_cast<double>(loaded.corpus.size());
    result.summary = "inject: knowledge base of " + std::to_string(poisoned.size()) + " entries (" +
                     std::to_string(poisons.size()) + " poisoned, rate " + detail::fmt(rate) +
                     " of generated corpus) -> " + artifact::poisoned_dir(out).string();
    result.report = {{"knowledge_base", poisoned.size()},
                     {"poisons", poisons.size()},
                     {"poison_rate_vs_corpus", rate},
                     {"poison_rate_vs_kb",
                      static_cast<double>(poisons.size()) / static_cast<double>(poisoned.size())}};
    return result;
}

inline StageResult cmd_defend(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const auto loaded = detail::load_experiment(cfg, out, "defend");
    artifact::require(artifact::poisoned_dir(out) / "corpus.jsonl", "defend", "inject");
    const Corpus poisoned = load_corpus(artifact::poisoned_dir(out));
    const std::vector<ImageTensor> queries = query_images(loaded.queries);

    const auto outcomes = run_defense_battery(poisoned, queries, loaded.image_encoder,
                                              loaded.text_encoder, cfg.defense_configs(),
                                              cfg.experiment.ks);
    json report = json::object();
    for (const auto& [kind, outcome] : outcomes)
        report[to_string(kind)] = {{"removed", outcome.removed_total},
                                   {"benign_retention", outcome.benign_retention},
                                   {"asr_before", asr_to_json(outcome.asr_before)},
                                   {"asr_after", asr_to_json(outcome.asr_after)}};
    write_json_file(out / "defense_report.json", report);

    StageResult result;
    result.summary = "defend: " + std::to_string(outcomes.size()) + " defenses evaluated -> " +
                     (out / "defense_report.json").string();
    result.report = report;
    return result;
}

inline StageResult cmd_evaluate(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const auto loaded = detail::load_experiment(cfg, out, "evaluate");
    artifact::require(artifact::poisons_dir(out) / "poison_manifest.jsonl", "evaluate", "attack");
    artifact::require(artifact::poisoned_dir(out) / "corpus.jsonl", "evaluate", "inject");
    const Corpus poisoned = load_corpus(artifact::poisoned_dir(out));
    const std::vector<ImageTensor> queries = query_images(loaded.queries);
    const auto& exp = cfg.experiment;

    std::set<std::string> poisoned_ids;
    for (const auto& entry : poisoned)
        if (entry.provenance == Provenance::Poisoned) poisoned_ids.insert(entry.id);

    const RetrievalIndex attacked_index = build_index(poisoned, loaded.image_encoder);
    const ASRTable asr =
        asr_at_k(attacked_index, loaded.image_encoder, queries, poisoned_ids, exp.ks);
    write_asr_csv(out / "asr.csv", asr);

    std::vector<UtilityReport> utilities;
    { // no-RAG floor: a contextless generator answers with the first vocab label
        std::vector<std::string> vocab = exp.corpus.label_vocabulary;
        std::sort(vocab.begin(), vocab.end());
        int correct = 0;
        for (const auto& q : loaded.queries)
            if (q.truth_label == vocab.front()) ++correct;
        UtilityReport no_rag;
        no_rag.condition = Condition::NoRag;
        no_rag.s = static_cast<double>(correct) / static_cast<double>(loaded.queries.size());
        no_rag.s_rand = 1.0 / static_cast<double>(vocab.size());
        no_rag.s_scaled = chance_normalized(no_rag.s, no_rag.s_rand);
        utilities.push_back(no_rag);
    }
    const RetrievalIndex clean_index = build_index(loaded.knowledge_base, loaded.image_encoder);
    utilities.push_back(evaluate_utility(clean_index, loaded.knowledge_base, loaded.image_encoder,
                                         loaded.queries, exp.generator, exp.corpus.label_vocabulary,
                                         Condition::CleanRag));
    utilities.push_back(evaluate_utility(attacked_index, poisoned, loaded.image_encoder,
                                         loaded.queries, exp.generator, exp.corpus.label_vocabulary,
                                         Condition::Attacked));
    write_utility_csv(out / "utility.csv", utilities);

    export_projection(poisoned, loaded.image_encoder, out / "projection.csv");

    // Utility restricted to hijack-successful queries (configurable depth).
    const int filtered_k = cfg.resolved.at("evaluation").at("filtered_k").get<int>();
    std::vector<QueryCase> hijacked;
    for (const auto& q : loaded.queries) {
        const RetrievalResult r = retrieve(attacked_index, loaded.image_encoder, q.image, filtered_k);
        for (const auto& item : r.ranked)
            if (poisoned_ids.count(item.id)) {
                hijacked.push_back(q);
                break;
            }
    }
    json filtered = json();
    if (!hijacked.empty()) {
        const UtilityReport report =
            evaluate_utility(attacked_index, poisoned, loaded.image_encoder, hijacked, exp.generator,
                             exp.corpus.label_vocabulary, Condition::Attacked);
        filtered = {{"k", filtered_k},
                    {"queries", hijacked.size()},
                    {"s", report.s},
                    {"s_scaled", report.s_scaled}};
    }

    StageResult result;
    json utility_json = json::array();
    for (const auto& u : utilities) utility_json.push_back(utility_to_json(u));
    result.report = {{"asr", asr_to_json(asr)},
                     {"utility", utility_json},
                     {"utility_filtered", filtered}};
    result.summary = "evaluate: ASR@5 " +
                     detail::fmt(asr.rates.count(5) ? asr.rates.at(5) : asr.rates.rbegin()->second) +
                     ", attacked accuracy " + detail::fmt(utilities.back().s) + " -> " +
                     (out / "asr.csv").string();
    return result;
}

inline StageResult cmd_ablate(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    const auto outcomes = run_ablation_suite(cfg.experiment);

    std::ofstream csv(out / "ablation.csv");
    csv << "condition";
    for (int k : cfg.experiment.ks) csv << ",asr@" << k;
    csv << ",s,s_scaled\n";
    json report = json::object();
    for (const auto& [condition, outcome] : outcomes) {
        csv << to_string(condition);
        for (int k : cfg.experiment.ks) csv << ',' << detail::fmt(outcome.asr.rates.at(k));
        csv << ',' << detail::fmt(outcome.utility.s) << ',' << detail::fmt(outcome.utility.s_scaled)
            << '\n';
        report[to_string(condition)] = {{"asr", asr_to_json(outcome.asr)},
                                        {"utility", utility_to_json(outcome.utility)}};
    }

    StageResult result;
    result.summary = "ablate: " + std::to_string(outcomes.size()) + " conditions -> " +
                     (out / "ablation.csv").string();
    result.report = report;
    return result;
}

inline StageResult cmd_sweep(const PipelineConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out);
    json report = json::object();
    StageResult result;
    for (const auto& [axis, grid] : cfg.sweeps) {
        if (grid.empty()) continue;
        const std::vector<SweepRow> rows = run_hyperparameter_sweep(axis, grid, cfg.experiment);
        const fs::path csv_path = out / ("sweep_" + to_string(axis) + ".csv");
        std::ofstream csv(csv_path);
        csv << "value";
        for (int k : cfg.experiment.ks) csv << ",asr@" << k;
        csv << '\n';
        json rows_json = json::array();
        for (const auto& row : rows) {
            csv << detail::fmt(row.value);
            for (int k : cfg.experiment.ks) csv << ',' << detail::fmt(row.asr.rates.at(k));
            csv << '\n';
            rows_json.push_back({{"value", row.value}, {"asr", asr_to_json(row.asr)}});
        }
        report[to_string(axis)] = rows_json;
    }
    result.summary = "sweep: " + std::to_string(cfg.sweeps.size()) + " axes -> " + out.string();
    result.report = report;
    return result;
}

/// Chain every stage and aggregate one report.json. Two runs from the same
/// resolved config must produce byte-identical reports.
inline StageResult cmd_run_all(const PipelineConfig& cfg, const fs::path& out) {
    json report = json::object();
    report["config"] = cfg.resolved;
    report["stages"] = json::object();
    report["stages"]["gen_corpus"] = cmd_gen_corpus(cfg, out).report;
    report["stages"]["profile"] = cmd_profile(cfg, out).report;
    report["stages"]["attack"] = cmd_attack(cfg, out).report;
    report["stages"]["inject"] = cmd_inject(cfg, out).report;
    report["stages"]["defend"] = cmd_defend(cfg, out).report;
    report["stages"]["evaluate"] = cmd_evaluate(cfg, out).report;
    report["stages"]["ablate"] = cmd_ablate(cfg, out).report;
    report["stages"]["sweep"] = cmd_sweep(cfg, out).report;
    write_json_file(out / "report.json", report);

    StageResult result;
    result.summary = "run-all: complete -> " + (out / "report.json").string();
    result.report = std::move(report);
    return result;
}

} // namespace poisonbench::pipeline
