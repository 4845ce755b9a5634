#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "poisonbench/pipeline.hpp"

using namespace poisonbench;
namespace pl = poisonbench::pipeline;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json tiny_config_json() {
    nlohmann::json j = pl::default_config_json();
    j["seed"] = 424242;
    j["corpus"]["n_clusters"] = 4;
    j["corpus"]["entries_per_cluster"] = 24;
    j["profiling"]["clusters"] = 4;
    j["profiling"]["prototypes"] = 4;
    j["attack"]["iterations"] = 10;
    j["attack"]["warmup_iters"] = 2;
    j["defense"]["clusters"] = 6;
    j["sweep"]["poison_ratio"] = {0.02, 0.05};
    j["sweep"]["epsilon"] = {8.0 / 255.0};
    j["sweep"]["n_clusters"] = {4};
    return j;
}

} // namespace

TEST_CASE("default config parses and derives stage seeds", "[pipeline]") {
    const pl::PipelineConfig cfg = pl::parse_config(pl::default_config_json());
    REQUIRE(cfg.experiment.corpus.n_clusters == 10);
    REQUIRE(cfg.experiment.attack.epsilon == Catch::Approx(16.0 / 255.0));
    REQUIRE(cfg.experiment.corpus.seed == derive_seed(cfg.experiment.seed, "corpus"));
    REQUIRE(cfg.experiment.profiling.seed == derive_seed(cfg.experiment.seed, "profiling"));
    REQUIRE(cfg.experiment.attack.seed == derive_seed(cfg.experiment.seed, "attack"));
}

TEST_CASE("config validation names the offending key", "[pipeline]") {
    SECTION("unknown top-level key") {
        nlohmann::json j = pl::default_config_json();
        j["attak"] = nlohmann::json::object();
        try {
            pl::parse_config(j);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("attak") != std::string::npos);
        }
    }
    SECTION("unknown nested key") {
        nlohmann::json j = pl::default_config_json();
        j["attack"]["epsilonn"] = 0.1;
        try {
            pl::parse_config(j);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("attack.epsilonn") != std::string::npos);
        }
    }
    SECTION("wrong value type names the key") {
        nlohmann::json j = pl::default_config_json();
        j["attack"]["iterations"] = "many";
        try {
            pl::parse_config(j);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("attack.iterations") != std::string::npos);
        }
    }
}

TEST_CASE("dotted overrides supersede file values and are recorded", "[pipeline]") {
    nlohmann::json j = tiny_config_json();
    pl::apply_override(j, "attack.mode", "black_box");
    pl::apply_override(j, "attack.iterations", "7");
    const pl::PipelineConfig cfg = pl::parse_config(j);
    REQUIRE(cfg.experiment.attack.mode == AttackMode::BlackBox);
    REQUIRE(cfg.experiment.attack.iterations == 7);
    REQUIRE(cfg.resolved["attack"]["mode"] == "black_box");
    REQUIRE(cfg.resolved["attack"]["iterations"] == 7);

    REQUIRE_THROWS_AS(pl::apply_override(j, "nonexistent.key", "1"), ConfigError);
}

TEST_CASE("stages fail closed with the missing producer named", "[pipeline]") {
    const fs::path out = fs::temp_directory_path() / "poisonbench_pipeline_deps";
    fs::remove_all(out);
    const pl::PipelineConfig cfg = pl::parse_config(tiny_config_json());

    SECTION("profile before gen-corpus") {
        try {
            pl::cmd_profile(cfg, out);
            FAIL("expected MissingArtifactError");
        } catch (const MissingArtifactError& e) {
            REQUIRE(std::string(e.what()).find("gen-corpus") != std::string::npos);
        }
    }
    SECTION("evaluate before attack names the attack stage") {
        pl::cmd_gen_corpus(cfg, out);
        pl::cmd_profile(cfg, out);
        try {
            pl::cmd_evaluate(cfg, out);
            FAIL("expected MissingArtifactError");
        } catch (const MissingArtifactError& e) {
            REQUIRE(std::string(e.what()).find("attack") != std::string::npos);
        }
    }
    fs::remove_all(out);
}

TEST_CASE("run_all is deterministic end to end", "[pipeline][slow]") {
    const pl::PipelineConfig cfg = pl::parse_config(tiny_config_json());
    const fs::path out_a = fs::temp_directory_path() / "poisonbench_runall_a";
    const fs::path out_b = fs::temp_directory_path() / "poisonbench_runall_b";
    fs::remove_all(out_a);
    fs::remove_all(out_b);

    pl::cmd_run_all(cfg, out_a);
    pl::cmd_run_all(cfg, out_b);

    REQUIRE(slurp(out_a / "report.json") == slurp(out_b / "report.json"));
    REQUIRE(slurp(out_a / "asr.csv") == slurp(out_b / "asr.csv"));
    REQUIRE(slurp(out_a / "ablation.csv") == slurp(out_b / "ablation.csv"));
    REQUIRE(slurp(out_a / "defense_report.json") == slurp(out_b / "defense_report.json"));

    SECTION("stage outputs are schedule independent") {
        nlohmann::json parallel_json = tiny_config_json();
        parallel_json["n_threads"] = 3;
        const pl::PipelineConfig parallel_cfg = pl::parse_config(parallel_json);
        const fs::path out_c = fs::temp_directory_path() / "poisonbench_runall_c";
        fs::remove_all(out_c);
        pl::cmd_run_all(parallel_cfg, out_c);
        const nlohmann::json serial = nlohmann::json::parse(slurp(out_a / "report.json"));
        const nlohmann::json parallel = nlohmann::json::parse(slurp(out_c / "report.json"));
        REQUIRE(serial.at("stages") == parallel.at("stages"));
        fs::remove_all(out_c);
    }

    SECTION("stages are idempotent given fixed inputs") {
        const std::string before = slurp(out_a / "poisons" / "poison_manifest.jsonl");
        pl::cmd_attack(cfg, out_a);
        REQUIRE(slurp(out_a / "poisons" / "poison_manifest.jsonl") == before);
    }

    fs::remove_all(out_a);
    fs::remove_all(out_b);
}

TEST_CASE("poison artifacts round-trip through the manifest", "[pipeline]") {
    const pl::PipelineConfig cfg = pl::parse_config(tiny_config_json());
    const fs::path out = fs::temp_directory_path() / "poisonbench_poison_roundtrip";
    fs::remove_all(out);
    pl::cmd_gen_corpus(cfg, out);
    pl::cmd_profile(cfg, out);
    pl::cmd_attack(cfg, out);

    const auto poisons = pl::load_poisons(pl::artifact::poisons_dir(out));
    REQUIRE(poisons.size() == 4);
    for (const auto& p : poisons) {
        REQUIRE(p.entry.provenance == Provenance::Poisoned);
        REQUIRE(p.epsilon_ok);
        REQUIRE_FALSE(p.trace.empty());
    }

    pl::cmd_inject(cfg, out);
    const Corpus poisoned = load_corpus(pl::artifact::poisoned_dir(out));
    int poisoned_count = 0;
    for (const auto& e : poisoned)
        if (e.provenance == Provenance::Poisoned) ++poisoned_count;
    REQUIRE(poisoned_count == 4);
    // knowledge base excludes the query split: 96 - 24 + 4 poisons
    REQUIRE(poisoned.size() == 76);
    fs::remove_all(out);
}
