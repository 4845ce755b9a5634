#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#ifndef POISONBENCH_BIN
#error "POISONBENCH_BIN must point at the cli binary"
#endif

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(POISONBENCH_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

fs::path write_tiny_config(const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json j = {
        {"seed", 11},
        {"corpus", {{"n_clusters", 3}, {"entries_per_cluster", 16}}},
        {"profiling", {{"clusters", 3}, {"prototypes", 3}}},
        {"attack", {{"iterations", 8}, {"warmup_iters", 2}}},
        {"defense", {{"clusters", 5}}},
        {"sweep",
         {{"poison_ratio", {0.04}}, {"epsilon", {8.0 / 255.0}}, {"n_clusters", {3}}}},
    };
    const fs::path path = dir / "config.json";
    std::ofstream out(path);
    out << j.dump(2);
    return path;
}

} // namespace

TEST_CASE("cli drives the full pipeline", "[cli][slow]") {
    const fs::path dir = fs::temp_directory_path() / "poisonbench_cli";
    fs::remove_all(dir);
    const fs::path config = write_tiny_config(dir);
    const fs::path out = dir / "out";

    REQUIRE(run("run-all --config " + config.string() + " --out " + out.string()) == 0);
    REQUIRE(fs::exists(out / "report.json"));
    REQUIRE(fs::exists(out / "resolved_config.json"));
    REQUIRE(fs::exists(out / "asr.csv"));
    REQUIRE(fs::exists(out / "sweep_poison_ratio.csv"));

    SECTION("flag overrides are applied and recorded") {
        const fs::path out2 = dir / "out2";
        REQUIRE(run("gen-corpus --config " + config.string() + " --out " + out2.string() +
                    " --attack.mode black_box") == 0);
        std::ifstream in(out2 / "resolved_config.json");
        nlohmann::json resolved;
        in >> resolved;
        REQUIRE(resolved["attack"]["mode"] == "black_box");
    }
    fs::remove_all(dir);
}

TEST_CASE("cli exit codes follow the contract", "[cli]") {
    const fs::path dir = fs::temp_directory_path() / "poisonbench_cli_codes";
    fs::remove_all(dir);
    const fs::path config = write_tiny_config(dir);

    SECTION("missing upstream artifact exits 3") {
        REQUIRE(run("evaluate --config " + config.string() + " --out " + (dir / "never").string()) ==
                3);
    }
    SECTION("config errors exit 2") {
        const fs::path bad = dir / "bad.json";
        std::ofstream out(bad);
        out << R"({"corpus": {"n_clusterz": 3}})";
        out.close();
        REQUIRE(run("gen-corpus --config " + bad.string() + " --out " + (dir / "o").string()) == 2);
    }
    SECTION("unknown override value exits 2") {
        REQUIRE(run("gen-corpus --config " + config.string() + " --out " + (dir / "o").string() +
                    " --attack.mode sideways") == 2);
    }
    fs::remove_all(dir);
}
