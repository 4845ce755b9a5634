// poisonbench: retrieval-poisoning simulation pipeline driver.
//
//   poisonbench <subcommand> [--config <path>] [--out <dir>] [--<key.path> <value> ...]
//
// Dotted flags override config-file values, e.g.  --attack.mode black_box
// Exit codes: 0 success, 2 config error, 3 missing upstream artifact, 1 otherwise.

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poisonbench/pipeline.hpp"

namespace {

using poisonbench::pipeline::PipelineConfig;
using poisonbench::pipeline::StageResult;

struct SubcommandSpec {
    std::string name;
    std::string description;
    std::function<StageResult(const PipelineConfig&, const std::filesystem::path&)> run;
};

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (std::size_t i = 0; i < extras.size(); ++i) {
        std::string token = extras[i];
        if (token.rfind("--", 0) != 0)
            throw poisonbench::ConfigError("config: unexpected argument '" + token + "'");
        token = token.substr(2);
        const std::size_t eq = token.find('=');
        if (eq != std::string::npos) {
            overrides.emplace_back(token.substr(0, eq), token.substr(eq + 1));
            continue;
        }
        if (i + 1 >= extras.size())
            throw poisonbench::ConfigError("config: override '--" + token + "' is missing a value");
        overrides.emplace_back(token, extras[++i]);
    }
    return overrides;
}

} // namespace

int main(int argc, char** argv) {
    namespace pl = poisonbench::pipeline;

    const std::vector<SubcommandSpec> subcommands = {
        {"gen-corpus", "Generate the synthetic corpus, split and encoders", pl::cmd_gen_corpus},
        {"profile", "Cluster the reference pool and emit proxy targets", pl::cmd_profile},
        {"attack", "Select candidates and run constrained PGD refinement", pl::cmd_attack},
        {"inject", "Merge poisoned entries into the knowledge base", pl::cmd_inject},
        {"defend", "Run the defense battery against the poisoned knowledge base", pl::cmd_defend},
        {"evaluate", "Compute ASR@k, utility and the projection export", pl::cmd_evaluate},
        {"ablate", "Run the clean/attacked/no-hijack/no-injection conditions", pl::cmd_ablate},
        {"sweep", "Sweep poison ratio, epsilon and cluster count", pl::cmd_sweep},
        {"run-all", "Chain every stage and aggregate report.json", pl::cmd_run_all},
    };

    CLI::App app{"poisonbench: desk-scale retrieval data-poisoning simulator"};
    app.require_subcommand(1);

    std::map<std::string, CLI::App*> apps;
    std::string config_path;
    std::string out_dir = "out";
    for (const auto& spec : subcommands) {
        CLI::App* sub = app.add_subcommand(spec.name, spec.description);
        sub->add_option("--config", config_path, "JSON config file (defaults used when omitted)");
        sub->add_option("--out", out_dir, "Output directory");
        sub->allow_extras();
        apps[spec.name] = sub;
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& spec : subcommands) {
            CLI::App* sub = apps[spec.name];
            if (!sub->parsed()) continue;
            const auto overrides = parse_overrides(sub->remaining());
            std::optional<std::filesystem::path> config;
            if (!config_path.empty()) config = config_path;
            const PipelineConfig cfg = pl::load_config(config, overrides);
            const StageResult result = spec.run(cfg, out_dir);
            std::cout << result.summary << '\n';
            return 0;
        }
    } catch (const poisonbench::MissingArtifactError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const poisonbench::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
