// Command-line entry point: spineage <stage|all> --config <path> [--force] [--seed N]

#include "spineage/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    using namespace spineage;
    CLI::App app{"spine-age pipeline"};
    std::string stage;
    std::string config_path;
    bool force = false;
    std::optional<std::uint64_t> seed;
    app.add_option("stage", stage,
                   "generate, cluster, split, train, evaluate, biomarkers, gradcam, ablation or all")
        ->required();
    app.add_option("-c,--config", config_path, "pipeline configuration file")->required();
    app.add_flag("-f,--force", force, "rerun stages even when their inputs are unchanged");
    app.add_option("--seed", seed, "override the configured seed");
    CLI11_PARSE(app, argc, argv);

    pipeline::Config cfg;
    std::filesystem::path root;
    try {
        if (stage != "all" && !pipeline::is_stage(stage)) {
            throw ConfigError("unknown stage '" + stage + "'");
        }
        cfg = pipeline::load_config(config_path);
        if (seed) {
            cfg.seed = *seed;
        }
        root = pipeline::resolve_workdir(cfg, config_path);
    } catch (const Error& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    }
    try {
        pipeline::Pipeline p(cfg, root);
        const auto ran = p.run(stage, force);
        std::cout << "workdir " << root.string() << ": ran " << ran.size() << " stage(s)\n";
    } catch (const DependencyError& e) {
        std::cerr << "missing dependency: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
