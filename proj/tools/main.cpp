#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kpdet/cli.hpp"

namespace {

// --seed overrides every seed in the config (dataset, model init, optimizer)
// so one flag reproduces a whole pipeline.
void apply_seed(kpdet::RunConfig& cfg, std::uint64_t seed) {
    cfg.dataset.seed = seed;
    cfg.model.seed = seed;
    cfg.optim.seed = seed;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"kpdet: keypoint detection pipeline (generate | train | eval | bench | predict)"};
    app.require_subcommand(1);

    std::string config_path;
    std::string checkpoint;
    std::string out_dir;
    double threshold = 0.0;
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* sub, bool needs_ckpt) {
        sub->add_option("--config", config_path, "run config JSON")->required();
        sub->add_option("--out", out_dir, "output directory override");
        sub->add_option("--seed", seed, "override all config seeds");
        if (needs_ckpt) {
            sub->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
        }
    };

    CLI::App* gen = app.add_subcommand("generate", "build the synthetic dataset");
    add_common(gen, false);
    CLI::App* train = app.add_subcommand("train", "train a model on the dataset");
    add_common(train, false);
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval, true);
    CLI::App* bench = app.add_subcommand("bench", "benchmark inference latency");
    add_common(bench, true);
    CLI::App* predict = app.add_subcommand("predict", "write predictions for the test split");
    add_common(predict, true);
    predict->add_option("--threshold", threshold, "confidence threshold")
        ->check(CLI::Range(0.0, 1.0));

    CLI11_PARSE(app, argc, argv);

    kpdet::RunConfig cfg;
    try {
        cfg = kpdet::RunConfig::from_file(config_path);
        if (seed) apply_seed(cfg, *seed);
        if (!out_dir.empty() && !gen->parsed()) cfg.out_dir = out_dir;
    } catch (const kpdet::IoError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kpdet::cli::kMissingInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kpdet::cli::kConfigError;
    }

    if (gen->parsed()) return kpdet::cli::cmd_generate(cfg, out_dir);
    if (train->parsed()) return kpdet::cli::cmd_train(cfg);
    if (eval->parsed()) return kpdet::cli::cmd_eval(cfg, checkpoint);
    if (bench->parsed()) return kpdet::cli::cmd_bench(cfg, checkpoint);
    if (predict->parsed()) return kpdet::cli::cmd_predict(cfg, checkpoint, threshold, out_dir);
    return kpdet::cli::kConfigError;
}
