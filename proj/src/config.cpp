#include "kpdet/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "kpdet/json_util.hpp"

namespace kpdet {

void RunConfig::validate() const {
    model.validate();
    if (dataset.n == 0) throw ParameterError("dataset.n must be positive");
    const double sum = dataset.split[0] + dataset.split[1] + dataset.split[2];
    if (std::fabs(sum - 1.0) > 1e-9) throw ParameterError("dataset.split must sum to 1");
    for (double f : dataset.split) {
        if (f < 0.0) throw ParameterError("dataset.split fractions must be non-negative");
    }
    if (dataset.image.channels != model.backbone.in_channels) {
        throw ParameterError("dataset.image.channels must match model.backbone.in_channels");
    }
    const std::size_t unit = 4 * model.backbone.patch;
    if (dataset.image.h % unit != 0 || dataset.image.w % unit != 0) {
        throw ParameterError("dataset image extents must be multiples of 4*patch (" +
                             std::to_string(unit) + ")");
    }
    if (dataset.image.noise < 0.0) throw ParameterError("dataset.image.noise must be >= 0");
    if (dataset.image.cun_divisor <= 0.0) {
        throw ParameterError("dataset.image.cun_divisor must be positive");
    }
    if (dataset.workers == 0) throw ParameterError("dataset.workers must be >= 1");
    if (optim.lr < 0.0) throw ParameterError("optim.lr must be >= 0");
    if (optim.momentum < 0.0 || optim.momentum >= 1.0) {
        throw ParameterError("optim.momentum must be in [0, 1)");
    }
    if (optim.batch == 0) throw ParameterError("optim.batch must be >= 1");
    if (optim.clip_norm < 0.0) throw ParameterError("optim.clip_norm must be >= 0");
    if (optim.val_every == 0) throw ParameterError("optim.val_every must be >= 1");
    if (eval.pck_alphas.empty()) throw ParameterError("eval.pck_alphas must be non-empty");
    for (double a : eval.pck_alphas) {
        if (a <= 0.0) throw ParameterError("eval.pck_alphas entries must be positive");
    }
    if (eval.confidence_threshold < 0.0 || eval.confidence_threshold > 1.0) {
        throw ParameterError("eval.confidence_threshold must be in [0,1]");
    }
    if (eval.bench_warmup < 1) throw ParameterError("eval.bench_warmup must be >= 1");
    if (eval.bench_iters < 10) throw ParameterError("eval.bench_iters must be >= 10");
    if (out_dir.empty() || data_dir.empty()) {
        throw ParameterError("out_dir and data_dir must be set");
    }
}

std::string RunConfig::to_json() const {
    json j;
    j["dataset"] = json::parse(synth::data_config_to_json(dataset));
    j["model"] = json::parse(model.to_json());
    j["optim"] = {{"lr", optim.lr},           {"momentum", optim.momentum},
                  {"steps", optim.steps},     {"batch", optim.batch},
                  {"clip_norm", optim.clip_norm}, {"val_every", optim.val_every},
                  {"seed", optim.seed}};
    j["eval"] = {{"pck_alphas", eval.pck_alphas},
                 {"confidence_threshold", eval.confidence_threshold},
                 {"overlays", eval.overlays},
                 {"bench_warmup", eval.bench_warmup},
                 {"bench_iters", eval.bench_iters}};
    j["data_dir"] = data_dir;
    j["out_dir"] = out_dir;
    return j.dump(2);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParameterError(std::string("config parse error: ") + e.what());
    }
    check_keys(j, "config",
               {"dataset", "model", "optim", "eval", "data_dir", "out_dir"});
    RunConfig cfg;
    if (j.contains("dataset")) {
        // The dataset block shares its schema with manifest["config"].
        cfg.dataset = synth::data_config_from_json_text(j["dataset"].dump());
    }
    if (j.contains("model")) cfg.model = ModelConfig::from_json(j["model"].dump());
    if (j.contains("optim")) {
        const json& o = j["optim"];
        check_keys(o, "config.optim",
                   {"lr", "momentum", "steps", "batch", "clip_norm", "val_every", "seed"});
        cfg.optim.lr = get_or<double>(o, "lr", cfg.optim.lr);
        cfg.optim.momentum = get_or<double>(o, "momentum", cfg.optim.momentum);
        cfg.optim.steps = get_or<std::size_t>(o, "steps", cfg.optim.steps);
        cfg.optim.batch = get_or<std::size_t>(o, "batch", cfg.optim.batch);
        cfg.optim.clip_norm = get_or<double>(o, "clip_norm", cfg.optim.clip_norm);
        cfg.optim.val_every = get_or<std::size_t>(o, "val_every", cfg.optim.val_every);
        cfg.optim.seed = get_or<std::uint64_t>(o, "seed", cfg.optim.seed);
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        check_keys(e, "config.eval",
                   {"pck_alphas", "confidence_threshold", "overlays", "bench_warmup",
                    "bench_iters"});
        if (e.contains("pck_alphas")) {
            cfg.eval.pck_alphas = e["pck_alphas"].get<std::vector<double>>();
        }
        cfg.eval.confidence_threshold =
            get_or<double>(e, "confidence_threshold", cfg.eval.confidence_threshold);
        cfg.eval.overlays = get_or<bool>(e, "overlays", cfg.eval.overlays);
        cfg.eval.bench_warmup = get_or<int>(e, "bench_warmup", cfg.eval.bench_warmup);
        cfg.eval.bench_iters = get_or<int>(e, "bench_iters", cfg.eval.bench_iters);
    }
    cfg.data_dir = get_or<std::string>(j, "data_dir", cfg.data_dir);
    cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

} // namespace kpdet
