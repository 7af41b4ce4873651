#include "kpdet/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "kpdet/json_util.hpp"
#include "kpdet/metrics.hpp"
#include "kpdet/overlay.hpp"
#include "kpdet/train.hpp"

namespace fs = std::filesystem;

namespace kpdet::cli {

namespace {

void emit(const json& j) { std::cout << j.dump() << std::endl; }

int fail(int code, const std::string& msg) {
    std::cerr << "error: " << msg << std::endl;
    return code;
}

// Classifies load-time failures: absent files are missing input, everything
// else that threw IoError is a corrupt artifact.
int map_io_error(const IoError& e, const std::string& primary_path) {
    if (!fs::exists(primary_path)) return fail(kMissingInput, e.what());
    return fail(kCorruptArtifact, e.what());
}

metrics::Predictor model_predictor(const Model& model, double threshold, ssm::ScanMode mode) {
    return [&model, threshold, mode](const Tensor& image) {
        return model.predict(image, threshold, mode);
    };
}

} // namespace

int cmd_generate(const RunConfig& cfg, const std::string& out_dir) {
    try {
        const std::string dir = out_dir.empty() ? cfg.data_dir : out_dir;
        const std::uint64_t hash = synth::build_dataset(cfg.dataset, dir);
        char hex[20];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash));
        json j;
        j["event"] = "generate_done";
        j["dir"] = dir;
        j["n"] = cfg.dataset.n;
        j["manifest_hash"] = hex;
        emit(j);
        return kOk;
    } catch (const ParameterError& e) {
        return fail(kConfigError, e.what());
    } catch (const IoError& e) {
        return fail(kCorruptArtifact, e.what());
    }
}

int cmd_train(const RunConfig& cfg) {
    synth::Dataset ds;
    const std::string manifest = cfg.data_dir + "/manifest.json";
    try {
        ds = synth::load_dataset(cfg.data_dir);
    } catch (const IoError& e) {
        return map_io_error(e, manifest);
    }
    try {
        if (cfg.model.num_classes != synth::back_rules_19().size()) {
            throw ParameterError("model.num_classes must equal the rule count (" +
                                 std::to_string(synth::back_rules_19().size()) + ")");
        }
        fs::create_directories(cfg.out_dir);
        Model model(cfg.model);
        std::ofstream log_file(cfg.out_dir + "/train_log.jsonl");

        // Step logs stream to stdout as they happen and to the run directory.
        struct TeeBuf final : std::streambuf {
            std::streambuf *a, *b;
            TeeBuf(std::streambuf* a_, std::streambuf* b_) : a(a_), b(b_) {}
            int overflow(int ch) override {
                if (ch == EOF) return !EOF;
                const int r1 = a->sputc(static_cast<char>(ch));
                const int r2 = b->sputc(static_cast<char>(ch));
                return (r1 == EOF || r2 == EOF) ? EOF : ch;
            }
        } tee(std::cout.rdbuf(), log_file.rdbuf());
        std::ostream tee_stream(&tee);
        TrainResult res = train_model(model, ds, cfg, tee_stream, cfg.out_dir);

        json done;
        done["event"] = "train_done";
        done["steps"] = cfg.optim.steps;
        done["first_loss"] = res.first_loss;
        done["final_loss"] = res.final_loss;
        done["best_val_loss"] = res.best_val_loss;
        done["final_checkpoint"] = res.final_checkpoint;
        done["best_checkpoint"] = res.best_checkpoint;
        emit(done);
        return kOk;
    } catch (const ParameterError& e) {
        return fail(kConfigError, e.what());
    } catch (const IoError& e) {
        return fail(kCorruptArtifact, e.what());
    }
}

namespace {

int load_model_or_fail(const std::string& checkpoint, std::unique_ptr<Model>& model) {
    try {
        model = Model::load_checkpoint(checkpoint);
        return kOk;
    } catch (const IoError& e) {
        if (!fs::exists(checkpoint) || !fs::exists(checkpoint + ".json")) {
            return fail(kMissingInput, e.what());
        }
        return fail(kCorruptArtifact, e.what());
    }
}

} // namespace

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint) {
    std::unique_ptr<Model> model;
    if (int rc = load_model_or_fail(checkpoint, model); rc != kOk) return rc;
    synth::Dataset ds;
    try {
        ds = synth::load_dataset(cfg.data_dir);
    } catch (const IoError& e) {
        return map_io_error(e, cfg.data_dir + "/manifest.json");
    }
    try {
        if (ds.test.empty()) throw ParameterError("test split is empty");
        fs::create_directories(cfg.out_dir + "/eval");
        const metrics::MetricsReport rep = metrics::evaluate(
            model_predictor(*model, cfg.eval.confidence_threshold, ssm::ScanMode::Recurrent),
            ds.test, cfg.eval.pck_alphas, cfg.dataset.image.h, cfg.dataset.image.w,
            cfg.dataset.workers);
        {
            std::ofstream f(cfg.out_dir + "/eval/report.json");
            f << metrics::report_to_json(rep) << "\n";
        }
        {
            std::ofstream f(cfg.out_dir + "/eval/report.txt");
            f << metrics::report_to_table(rep);
        }
        if (cfg.eval.overlays) {
            fs::create_directories(cfg.out_dir + "/eval/overlays");
            for (std::size_t i = 0; i < ds.test.size(); ++i) {
                const auto dets = model->predict(ds.test[i].image,
                                                 cfg.eval.confidence_threshold);
                char name[32];
                std::snprintf(name, sizeof(name), "test_%04zu.png", i);
                overlay::write_overlay(cfg.out_dir + "/eval/overlays/" + name,
                                       ds.test[i].image, ds.test[i].keypoints, dets);
            }
        }
        json j = json::parse(metrics::report_to_json(rep));
        j["event"] = "eval_done";
        emit(j);
        return kOk;
    } catch (const ParameterError& e) {
        return fail(kConfigError, e.what());
    } catch (const IoError& e) {
        return fail(kCorruptArtifact, e.what());
    }
}

int cmd_bench(const RunConfig& cfg, const std::string& checkpoint) {
    std::unique_ptr<Model> model;
    if (int rc = load_model_or_fail(checkpoint, model); rc != kOk) return rc;
    synth::Dataset ds;
    try {
        ds = synth::load_dataset(cfg.data_dir);
    } catch (const IoError& e) {
        return map_io_error(e, cfg.data_dir + "/manifest.json");
    }
    try {
        const auto& pool = !ds.test.empty() ? ds.test : ds.train;
        if (pool.empty()) throw ParameterError("dataset has no images to benchmark");
        std::vector<Tensor> images;
        for (std::size_t i = 0; i < std::min<std::size_t>(pool.size(), 8); ++i) {
            images.push_back(pool[i].image);
        }
        const auto recurrent = metrics::benchmark(
            model_predictor(*model, cfg.eval.confidence_threshold, ssm::ScanMode::Recurrent),
            images, cfg.eval.bench_warmup, cfg.eval.bench_iters);
        const auto parallel = metrics::benchmark(
            model_predictor(*model, cfg.eval.confidence_threshold,
                            ssm::ScanMode::ChunkedParallel),
            images, cfg.eval.bench_warmup, cfg.eval.bench_iters);
        json j;
        j["event"] = "bench_done";
        j["recurrent"] = {{"t_avg_ms", recurrent.t_avg_ms},
                          {"t_std_ms", recurrent.t_std_ms},
                          {"throughput_per_s", recurrent.throughput_per_s},
                          {"iters", recurrent.iters}};
        j["parallel"] = {{"t_avg_ms", parallel.t_avg_ms},
                         {"t_std_ms", parallel.t_std_ms},
                         {"throughput_per_s", parallel.throughput_per_s},
                         {"iters", parallel.iters}};
        j["mode_latency_ratio"] = recurrent.t_avg_ms / parallel.t_avg_ms;
        fs::create_directories(cfg.out_dir);
        {
            std::ofstream f(cfg.out_dir + "/bench.json");
            f << j.dump(2) << "\n";
        }
        emit(j);
        return kOk;
    } catch (const ParameterError& e) {
        return fail(kConfigError, e.what());
    } catch (const IoError& e) {
        return fail(kCorruptArtifact, e.what());
    }
}

int cmd_predict(const RunConfig& cfg, const std::string& checkpoint, double threshold,
                const std::string& out_dir) {
    std::unique_ptr<Model> model;
    if (int rc = load_model_or_fail(checkpoint, model); rc != kOk) return rc;
    synth::Dataset ds;
    try {
        ds = synth::load_dataset(cfg.data_dir);
    } catch (const IoError& e) {
        return map_io_error(e, cfg.data_dir + "/manifest.json");
    }
    try {
        if (threshold < 0.0 || threshold > 1.0) {
            throw ParameterError("--threshold must be in [0,1]");
        }
        const std::string dir = out_dir.empty() ? cfg.out_dir : out_dir;
        fs::create_directories(dir);
        std::ofstream out(dir + "/predictions.jsonl");
        if (!out) throw IoError("cannot write predictions.jsonl under " + dir);
        for (std::size_t i = 0; i < ds.test.size(); ++i) {
            const auto dets = model->predict(ds.test[i].image, threshold);
            json row;
            char id[32];
            std::snprintf(id, sizeof(id), "test_%04zu", i);
            row["image_id"] = id;
            json arr = json::array();
            for (const auto& d : dets) {
                arr.push_back({{"class", d.class_id},
                               {"x", d.x},
                               {"y", d.y},
                               {"score", d.confidence}});
            }
            row["detections"] = arr;
            out << row.dump() << "\n";
        }
        json j;
        j["event"] = "predict_done";
        j["n_images"] = ds.test.size();
        j["out"] = dir + "/predictions.jsonl";
        emit(j);
        return kOk;
    } catch (const ParameterError& e) {
        return fail(kConfigError, e.what());
    } catch (const IoError& e) {
        return fail(kCorruptArtifact, e.what());
    }
}

} // namespace kpdet::cli
