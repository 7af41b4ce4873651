#pragma once

#include <string>
#include <vector>

#include "kpdet/model.hpp"
#include "kpdet/synthetic.hpp"

namespace kpdet {

/// Run configuration: one JSON file drives dataset generation, training,
/// evaluation and benchmarking. Unknown keys are rejected.
struct RunConfig {
    synth::DataConfig dataset;
    ModelConfig model;

    struct Optim {
        double lr = 1e-3;
        double momentum = 0.9;
        std::size_t steps = 2000;
        std::size_t batch = 4;
        double clip_norm = 5.0;  // 0 disables clipping
        std::size_t val_every = 200;
        std::uint64_t seed = 123;
    } optim;

    struct Eval {
        std::vector<double> pck_alphas{0.05, 0.1};
        double confidence_threshold = 0.0;
        bool overlays = true;
        int bench_warmup = 3;
        int bench_iters = 30;
    } eval;

    std::string data_dir = "data/toy";
    std::string out_dir = "runs/toy";

    void validate() const;
    std::string to_json() const;
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
};

} // namespace kpdet
