#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "kpdet/config.hpp"
#include "kpdet/model.hpp"
#include "kpdet/synthetic.hpp"

namespace kpdet {

/// SGD with momentum and optional global-norm gradient clipping.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum, double clip_norm)
        : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {}

    void step(ParamRegistry& params);

private:
    double lr_, momentum_, clip_norm_;
    std::vector<Tensor> velocity_;
};

struct TrainResult {
    double first_loss = 0.0;
    double final_loss = 0.0;
    double best_val_loss = 0.0;
    std::vector<double> step_losses;  // batch-mean total per step
    std::string final_checkpoint, best_checkpoint;
};

/// Gradient-descent loop (parallel-scan backbone mode); per-step losses as
/// JSON lines on `log`; writes final and best-validation checkpoints under
/// `out_dir`. Deterministic given the config seeds.
TrainResult train_model(Model& model, const synth::Dataset& ds, const RunConfig& cfg,
                        std::ostream& log, const std::string& out_dir);

/// Mean loss over a split without gradient work.
double validation_loss(Model& model, const std::vector<synth::Sample>& split);

} // namespace kpdet
