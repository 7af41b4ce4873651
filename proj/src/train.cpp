#include "kpdet/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <ostream>

#include "kpdet/json_util.hpp"
#include "kpdet/rng.hpp"

namespace kpdet {

void SgdOptimizer::step(ParamRegistry& params) {
    auto& items = params.items();
    if (velocity_.empty()) {
        velocity_.reserve(items.size());
        for (const auto& [name, v] : items) velocity_.push_back(Tensor::zeros(v->value.shape()));
    }
    if (clip_norm_ > 0.0) {
        double sq = 0.0;
        for (const auto& [name, v] : items) {
            if (!v->grad.same_shape(v->value)) continue;
            for (std::size_t i = 0; i < v->grad.size(); ++i) sq += v->grad[i] * v->grad[i];
        }
        const double norm = std::sqrt(sq);
        if (norm > clip_norm_) {
            const double s = clip_norm_ / norm;
            for (const auto& [name, v] : items) {
                if (!v->grad.same_shape(v->value)) continue;
                for (std::size_t i = 0; i < v->grad.size(); ++i) v->grad[i] *= s;
            }
        }
    }
    for (std::size_t p = 0; p < items.size(); ++p) {
        const ag::Var& v = items[p].second;
        if (!v->grad.same_shape(v->value)) continue;
        Tensor& vel = velocity_[p];
        for (std::size_t i = 0; i < v->value.size(); ++i) {
            vel[i] = momentum_ * vel[i] + v->grad[i];
            v->value[i] -= lr_ * vel[i];
        }
    }
    params.zero_grads();
}

double validation_loss(Model& model, const std::vector<synth::Sample>& split) {
    if (split.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    ag::NoGradGuard ng;
    for (const synth::Sample& s : split) {
        acc += model.loss_on(s.image, s.keypoints).report.total;
    }
    return acc / static_cast<double>(split.size());
}

TrainResult train_model(Model& model, const synth::Dataset& ds, const RunConfig& cfg,
                        std::ostream& log, const std::string& out_dir) {
    if (ds.train.empty()) throw ParameterError("train split is empty");
    std::filesystem::create_directories(out_dir);
    SgdOptimizer opt(cfg.optim.lr, cfg.optim.momentum, cfg.optim.clip_norm);
    Rng order(mix_seed(cfg.optim.seed, 0x747261696eULL));

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    result.final_checkpoint = out_dir + "/checkpoint_final.bin";
    result.best_checkpoint = out_dir + "/checkpoint_best.bin";
    const double inv_batch = 1.0 / static_cast<double>(cfg.optim.batch);

    for (std::size_t step = 0; step < cfg.optim.steps; ++step) {
        dec::LossReport mean{};
        for (std::size_t b = 0; b < cfg.optim.batch; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(order.uniform_index(ds.train.size()));
            const synth::Sample& s = ds.train[idx];
            dec::MatchedLoss out = model.loss_on(s.image, s.keypoints);
            ag::backward(out.total, inv_batch);
            mean.total += out.report.total * inv_batch;
            mean.mse_term += out.report.mse_term * inv_batch;
            mean.rle_term += out.report.rle_term * inv_batch;
            mean.class_term += out.report.class_term * inv_batch;
            mean.iou_term += out.report.iou_term * inv_batch;
        }
        opt.step(model.params());
        if (step == 0) result.first_loss = mean.total;
        result.final_loss = mean.total;
        result.step_losses.push_back(mean.total);

        json line;
        line["event"] = "train_step";
        line["step"] = step + 1;
        line["total"] = mean.total;
        line["mse"] = mean.mse_term;
        line["rle"] = mean.rle_term;
        line["class"] = mean.class_term;
        line["iou"] = mean.iou_term;
        log << line.dump() << "\n";

        const bool last = step + 1 == cfg.optim.steps;
        if (!ds.val.empty() && ((step + 1) % cfg.optim.val_every == 0 || last)) {
            const double vl = validation_loss(model, ds.val);
            json vline;
            vline["event"] = "validation";
            vline["step"] = step + 1;
            vline["val_loss"] = vl;
            log << vline.dump() << "\n";
            if (vl < result.best_val_loss) {
                result.best_val_loss = vl;
                model.save_checkpoint(result.best_checkpoint);
            }
        }
    }
    model.save_checkpoint(result.final_checkpoint);
    if (!std::filesystem::exists(result.best_checkpoint)) {
        model.save_checkpoint(result.best_checkpoint);
    }
    return result;
}

} // namespace kpdet
