#include "kpdet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "kpdet/json_util.hpp"

namespace kpdet {

void ModelConfig::validate() const {
    backbone.validate();
    if (heads == 0 || backbone.d_model % heads != 0) {
        throw ParameterError("heads must divide d_model");
    }
    if (backbone.d_model % 4 != 0) {
        throw ParameterError("d_model must be divisible by 4 for positional encodings");
    }
    if (num_queries == 0 || num_classes == 0 || ffn_mult == 0) {
        throw ParameterError("num_queries, num_classes and ffn_mult must be positive");
    }
    if (num_queries < num_classes) {
        throw ParameterError("num_queries must be at least num_classes");
    }
    if (loss.gt_box_size <= 0.0 || loss.gt_box_size > 1.0) {
        throw ParameterError("gt_box_size must be in (0, 1]");
    }
}

std::string ModelConfig::to_json() const {
    json j;
    j["backbone"] = {{"in_channels", backbone.in_channels},
                     {"patch", backbone.patch},
                     {"d_model", backbone.d_model},
                     {"d_state", backbone.d_state},
                     {"blocks_per_stage", backbone.blocks_per_stage}};
    j["heads"] = heads;
    j["num_queries"] = num_queries;
    j["decoder_layers"] = decoder_layers;
    j["ffn_mult"] = ffn_mult;
    j["num_classes"] = num_classes;
    j["seed"] = seed;
    j["loss"] = {{"mse", loss.mse},
                 {"rle", loss.rle},
                 {"class", loss.cls},
                 {"iou", loss.iou},
                 {"gt_box_size", loss.gt_box_size}};
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParameterError(std::string("model config parse error: ") + e.what());
    }
    check_keys(j, "model config",
               {"backbone", "heads", "num_queries", "decoder_layers", "ffn_mult",
                "num_classes", "seed", "loss"});
    ModelConfig cfg;
    if (j.contains("backbone")) {
        const json& b = j["backbone"];
        check_keys(b, "model config.backbone",
                   {"in_channels", "patch", "d_model", "d_state", "blocks_per_stage"});
        cfg.backbone.in_channels = get_or<std::size_t>(b, "in_channels", cfg.backbone.in_channels);
        cfg.backbone.patch = get_or<std::size_t>(b, "patch", cfg.backbone.patch);
        cfg.backbone.d_model = get_or<std::size_t>(b, "d_model", cfg.backbone.d_model);
        cfg.backbone.d_state = get_or<std::size_t>(b, "d_state", cfg.backbone.d_state);
        cfg.backbone.blocks_per_stage =
            get_or<std::size_t>(b, "blocks_per_stage", cfg.backbone.blocks_per_stage);
    }
    cfg.heads = get_or<std::size_t>(j, "heads", cfg.heads);
    cfg.num_queries = get_or<std::size_t>(j, "num_queries", cfg.num_queries);
    cfg.decoder_layers = get_or<std::size_t>(j, "decoder_layers", cfg.decoder_layers);
    cfg.ffn_mult = get_or<std::size_t>(j, "ffn_mult", cfg.ffn_mult);
    cfg.num_classes = get_or<std::size_t>(j, "num_classes", cfg.num_classes);
    cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
    if (j.contains("loss")) {
        const json& l = j["loss"];
        check_keys(l, "model config.loss", {"mse", "rle", "class", "iou", "gt_box_size"});
        cfg.loss.mse = get_or<double>(l, "mse", cfg.loss.mse);
        cfg.loss.rle = get_or<double>(l, "rle", cfg.loss.rle);
        cfg.loss.cls = get_or<double>(l, "class", cfg.loss.cls);
        cfg.loss.iou = get_or<double>(l, "iou", cfg.loss.iou);
        cfg.loss.gt_box_size = get_or<double>(l, "gt_box_size", cfg.loss.gt_box_size);
    }
    cfg.validate();
    return cfg;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0x6d6f64656cULL));
    const std::size_t d = cfg_.backbone.d_model;
    backbone_ = bb::init_backbone(params_, cfg_.backbone, rng);
    intra_attn_ = enc::init_mhsa(params_, "encoder.intra_attn", d, cfg_.heads, rng);
    fuse_ = enc::init_cross_scale_fuse(params_, "encoder.fuse", d, rng);
    selector_ = enc::init_query_selector(params_, "selector", d, rng);
    decoder_ = dec::init_decoder(params_, cfg_.decoder_layers, d, cfg_.heads,
                                 cfg_.ffn_mult * d, rng);
    head_ = dec::init_head(params_, d, cfg_.num_classes, rng);
}

Model::Forward Model::forward(const ag::Var& image, ssm::ScanMode mode,
                              const std::vector<std::size_t>* frozen_topk) const {
    bb::PyramidTokens pyr = bb::extract_pyramid_tokens(image, backbone_, cfg_.backbone, mode);
    pyr.l32 = enc::intra_scale_attention_tokens(pyr.l32, pyr.h32, pyr.w32, intra_attn_);
    const bb::PyramidTokens fused = enc::cross_scale_fuse_tokens(pyr, fuse_);

    const ag::Var tokens = ag::concat_rows({fused.l8, fused.l16, fused.l32});
    const Tensor anchors = enc::pyramid_anchors(fused);

    Forward fw;
    fw.selected = enc::select_queries_tokens(tokens, anchors, selector_, cfg_.num_queries,
                                             frozen_topk);

    // Memory keys carry their grid's positional encoding.
    const std::size_t d = cfg_.backbone.d_model;
    const Tensor pe8 = enc::sinusoidal_pos_2d(fused.h8, fused.w8, d);
    const Tensor pe16 = enc::sinusoidal_pos_2d(fused.h16, fused.w16, d);
    const Tensor pe32 = enc::sinusoidal_pos_2d(fused.h32, fused.w32, d);
    Tensor mem_pos({tokens->value.extent(0), d});
    std::size_t row = 0;
    for (const Tensor* pe : {&pe8, &pe16, &pe32}) {
        std::copy(pe->data(), pe->data() + pe->size(), mem_pos.data() + row * d);
        row += pe->extent(0);
    }

    const ag::Var decoded = dec::decode_tokens(fw.selected.features, tokens, decoder_, &mem_pos);
    fw.head = dec::head_forward(decoded, fused.l8, fused.h8, fused.w8, head_);
    return fw;
}

dec::MatchedLoss Model::loss_on(const Tensor& image, const std::vector<Keypoint>& gts,
                                ssm::ScanMode mode, const FrozenChoices* frozen,
                                FrozenChoices* record) {
    image.require_finite("input image");
    const Forward fw = forward(ag::constant(image), mode, frozen ? &frozen->topk : nullptr);
    dec::MatchedLoss out = dec::match_and_supervise_tokens(
        fw.head.cls_logits, fw.head.coords, fw.head.sigma, fw.selected.boxes,
        fw.selected.scores, gts, cfg_.loss, frozen ? &frozen->assignment : nullptr);
    if (!std::isfinite(out.report.total)) throw NumericError("non-finite training loss");
    if (record) {
        record->topk = fw.selected.indices;
        record->assignment = out.assignment;
    }
    return out;
}

std::vector<dec::Detection> Model::predict(const Tensor& image, double threshold,
                                           ssm::ScanMode mode, bool class_unique) const {
    if (threshold < 0.0 || threshold > 1.0) {
        throw ParameterError("predict threshold must be in [0,1]");
    }
    image.require_finite("input image");
    ag::NoGradGuard ng;
    const Forward fw = forward(ag::constant(image), mode, nullptr);
    const Tensor probs = softmax(fw.head.cls_logits->value, 1);
    const Tensor& coords = fw.head.coords->value;
    const Tensor& sigma = fw.head.sigma->value;
    const std::size_t k = probs.extent(0);
    const std::size_t n_real = cfg_.num_classes;

    std::vector<dec::Detection> dets;
    auto make_det = [&](std::size_t q, int cls, double conf) {
        dec::Detection det;
        det.class_id = cls;
        det.x = coords.at(q, 0);
        det.y = coords.at(q, 1);
        det.confidence = conf;
        det.sigma_x = sigma.at(q, 0);
        det.sigma_y = sigma.at(q, 1);
        return det;
    };

    if (class_unique) {
        for (std::size_t c = 0; c < n_real; ++c) {
            std::size_t best_q = 0;
            double best_p = -1.0;
            for (std::size_t q = 0; q < k; ++q) {
                if (probs.at(q, c) > best_p) {
                    best_p = probs.at(q, c);
                    best_q = q;
                }
            }
            if (best_p >= threshold) {
                dets.push_back(make_det(best_q, static_cast<int>(c), best_p));
            }
        }
    } else {
        for (std::size_t q = 0; q < k; ++q) {
            std::size_t best_c = 0;
            double best_p = -1.0;
            for (std::size_t c = 0; c < n_real; ++c) {
                if (probs.at(q, c) > best_p) {
                    best_p = probs.at(q, c);
                    best_c = c;
                }
            }
            if (best_p >= threshold) {
                dets.push_back(make_det(q, static_cast<int>(best_c), best_p));
            }
        }
        std::stable_sort(dets.begin(), dets.end(),
                         [](const dec::Detection& a, const dec::Detection& b) {
                             return a.confidence > b.confidence;
                         });
    }
    for (const auto& det : dets) {
        if (!std::isfinite(det.x) || !std::isfinite(det.y) || !std::isfinite(det.confidence)) {
            throw NumericError("non-finite detection output");
        }
    }
    return dets;
}

namespace {
constexpr char kCheckpointMagic[8] = {'K', 'P', 'D', 'E', 'T', 'C', 'K', '1'};
}

void Model::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for write: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const auto& items = params_.items();
    const std::uint32_t count = static_cast<std::uint32_t>(items.size());
    os.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& [name, var] : items) {
        const std::uint32_t len = static_cast<std::uint32_t>(name.size());
        os.write(reinterpret_cast<const char*>(&len), sizeof(len));
        os.write(name.data(), static_cast<std::streamsize>(len));
        write_tensor(os, var->value);
    }
    if (!os) throw IoError("checkpoint write failed: " + path);
    std::ofstream sidecar(path + ".json");
    if (!sidecar) throw IoError("cannot write checkpoint sidecar: " + path + ".json");
    sidecar << cfg_.to_json() << "\n";
}

std::unique_ptr<Model> Model::load_checkpoint(const std::string& path) {
    std::ifstream sidecar(path + ".json");
    if (!sidecar) throw IoError("missing checkpoint sidecar: " + path + ".json");
    std::string text((std::istreambuf_iterator<char>(sidecar)),
                     std::istreambuf_iterator<char>());
    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_json(text);
    } catch (const std::exception& e) {
        throw IoError(std::string("corrupt checkpoint sidecar: ") + e.what());
    }
    auto model = std::make_unique<Model>(cfg);

    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw IoError("corrupt checkpoint (bad magic): " + path);
    }
    std::uint32_t count = 0;
    is.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!is || count != model->params_.items().size()) {
        throw IoError("corrupt checkpoint (entry count mismatch): " + path);
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!is || len > 4096) throw IoError("corrupt checkpoint (bad name): " + path);
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        Tensor t;
        try {
            t = read_tensor(is);
        } catch (const std::exception& e) {
            throw IoError("corrupt checkpoint (" + name + "): " + e.what());
        }
        ag::Var var;
        try {
            var = model->params_.find(name);
        } catch (const std::exception&) {
            throw IoError("corrupt checkpoint (unknown parameter " + name + "): " + path);
        }
        if (!var->value.same_shape(t)) {
            throw IoError("corrupt checkpoint (shape mismatch for " + name + "): " + path);
        }
        var->value = std::move(t);
    }
    return model;
}

} // namespace kpdet
