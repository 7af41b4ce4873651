#include "kpdet/backbone.hpp"

#include <cmath>
#include <string>

namespace kpdet::bb {

void BackboneConfig::validate() const {
    if (in_channels == 0 || patch == 0 || d_model == 0 || d_state == 0 ||
        blocks_per_stage == 0) {
        throw ParameterError("backbone config fields must be positive");
    }
}

namespace {

void check_patch_dims(const Tensor& image, std::size_t patch) {
    if (image.rank() != 3) throw DimensionError("image must be [c,h,w]");
    if (patch == 0 || image.extent(1) % patch != 0 || image.extent(2) % patch != 0) {
        throw DimensionError("image extents must be multiples of the patch size");
    }
}

} // namespace

Tensor serialize_patches(const Tensor& image, std::size_t patch) {
    check_patch_dims(image, patch);
    const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
    const std::size_t gh = h / patch, gw = w / patch;
    Tensor out({gh * gw, c * patch * patch});
    std::size_t tok = 0;
    for (std::size_t gi = 0; gi < gh; ++gi) {
        for (std::size_t gj = 0; gj < gw; ++gj, ++tok) {
            std::size_t e = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t pi = 0; pi < patch; ++pi) {
                    for (std::size_t pj = 0; pj < patch; ++pj, ++e) {
                        out.at(tok, e) = image.at(ch, gi * patch + pi, gj * patch + pj);
                    }
                }
            }
        }
    }
    return out;
}

Tensor deserialize_patches(const Tensor& tokens, std::size_t c, std::size_t h, std::size_t w,
                           std::size_t patch) {
    if (tokens.rank() != 2) throw DimensionError("tokens must be rank-2");
    const std::size_t gh = h / patch, gw = w / patch;
    if (h % patch != 0 || w % patch != 0 || tokens.extent(0) != gh * gw ||
        tokens.extent(1) != c * patch * patch) {
        throw DimensionError("token shape inconsistent with image extents");
    }
    Tensor img({c, h, w});
    std::size_t tok = 0;
    for (std::size_t gi = 0; gi < gh; ++gi) {
        for (std::size_t gj = 0; gj < gw; ++gj, ++tok) {
            std::size_t e = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t pi = 0; pi < patch; ++pi) {
                    for (std::size_t pj = 0; pj < patch; ++pj, ++e) {
                        img.at(ch, gi * patch + pi, gj * patch + pj) = tokens.at(tok, e);
                    }
                }
            }
        }
    }
    return img;
}

ag::Var patchify(const ag::Var& image, std::size_t patch) {
    Tensor tokens = serialize_patches(image->value, patch);
    const std::size_t c = image->value.extent(0);
    const std::size_t h = image->value.extent(1), w = image->value.extent(2);
    return ag::make_node(std::move(tokens), {image}, [image, c, h, w, patch](ag::Node& n) {
        image->add_grad(deserialize_patches(n.grad, c, h, w, patch));
    });
}

ag::Var selective_block(const ag::Var& x, const SelectiveBlockWeights& w, ssm::ScanMode mode) {
    const ag::Var xn = ag::rms_norm_rows(x, w.norm_gain);
    const ag::Var dt = ag::softplus(ag::linear(xn, w.w_dt, w.b_dt));
    const ag::Var b = ag::matmul(xn, w.w_b);
    const ag::Var c = ag::matmul(xn, w.w_c);
    const ag::Var a = ag::neg(ag::vexp(w.a_log));
    const ag::Var y = ssm::selective_scan(xn, dt, b, c, a, w.d_skip, mode);
    const ag::Var gate = ag::sigmoid(ag::linear(xn, w.w_gate, w.b_gate));
    return ag::add(x, ag::linear(ag::mul(y, gate), w.w_out, w.b_out));
}

ag::Var patch_merge(const ag::Var& x, std::size_t grid_h, std::size_t grid_w,
                    const PatchMergeWeights& w) {
    if (x->value.extent(0) != grid_h * grid_w) {
        throw DimensionError("patch_merge: token count disagrees with grid");
    }
    if (grid_h % 2 != 0 || grid_w % 2 != 0) {
        throw DimensionError("patch_merge: grid extents must be even");
    }
    const std::size_t oh = grid_h / 2, ow = grid_w / 2;
    std::vector<std::size_t> i00, i01, i10, i11;
    i00.reserve(oh * ow);
    for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
            i00.push_back((2 * i) * grid_w + 2 * j);
            i01.push_back((2 * i) * grid_w + 2 * j + 1);
            i10.push_back((2 * i + 1) * grid_w + 2 * j);
            i11.push_back((2 * i + 1) * grid_w + 2 * j + 1);
        }
    }
    const ag::Var cat = ag::concat_cols(
        ag::concat_cols(ag::gather_rows(x, i00), ag::gather_rows(x, i01)),
        ag::concat_cols(ag::gather_rows(x, i10), ag::gather_rows(x, i11)));
    return ag::linear(cat, w.w, w.b);
}

namespace {

SelectiveBlockWeights init_block(ParamRegistry& reg, const std::string& prefix,
                                 std::size_t d, std::size_t n, Rng& rng) {
    SelectiveBlockWeights w;
    w.norm_gain = reg.add(prefix + ".norm_gain", Tensor::full({d}, 1.0));
    w.w_dt = reg.add(prefix + ".w_dt", xavier_uniform(d, d, {d, d}, rng));
    // Bias so the initial step sizes land log-uniform in [0.01, 0.1].
    Tensor bdt({d});
    for (std::size_t i = 0; i < d; ++i) {
        const double dt0 = std::exp(rng.uniform(std::log(0.01), std::log(0.1)));
        bdt[i] = std::log(std::expm1(dt0));
    }
    w.b_dt = reg.add(prefix + ".b_dt", std::move(bdt));
    w.w_b = reg.add(prefix + ".w_b", xavier_uniform(d, n, {d, n}, rng));
    w.w_c = reg.add(prefix + ".w_c", xavier_uniform(d, n, {d, n}, rng));
    Tensor alog({n});
    for (std::size_t s = 0; s < n; ++s) alog[s] = std::log(static_cast<double>(s + 1));
    w.a_log = reg.add(prefix + ".a_log", std::move(alog));
    w.d_skip = reg.add(prefix + ".d_skip", Tensor::full({d}, 1.0));
    w.w_gate = reg.add(prefix + ".w_gate", xavier_uniform(d, d, {d, d}, rng));
    w.b_gate = reg.add(prefix + ".b_gate", Tensor({d}));
    w.w_out = reg.add(prefix + ".w_out", xavier_uniform(d, d, {d, d}, rng));
    w.b_out = reg.add(prefix + ".b_out", Tensor({d}));
    return w;
}

PatchMergeWeights init_merge(ParamRegistry& reg, const std::string& prefix, std::size_t d,
                             Rng& rng) {
    PatchMergeWeights w;
    w.w = reg.add(prefix + ".w", xavier_uniform(4 * d, d, {4 * d, d}, rng));
    w.b = reg.add(prefix + ".b", Tensor({d}));
    return w;
}

} // namespace

BackboneWeights init_backbone(ParamRegistry& reg, const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneWeights w;
    const std::size_t d_patch = cfg.in_channels * cfg.patch * cfg.patch;
    w.w_embed = reg.add("backbone.embed.w",
                        xavier_uniform(d_patch, cfg.d_model, {d_patch, cfg.d_model}, rng));
    w.b_embed = reg.add("backbone.embed.b", Tensor({cfg.d_model}));
    for (std::size_t s = 0; s < 3; ++s) {
        auto* stage = s == 0 ? &w.stage1 : (s == 1 ? &w.stage2 : &w.stage3);
        for (std::size_t i = 0; i < cfg.blocks_per_stage; ++i) {
            stage->push_back(init_block(reg,
                                        "backbone.stage" + std::to_string(s + 1) + ".block" +
                                            std::to_string(i),
                                        cfg.d_model, cfg.d_state, rng));
        }
    }
    w.merge1 = init_merge(reg, "backbone.merge1", cfg.d_model, rng);
    w.merge2 = init_merge(reg, "backbone.merge2", cfg.d_model, rng);
    return w;
}

PyramidTokens extract_pyramid_tokens(const ag::Var& image, const BackboneWeights& w,
                                     const BackboneConfig& cfg, ssm::ScanMode mode) {
    cfg.validate();
    const Tensor& img = image->value;
    if (img.rank() != 3 || img.extent(0) != cfg.in_channels) {
        throw DimensionError("extract_pyramid: image must be [c,h,w] with configured channels");
    }
    const std::size_t h = img.extent(1), wd = img.extent(2);
    const std::size_t unit = 4 * cfg.patch;
    if (h % unit != 0 || wd % unit != 0 || h == 0 || wd == 0) {
        throw DimensionError("extract_pyramid: image extents must be multiples of " +
                             std::to_string(unit));
    }
    PyramidTokens p;
    p.h8 = h / cfg.patch;
    p.w8 = wd / cfg.patch;
    p.h16 = p.h8 / 2;
    p.w16 = p.w8 / 2;
    p.h32 = p.h16 / 2;
    p.w32 = p.w16 / 2;

    ag::Var x = ag::linear(patchify(image, cfg.patch), w.w_embed, w.b_embed);
    for (const auto& blk : w.stage1) x = selective_block(x, blk, mode);
    p.l8 = x;
    x = patch_merge(x, p.h8, p.w8, w.merge1);
    for (const auto& blk : w.stage2) x = selective_block(x, blk, mode);
    p.l16 = x;
    x = patch_merge(x, p.h16, p.w16, w.merge2);
    for (const auto& blk : w.stage3) x = selective_block(x, blk, mode);
    p.l32 = x;
    return p;
}

ag::Var tokens_to_chw(const ag::Var& tokens, std::size_t h, std::size_t w) {
    const std::size_t d = tokens->value.extent(1);
    return ag::reshape(ag::transpose(tokens), {d, h, w});
}

ag::Var chw_to_tokens(const ag::Var& chw) {
    const std::size_t c = chw->value.extent(0);
    const std::size_t hw = chw->value.extent(1) * chw->value.extent(2);
    return ag::transpose(ag::reshape(chw, {c, hw}));
}

FeaturePyramid extract_pyramid(const Tensor& image, const BackboneWeights& w,
                               const BackboneConfig& cfg, ssm::ScanMode mode) {
    ag::NoGradGuard ng;
    const PyramidTokens p = extract_pyramid_tokens(ag::constant(image), w, cfg, mode);
    FeaturePyramid out;
    out.level8 = tokens_to_chw(p.l8, p.h8, p.w8)->value;
    out.level16 = tokens_to_chw(p.l16, p.h16, p.w16)->value;
    out.level32 = tokens_to_chw(p.l32, p.h32, p.w32)->value;
    out.level8.require_finite("pyramid level8");
    out.level16.require_finite("pyramid level16");
    out.level32.require_finite("pyramid level32");
    return out;
}

} // namespace kpdet::bb
