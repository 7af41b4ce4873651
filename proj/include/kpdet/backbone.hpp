#pragma once

#include <vector>

#include "kpdet/autograd.hpp"
#include "kpdet/params.hpp"
#include "kpdet/ssm.hpp"
#include "kpdet/tensor.hpp"

namespace kpdet::bb {

struct BackboneConfig {
    std::size_t in_channels = 1;
    std::size_t patch = 8;          // stage-1 patch size; strides are patch * {1,2,4}
    std::size_t d_model = 64;
    std::size_t d_state = 16;
    std::size_t blocks_per_stage = 2;
    void validate() const;
};

/// Three-level feature maps at strides patch, 2*patch, 4*patch of the input
/// (8/16/32 at the default patch size). Channel-first [c, h/s, w/s].
struct FeaturePyramid {
    Tensor level8, level16, level32;
};

/// Flattens non-overlapping patches in raster order:
/// [c,h,w] -> [ (h/p)*(w/p), c*p*p ].
Tensor serialize_patches(const Tensor& image, std::size_t patch);
/// Exact inverse of serialize_patches.
Tensor deserialize_patches(const Tensor& tokens, std::size_t c, std::size_t h, std::size_t w,
                           std::size_t patch);
ag::Var patchify(const ag::Var& image, std::size_t patch);

struct SelectiveBlockWeights {
    ag::Var norm_gain;       // [d]
    ag::Var w_dt, b_dt;      // [d,d], [d]; per-timestep step size (softplus)
    ag::Var w_b;             // [d,n]
    ag::Var w_c;             // [d,n]
    ag::Var a_log;           // [n]; A = -exp(a_log), negative by construction
    ag::Var d_skip;          // [d]
    ag::Var w_gate, b_gate;  // [d,d], [d]
    ag::Var w_out, b_out;    // [d,d], [d]
};

/// Pre-normalized selective SSM block with input-dependent dt/B/C, a gated
/// scan output and a residual connection. x: [T, d].
ag::Var selective_block(const ag::Var& x, const SelectiveBlockWeights& w, ssm::ScanMode mode);

struct PatchMergeWeights {
    ag::Var w;  // [4d, d]
    ag::Var b;  // [d]
};

/// 2x2 token merge on a [grid_h * grid_w, d] raster: concatenates each 2x2
/// neighborhood and projects back to d. Halves both grid extents.
ag::Var patch_merge(const ag::Var& x, std::size_t grid_h, std::size_t grid_w,
                    const PatchMergeWeights& w);

struct BackboneWeights {
    ag::Var w_embed, b_embed;
    std::vector<SelectiveBlockWeights> stage1, stage2, stage3;
    PatchMergeWeights merge1, merge2;
};

BackboneWeights init_backbone(ParamRegistry& reg, const BackboneConfig& cfg, Rng& rng);

/// Token-layout pyramid with grid extents, used on the training tape.
struct PyramidTokens {
    ag::Var l8, l16, l32;  // [H*W, d] per level
    std::size_t h8, w8, h16, w16, h32, w32;
};

PyramidTokens extract_pyramid_tokens(const ag::Var& image, const BackboneWeights& w,
                                     const BackboneConfig& cfg, ssm::ScanMode mode);

/// Value-level pyramid extraction, channel-first output per level.
/// Input extents must be multiples of 4*patch (32 at the default patch).
FeaturePyramid extract_pyramid(const Tensor& image, const BackboneWeights& w,
                               const BackboneConfig& cfg, ssm::ScanMode mode);

/// [H*W, d] tokens -> [d, H, W] feature map (and back), on the tape.
ag::Var tokens_to_chw(const ag::Var& tokens, std::size_t h, std::size_t w);
ag::Var chw_to_tokens(const ag::Var& chw);

} // namespace kpdet::bb
