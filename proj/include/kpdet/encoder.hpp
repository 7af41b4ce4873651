#pragma once

#include <vector>

#include "kpdet/autograd.hpp"
#include "kpdet/backbone.hpp"
#include "kpdet/params.hpp"

namespace kpdet::enc {

/// Axis-aligned box, center/size form, normalized to the unit square.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;
    Box clamped() const;
};

/// Intersection area over union area. Zero when the union is degenerate
/// (both boxes have zero area).
double iou(const Box& a, const Box& b);

/// 2-D sinusoidal positional encoding over a grid, [H*W, d]; d % 4 == 0.
Tensor sinusoidal_pos_2d(std::size_t grid_h, std::size_t grid_w, std::size_t d);

struct MhsaWeights {
    std::size_t heads = 4;
    ag::Var norm_gain;
    ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
};

MhsaWeights init_mhsa(ParamRegistry& reg, const std::string& prefix, std::size_t d,
                      std::size_t heads, Rng& rng);

/// Multi-head attention sub-layer (pre-norm on the query stream, projection
/// back to d; no residual — callers add it). Positional encodings, when
/// given, are added to the query/key inputs only. `attn_probs_out`, when
/// non-null, receives the concatenated per-head attention rows
/// [heads * Tq, Tk].
ag::Var attention(const ag::Var& q_tokens, const ag::Var& kv_tokens, const MhsaWeights& w,
                  const Tensor* q_pos, const Tensor* k_pos,
                  Tensor* attn_probs_out = nullptr);

/// Intra-scale self-attention with 2-D sinusoidal positions and a residual
/// connection; applied to the stride-32 level only. Shape preserved.
ag::Var intra_scale_attention_tokens(const ag::Var& level32, std::size_t h, std::size_t w,
                                     const MhsaWeights& weights, Tensor* attn_probs_out = nullptr);
/// Value-level variant on a [c,h,w] map.
Tensor intra_scale_attention(const Tensor& level32, const MhsaWeights& weights,
                             Tensor* attn_probs_out = nullptr);

/// Nearest-neighbour 2x upsample / 2x2 average pool on token rasters.
ag::Var upsample2_tokens(const ag::Var& x, std::size_t h, std::size_t w);
ag::Var avgpool2_tokens(const ag::Var& x, std::size_t h, std::size_t w);

struct FuseWeights {
    ag::Var w;  // [2d, d]
    ag::Var b;  // [d]
};

struct CrossScaleFuseWeights {
    FuseWeights td16, td8;  // top-down: into 16, then into 8
    FuseWeights bu16, bu32; // bottom-up: into 16, then into 32
};

CrossScaleFuseWeights init_cross_scale_fuse(ParamRegistry& reg, const std::string& prefix,
                                            std::size_t d, Rng& rng);

/// Top-down then bottom-up pathway over adjacent levels: resample x2,
/// concatenate, linear fuse. Per-level shapes are preserved.
bb::PyramidTokens cross_scale_fuse_tokens(const bb::PyramidTokens& p,
                                          const CrossScaleFuseWeights& w);

/// Encoded feature pyramid; per-level shapes match the input pyramid.
struct EncodedPyramid {
    Tensor level8, level16, level32;
};

struct QuerySelectorWeights {
    ag::Var w_box, b_box;      // [d,4], [4]
    ag::Var w_score, b_score;  // [d,1], [1]
};

QuerySelectorWeights init_query_selector(ParamRegistry& reg, const std::string& prefix,
                                         std::size_t d, Rng& rng);

/// Logit-space box anchors per flattened pyramid token (cell centers with a
/// level-dependent nominal size).
Tensor pyramid_anchors(const bb::PyramidTokens& p);

struct QuerySet {
    std::vector<std::size_t> indices;  // into the flattened token list, score-descending
    Tensor features;                   // [k, d]
    Tensor boxes;                      // [k, 4] cx,cy,w,h
    Tensor scores;                     // [k]
};

struct SelectedQueries {
    std::vector<std::size_t> indices;
    ag::Var features;  // [k, d]
    ag::Var boxes;     // [k, 4]
    ag::Var scores;    // [k, 1]
    ag::Var all_boxes;   // [T, 4] over every token
    ag::Var all_scores;  // [T, 1]
};

/// Auxiliary head over all tokens: per-token box + quality score, then the
/// top-k tokens by score (ties broken by lower token index) become decoder
/// queries. During training the score target is iou(predicted box, matched
/// ground-truth box). `forced_indices` bypasses the ranking (finite-difference
/// checks freeze the selection to keep the loss smooth).
SelectedQueries select_queries_tokens(const ag::Var& tokens, const Tensor& anchors,
                                      const QuerySelectorWeights& w, std::size_t k,
                                      const std::vector<std::size_t>* forced_indices = nullptr);

/// Value-level spec surface over an encoded pyramid (tokens flattened in
/// level order 8, 16, 32; raster order within a level).
QuerySet select_queries(const EncodedPyramid& enc, const QuerySelectorWeights& w,
                        std::size_t k);

} // namespace kpdet::enc
