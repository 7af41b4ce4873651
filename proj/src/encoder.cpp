#include "kpdet/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kpdet::enc {

Box Box::clamped() const {
    auto clamp01 = [](double v) { return std::min(1.0, std::max(0.0, v)); };
    Box b;
    b.w = std::max(0.0, w);
    b.h = std::max(0.0, h);
    b.cx = clamp01(cx);
    b.cy = clamp01(cy);
    return b;
}

double iou(const Box& a, const Box& b) {
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
    const double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
    const double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

Tensor sinusoidal_pos_2d(std::size_t grid_h, std::size_t grid_w, std::size_t d) {
    if (d % 4 != 0) throw ParameterError("positional encoding needs d % 4 == 0");
    const std::size_t quarter = d / 4;
    Tensor pe({grid_h * grid_w, d});
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < grid_h; ++i) {
        for (std::size_t j = 0; j < grid_w; ++j) {
            const std::size_t tok = i * grid_w + j;
            const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(grid_h) * two_pi;
            const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(grid_w) * two_pi;
            for (std::size_t f = 0; f < quarter; ++f) {
                const double freq =
                    std::pow(10000.0, -static_cast<double>(f) / static_cast<double>(quarter));
                pe.at(tok, 2 * f) = std::sin(y * freq);
                pe.at(tok, 2 * f + 1) = std::cos(y * freq);
                pe.at(tok, d / 2 + 2 * f) = std::sin(x * freq);
                pe.at(tok, d / 2 + 2 * f + 1) = std::cos(x * freq);
            }
        }
    }
    return pe;
}

MhsaWeights init_mhsa(ParamRegistry& reg, const std::string& prefix, std::size_t d,
                      std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) throw ParameterError("heads must divide d_model");
    MhsaWeights w;
    w.heads = heads;
    w.norm_gain = reg.add(prefix + ".norm_gain", Tensor::full({d}, 1.0));
    w.wq = reg.add(prefix + ".wq", xavier_uniform(d, d, {d, d}, rng));
    w.bq = reg.add(prefix + ".bq", Tensor({d}));
    w.wk = reg.add(prefix + ".wk", xavier_uniform(d, d, {d, d}, rng));
    w.bk = reg.add(prefix + ".bk", Tensor({d}));
    w.wv = reg.add(prefix + ".wv", xavier_uniform(d, d, {d, d}, rng));
    w.bv = reg.add(prefix + ".bv", Tensor({d}));
    w.wo = reg.add(prefix + ".wo", xavier_uniform(d, d, {d, d}, rng));
    w.bo = reg.add(prefix + ".bo", Tensor({d}));
    return w;
}

ag::Var attention(const ag::Var& q_tokens, const ag::Var& kv_tokens, const MhsaWeights& w,
                  const Tensor* q_pos, const Tensor* k_pos, Tensor* attn_probs_out) {
    const std::size_t d = q_tokens->value.extent(1);
    if (kv_tokens->value.extent(1) != d) throw DimensionError("attention: channel mismatch");
    const std::size_t dh = d / w.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    ag::Var qn = ag::rms_norm_rows(q_tokens, w.norm_gain);
    ag::Var kn = kv_tokens;
    ag::Var q_in = q_pos ? ag::add(qn, ag::constant(*q_pos)) : qn;
    ag::Var k_in = k_pos ? ag::add(kn, ag::constant(*k_pos)) : kn;

    const ag::Var q = ag::linear(q_in, w.wq, w.bq);
    const ag::Var k = ag::linear(k_in, w.wk, w.bk);
    const ag::Var v = ag::linear(kv_tokens, w.wv, w.bv);

    if (attn_probs_out) {
        *attn_probs_out = Tensor({w.heads * q->value.extent(0), k->value.extent(0)});
    }
    std::vector<ag::Var> head_outs;
    head_outs.reserve(w.heads);
    for (std::size_t hidx = 0; hidx < w.heads; ++hidx) {
        const ag::Var qh = ag::slice_cols(q, hidx * dh, dh);
        const ag::Var kh = ag::slice_cols(k, hidx * dh, dh);
        const ag::Var vh = ag::slice_cols(v, hidx * dh, dh);
        const ag::Var logits = ag::scale(ag::matmul_nt(qh, kh), inv_sqrt);
        const ag::Var probs = ag::softmax_rows(logits);
        if (attn_probs_out) {
            const std::size_t tq = probs->value.extent(0), tk = probs->value.extent(1);
            for (std::size_t i = 0; i < tq; ++i) {
                for (std::size_t j = 0; j < tk; ++j) {
                    attn_probs_out->at(hidx * tq + i, j) = probs->value.at(i, j);
                }
            }
        }
        head_outs.push_back(ag::matmul(probs, vh));
    }
    ag::Var merged = head_outs[0];
    for (std::size_t hidx = 1; hidx < w.heads; ++hidx) {
        merged = ag::concat_cols(merged, head_outs[hidx]);
    }
    return ag::linear(merged, w.wo, w.bo);
}

ag::Var intra_scale_attention_tokens(const ag::Var& level32, std::size_t h, std::size_t w,
                                     const MhsaWeights& weights, Tensor* attn_probs_out) {
    const Tensor pe = sinusoidal_pos_2d(h, w, level32->value.extent(1));
    return ag::add(level32,
                   attention(level32, level32, weights, &pe, &pe, attn_probs_out));
}

Tensor intra_scale_attention(const Tensor& level32, const MhsaWeights& weights,
                             Tensor* attn_probs_out) {
    if (level32.rank() != 3) throw DimensionError("level32 must be [c,h,w]");
    ag::NoGradGuard ng;
    const std::size_t h = level32.extent(1), w = level32.extent(2);
    const ag::Var tokens = bb::chw_to_tokens(ag::constant(level32));
    const ag::Var out = intra_scale_attention_tokens(tokens, h, w, weights, attn_probs_out);
    return bb::tokens_to_chw(out, h, w)->value;
}

ag::Var upsample2_tokens(const ag::Var& x, std::size_t h, std::size_t w) {
    if (x->value.extent(0) != h * w) throw DimensionError("upsample2: grid mismatch");
    std::vector<std::size_t> idx;
    idx.reserve(4 * h * w);
    for (std::size_t i = 0; i < 2 * h; ++i) {
        for (std::size_t j = 0; j < 2 * w; ++j) idx.push_back((i / 2) * w + (j / 2));
    }
    return ag::gather_rows(x, std::move(idx));
}

ag::Var avgpool2_tokens(const ag::Var& x, std::size_t h, std::size_t w) {
    if (x->value.extent(0) != h * w) throw DimensionError("avgpool2: grid mismatch");
    if (h % 2 != 0 || w % 2 != 0) throw DimensionError("avgpool2: grid extents must be even");
    std::vector<std::size_t> i00, i01, i10, i11;
    for (std::size_t i = 0; i < h / 2; ++i) {
        for (std::size_t j = 0; j < w / 2; ++j) {
            i00.push_back((2 * i) * w + 2 * j);
            i01.push_back((2 * i) * w + 2 * j + 1);
            i10.push_back((2 * i + 1) * w + 2 * j);
            i11.push_back((2 * i + 1) * w + 2 * j + 1);
        }
    }
    const ag::Var sum = ag::add(ag::add(ag::gather_rows(x, i00), ag::gather_rows(x, i01)),
                                ag::add(ag::gather_rows(x, i10), ag::gather_rows(x, i11)));
    return ag::scale(sum, 0.25);
}

CrossScaleFuseWeights init_cross_scale_fuse(ParamRegistry& reg, const std::string& prefix,
                                            std::size_t d, Rng& rng) {
    // Fusion starts near the identity on the level's own features with a
    // small random mixing path from the resampled neighbour.
    auto init_fuse = [&](const std::string& name) {
        FuseWeights f;
        Tensor w({2 * d, d});
        for (std::size_t i = 0; i < d; ++i) w.at(i, i) = 1.0;
        const Tensor mix = xavier_uniform(d, d, {d, d}, rng);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) w.at(d + i, j) = 0.1 * mix.at(i, j);
        }
        f.w = reg.add(prefix + "." + name + ".w", std::move(w));
        f.b = reg.add(prefix + "." + name + ".b", Tensor({d}));
        return f;
    };
    CrossScaleFuseWeights w;
    w.td16 = init_fuse("td16");
    w.td8 = init_fuse("td8");
    w.bu16 = init_fuse("bu16");
    w.bu32 = init_fuse("bu32");
    return w;
}

bb::PyramidTokens cross_scale_fuse_tokens(const bb::PyramidTokens& p,
                                          const CrossScaleFuseWeights& w) {
    auto fuse = [](const ag::Var& own, const ag::Var& other, const FuseWeights& fw) {
        return ag::linear(ag::concat_cols(own, other), fw.w, fw.b);
    };
    bb::PyramidTokens out = p;
    // Top-down: deepest level feeds shallower ones.
    const ag::Var t32 = p.l32;
    const ag::Var t16 = fuse(p.l16, upsample2_tokens(t32, p.h32, p.w32), w.td16);
    const ag::Var t8 = fuse(p.l8, upsample2_tokens(t16, p.h16, p.w16), w.td8);
    // Bottom-up: refined shallow levels flow back down the pyramid.
    const ag::Var b16 = fuse(t16, avgpool2_tokens(t8, p.h8, p.w8), w.bu16);
    const ag::Var b32 = fuse(t32, avgpool2_tokens(b16, p.h16, p.w16), w.bu32);
    out.l8 = t8;
    out.l16 = b16;
    out.l32 = b32;
    return out;
}

QuerySelectorWeights init_query_selector(ParamRegistry& reg, const std::string& prefix,
                                         std::size_t d, Rng& rng) {
    QuerySelectorWeights w;
    w.w_box = reg.add(prefix + ".w_box", xavier_uniform(d, 4, {d, 4}, rng));
    w.b_box = reg.add(prefix + ".b_box", Tensor({4}));
    w.w_score = reg.add(prefix + ".w_score", xavier_uniform(d, 1, {d, 1}, rng));
    w.b_score = reg.add(prefix + ".b_score", Tensor({1}));
    return w;
}

namespace {

double inverse_sigmoid(double p) {
    const double q = std::min(1.0 - 1e-4, std::max(1e-4, p));
    return std::log(q / (1.0 - q));
}

void grid_anchors(Tensor& anchors, std::size_t row0, std::size_t h, std::size_t w,
                  double nominal) {
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t r = row0 + i * w + j;
            anchors.at(r, 0) = inverse_sigmoid((static_cast<double>(j) + 0.5) /
                                               static_cast<double>(w));
            anchors.at(r, 1) = inverse_sigmoid((static_cast<double>(i) + 0.5) /
                                               static_cast<double>(h));
            anchors.at(r, 2) = inverse_sigmoid(nominal);
            anchors.at(r, 3) = inverse_sigmoid(nominal);
        }
    }
}

} // namespace

Tensor pyramid_anchors(const bb::PyramidTokens& p) {
    const std::size_t t8 = p.h8 * p.w8, t16 = p.h16 * p.w16, t32 = p.h32 * p.w32;
    Tensor anchors({t8 + t16 + t32, 4});
    grid_anchors(anchors, 0, p.h8, p.w8, 2.0 / static_cast<double>(p.w8));
    grid_anchors(anchors, t8, p.h16, p.w16, 2.0 / static_cast<double>(p.w16));
    grid_anchors(anchors, t8 + t16, p.h32, p.w32, 2.0 / static_cast<double>(p.w32));
    return anchors;
}

SelectedQueries select_queries_tokens(const ag::Var& tokens, const Tensor& anchors,
                                      const QuerySelectorWeights& w, std::size_t k,
                                      const std::vector<std::size_t>* forced_indices) {
    const std::size_t total = tokens->value.extent(0);
    if (k == 0 || k > total) {
        throw ParameterError("select_queries: k must be in [1, token count]");
    }
    if (anchors.extent(0) != total || anchors.extent(1) != 4) {
        throw DimensionError("select_queries: anchor table shape mismatch");
    }
    SelectedQueries out;
    out.all_boxes = ag::sigmoid(ag::add(ag::linear(tokens, w.w_box, w.b_box),
                                        ag::constant(anchors)));
    out.all_scores = ag::sigmoid(ag::linear(tokens, w.w_score, w.b_score));

    std::vector<std::size_t> order;
    if (forced_indices) {
        if (forced_indices->size() != k) {
            throw ParameterError("select_queries: forced index count differs from k");
        }
        order = *forced_indices;
    } else {
        // Top-k by score; equal scores break toward the lower token index.
        order.resize(total);
        std::iota(order.begin(), order.end(), std::size_t{0});
        const Tensor& sc = out.all_scores->value;
        std::stable_sort(order.begin(), order.end(), [&sc](std::size_t a, std::size_t b) {
            return sc[a] > sc[b];
        });
        order.resize(k);
    }
    out.indices = order;
    out.features = ag::gather_rows(tokens, order);
    out.boxes = ag::gather_rows(out.all_boxes, order);
    out.scores = ag::gather_rows(out.all_scores, order);
    return out;
}

QuerySet select_queries(const EncodedPyramid& enc, const QuerySelectorWeights& w,
                        std::size_t k) {
    ag::NoGradGuard ng;
    bb::PyramidTokens p;
    p.h8 = enc.level8.extent(1);
    p.w8 = enc.level8.extent(2);
    p.h16 = enc.level16.extent(1);
    p.w16 = enc.level16.extent(2);
    p.h32 = enc.level32.extent(1);
    p.w32 = enc.level32.extent(2);
    p.l8 = bb::chw_to_tokens(ag::constant(enc.level8));
    p.l16 = bb::chw_to_tokens(ag::constant(enc.level16));
    p.l32 = bb::chw_to_tokens(ag::constant(enc.level32));
    const ag::Var tokens = ag::concat_rows({p.l8, p.l16, p.l32});
    const SelectedQueries sel = select_queries_tokens(tokens, pyramid_anchors(p), w, k);

    QuerySet qs;
    qs.indices = sel.indices;
    qs.features = sel.features->value;
    qs.boxes = sel.boxes->value;
    qs.scores = Tensor({k});
    for (std::size_t i = 0; i < k; ++i) qs.scores[i] = sel.scores->value[i];
    return qs;
}

} // namespace kpdet::enc
