#include "kpdet/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace kpdet::dec {

std::vector<DecoderLayerWeights> init_decoder(ParamRegistry& reg, std::size_t layers,
                                              std::size_t d, std::size_t heads,
                                              std::size_t ffn_hidden, Rng& rng) {
    std::vector<DecoderLayerWeights> out;
    out.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string prefix = "decoder.layer" + std::to_string(l);
        DecoderLayerWeights w;
        w.self_attn = enc::init_mhsa(reg, prefix + ".self", d, heads, rng);
        w.cross_attn = enc::init_mhsa(reg, prefix + ".cross", d, heads, rng);
        w.ffn_norm_gain = reg.add(prefix + ".ffn.norm_gain", Tensor::full({d}, 1.0));
        w.w1 = reg.add(prefix + ".ffn.w1", xavier_uniform(d, ffn_hidden, {d, ffn_hidden}, rng));
        w.b1 = reg.add(prefix + ".ffn.b1", Tensor({ffn_hidden}));
        w.w2 = reg.add(prefix + ".ffn.w2", xavier_uniform(ffn_hidden, d, {ffn_hidden, d}, rng));
        w.b2 = reg.add(prefix + ".ffn.b2", Tensor({d}));
        out.push_back(std::move(w));
    }
    return out;
}

ag::Var decode_tokens(const ag::Var& queries, const ag::Var& memory,
                      const std::vector<DecoderLayerWeights>& layers, const Tensor* mem_pos) {
    ag::Var q = queries;
    for (const auto& w : layers) {
        q = ag::add(q, enc::attention(q, q, w.self_attn, nullptr, nullptr));
        q = ag::add(q, enc::attention(q, memory, w.cross_attn, nullptr, mem_pos));
        const ag::Var qn = ag::rms_norm_rows(q, w.ffn_norm_gain);
        q = ag::add(q, ag::linear(ag::silu(ag::linear(qn, w.w1, w.b1)), w.w2, w.b2));
    }
    return q;
}

std::pair<double, double> soft_argmax(const Tensor& response) {
    if (response.rank() != 2) throw DimensionError("soft_argmax expects [hf, wf]");
    response.require_finite("soft_argmax response");
    const std::size_t hf = response.extent(0), wf = response.extent(1);
    double mx = response[0];
    for (std::size_t i = 1; i < response.size(); ++i) mx = std::max(mx, response[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < response.size(); ++i) sum += std::exp(response[i] - mx);
    double x = 0.0, y = 0.0;
    for (std::size_t i = 0; i < hf; ++i) {
        for (std::size_t j = 0; j < wf; ++j) {
            const double p = std::exp(response.at(i, j) - mx) / sum;
            x += p * (static_cast<double>(j) + 0.5) / static_cast<double>(wf);
            y += p * (static_cast<double>(i) + 0.5) / static_cast<double>(hf);
        }
    }
    return {x, y};
}

ag::Var soft_argmax_rows(const ag::Var& resp, std::size_t hf, std::size_t wf) {
    if (resp->value.extent(1) != hf * wf) {
        throw DimensionError("soft_argmax_rows: response width must be hf*wf");
    }
    Tensor cells({hf * wf, 2});
    for (std::size_t i = 0; i < hf; ++i) {
        for (std::size_t j = 0; j < wf; ++j) {
            cells.at(i * wf + j, 0) = (static_cast<double>(j) + 0.5) / static_cast<double>(wf);
            cells.at(i * wf + j, 1) = (static_cast<double>(i) + 0.5) / static_cast<double>(hf);
        }
    }
    return ag::matmul(ag::softmax_rows(resp), ag::constant(std::move(cells)));
}

double rle_loss(double pred_x, double pred_y, double sigma_x, double sigma_y, double gt_x,
                double gt_y) {
    if (!(sigma_x > 0.0) || !(sigma_y > 0.0)) {
        throw ParameterError("rle_loss requires sigma > 0");
    }
    return std::log(2.0 * sigma_x) + std::fabs(gt_x - pred_x) / sigma_x +
           std::log(2.0 * sigma_y) + std::fabs(gt_y - pred_y) / sigma_y;
}

double mse_loss(const Tensor& p_hat, const Tensor& q_hat) {
    if (p_hat.size() != q_hat.size()) throw DimensionError("mse_loss: length mismatch");
    if (p_hat.size() == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < p_hat.size(); ++i) {
        const double diff = p_hat[i] - q_hat[i];
        acc += diff * diff;
    }
    return acc / static_cast<double>(p_hat.size());
}

HeadWeights init_head(ParamRegistry& reg, std::size_t d, std::size_t num_classes, Rng& rng) {
    HeadWeights w;
    w.w_cls = reg.add("head.w_cls",
                      xavier_uniform(d, num_classes + 1, {d, num_classes + 1}, rng));
    w.b_cls = reg.add("head.b_cls", Tensor({num_classes + 1}));
    w.w_sig = reg.add("head.w_sig", xavier_uniform(d, 2, {d, 2}, rng));
    // Start the residual scales around 0.15 on the unit square.
    w.b_sig = reg.add("head.b_sig", Tensor::full({2}, std::log(std::expm1(0.15))));
    w.w_resp = reg.add("head.w_resp", xavier_uniform(d, d, {d, d}, rng));
    return w;
}

HeadOutputs head_forward(const ag::Var& queries, const ag::Var& f8, std::size_t h8,
                         std::size_t w8, const HeadWeights& w) {
    const std::size_t d = queries->value.extent(1);
    HeadOutputs out;
    out.cls_logits = ag::linear(queries, w.w_cls, w.b_cls);
    out.sigma = ag::add_scalar(ag::softplus(ag::linear(queries, w.w_sig, w.b_sig)), 1e-4);
    const ag::Var resp = ag::scale(ag::matmul_nt(ag::matmul(queries, w.w_resp), f8),
                                   1.0 / std::sqrt(static_cast<double>(d)));
    out.coords = soft_argmax_rows(resp, h8, w8);
    return out;
}

std::vector<int> optimal_assignment(const Tensor& cost) {
    if (cost.rank() != 2) throw DimensionError("optimal_assignment expects [n_gt, n_q]");
    const std::size_t n = cost.extent(0), m = cost.extent(1);
    if (n == 0) return {};
    if (n > m) throw DimensionError("optimal_assignment requires n_gt <= n_q");
    const double kInf = 1e100;
    // Shortest-augmenting-path assignment with potentials (1-indexed).
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = static_cast<int>(i);
        int j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = kInf;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost.at(static_cast<std::size_t>(i0 - 1), j - 1) -
                                   u[static_cast<std::size_t>(i0)] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = static_cast<int>(j);
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[static_cast<std::size_t>(p[j])] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> ans(n, -1);
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] > 0) ans[static_cast<std::size_t>(p[j] - 1)] = static_cast<int>(j - 1);
    }
    return ans;
}

MatchedLoss match_and_supervise_tokens(const ag::Var& cls_logits, const ag::Var& coords,
                                       const ag::Var& sigma, const ag::Var& boxes,
                                       const ag::Var& scores, const std::vector<Keypoint>& gts,
                                       const LossWeights& w,
                                       const std::vector<int>* frozen_assignment) {
    const std::size_t n_q = cls_logits->value.extent(0);
    const std::size_t n_cls = cls_logits->value.extent(1);  // real classes + background
    const std::size_t n_gt = gts.size();
    if (n_gt > n_q) throw ParameterError("more ground truths than queries");
    for (const Keypoint& g : gts) {
        if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= n_cls - 1) {
            throw ParameterError("ground-truth class id out of range");
        }
    }

    MatchedLoss out;
    if (frozen_assignment) {
        if (frozen_assignment->size() != n_gt) {
            throw ParameterError("frozen assignment size mismatch");
        }
        out.assignment = *frozen_assignment;
    } else if (n_gt > 0) {
        const Tensor probs = kpdet::softmax(cls_logits->value, 1);
        Tensor cost({n_gt, n_q});
        for (std::size_t g = 0; g < n_gt; ++g) {
            for (std::size_t q = 0; q < n_q; ++q) {
                const double dx = coords->value.at(q, 0) - gts[g].x;
                const double dy = coords->value.at(q, 1) - gts[g].y;
                cost.at(g, q) = (1.0 - probs.at(q, static_cast<std::size_t>(gts[g].class_id))) +
                                std::sqrt(dx * dx + dy * dy);
            }
        }
        out.assignment = optimal_assignment(cost);
    }

    std::vector<int> targets(n_q, static_cast<int>(n_cls - 1));  // background
    std::vector<std::size_t> matched;
    matched.reserve(n_gt);
    for (std::size_t g = 0; g < n_gt; ++g) {
        const int q = out.assignment[g];
        if (q < 0 || static_cast<std::size_t>(q) >= n_q) {
            throw ParameterError("assignment index out of range");
        }
        targets[static_cast<std::size_t>(q)] = gts[g].class_id;
        matched.push_back(static_cast<std::size_t>(q));
    }

    const ag::Var class_term = ag::cross_entropy_rows(cls_logits, targets);
    ag::Var mse_term, rle_term, iou_term;
    if (n_gt > 0) {
        Tensor gt_xy({n_gt, 2});
        Tensor gt_box({n_gt, 4});
        for (std::size_t g = 0; g < n_gt; ++g) {
            gt_xy.at(g, 0) = gts[g].x;
            gt_xy.at(g, 1) = gts[g].y;
            gt_box.at(g, 0) = gts[g].x;
            gt_box.at(g, 1) = gts[g].y;
            gt_box.at(g, 2) = w.gt_box_size;
            gt_box.at(g, 3) = w.gt_box_size;
        }
        const ag::Var m_coords = ag::gather_rows(coords, matched);
        const ag::Var m_sigma = ag::gather_rows(sigma, matched);
        const ag::Var m_boxes = ag::gather_rows(boxes, matched);
        const ag::Var m_scores = ag::gather_rows(scores, matched);

        const ag::Var diff = ag::sub(m_coords, ag::constant(gt_xy));
        mse_term = ag::mean_all(ag::square(diff));  // (1/2n) sum over the 2n coordinates
        rle_term = ag::sum_all(ag::add(ag::vlog(ag::scale(m_sigma, 2.0)),
                                       ag::vdiv(ag::vabs(diff), m_sigma)));

        // Quality score regresses toward the measured IoU (a fixed target);
        // the box itself gets a coordinate pull toward the gt box.
        Tensor iou_target({n_gt, 1});
        for (std::size_t g = 0; g < n_gt; ++g) {
            const enc::Box pb{m_boxes->value.at(g, 0), m_boxes->value.at(g, 1),
                              m_boxes->value.at(g, 2), m_boxes->value.at(g, 3)};
            const enc::Box gb{gt_box.at(g, 0), gt_box.at(g, 1), gt_box.at(g, 2),
                              gt_box.at(g, 3)};
            iou_target.at(g, 0) = enc::iou(pb, gb);
        }
        const double inv_n = 1.0 / static_cast<double>(n_gt);
        const ag::Var quality =
            ag::scale(ag::sum_all(ag::square(ag::sub(m_scores, ag::constant(iou_target)))),
                      inv_n);
        const ag::Var box_reg =
            ag::scale(ag::sum_all(ag::square(ag::sub(m_boxes, ag::constant(gt_box)))), inv_n);
        iou_term = ag::add(quality, box_reg);
    } else {
        mse_term = ag::constant(Tensor::scalar(0.0));
        rle_term = ag::constant(Tensor::scalar(0.0));
        iou_term = ag::constant(Tensor::scalar(0.0));
    }

    out.total = ag::add(ag::add(ag::scale(mse_term, w.mse), ag::scale(rle_term, w.rle)),
                        ag::add(ag::scale(class_term, w.cls), ag::scale(iou_term, w.iou)));
    out.report.total = out.total->value[0];
    out.report.mse_term = mse_term->value[0];
    out.report.rle_term = rle_term->value[0];
    out.report.class_term = class_term->value[0];
    out.report.iou_term = iou_term->value[0];
    out.report.matched = n_gt;
    return out;
}

LossReport match_and_supervise(const std::vector<QueryPrediction>& preds,
                               const std::vector<Keypoint>& gts, const LossWeights& w) {
    if (preds.empty()) throw ParameterError("match_and_supervise: no query predictions");
    const std::size_t k = preds.size();
    const std::size_t n_cls = preds[0].class_probs.size();
    Tensor logits({k, n_cls}), coords({k, 2}), sigma({k, 2}), boxes({k, 4}), scores({k, 1});
    for (std::size_t q = 0; q < k; ++q) {
        const QueryPrediction& p = preds[q];
        if (p.class_probs.size() != n_cls) {
            throw DimensionError("match_and_supervise: ragged class_probs");
        }
        if (!(p.sigma_x > 0.0) || !(p.sigma_y > 0.0)) {
            throw ParameterError("match_and_supervise requires sigma > 0");
        }
        for (std::size_t c = 0; c < n_cls; ++c) {
            logits.at(q, c) = std::log(std::max(p.class_probs[c], 1e-300));
        }
        coords.at(q, 0) = p.x;
        coords.at(q, 1) = p.y;
        sigma.at(q, 0) = p.sigma_x;
        sigma.at(q, 1) = p.sigma_y;
        boxes.at(q, 0) = p.box.cx;
        boxes.at(q, 1) = p.box.cy;
        boxes.at(q, 2) = p.box.w;
        boxes.at(q, 3) = p.box.h;
        scores.at(q, 0) = p.score;
    }
    ag::NoGradGuard ng;
    return match_and_supervise_tokens(ag::constant(std::move(logits)),
                                      ag::constant(std::move(coords)),
                                      ag::constant(std::move(sigma)),
                                      ag::constant(std::move(boxes)),
                                      ag::constant(std::move(scores)), gts, w)
        .report;
}

} // namespace kpdet::dec
