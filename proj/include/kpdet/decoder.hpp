#pragma once

#include <optional>
#include <vector>

#include "kpdet/autograd.hpp"
#include "kpdet/encoder.hpp"
#include "kpdet/keypoint.hpp"
#include "kpdet/params.hpp"

namespace kpdet::dec {

struct DecoderLayerWeights {
    enc::MhsaWeights self_attn;
    enc::MhsaWeights cross_attn;
    ag::Var ffn_norm_gain;
    ag::Var w1, b1, w2, b2;
};

std::vector<DecoderLayerWeights> init_decoder(ParamRegistry& reg, std::size_t layers,
                                              std::size_t d, std::size_t heads,
                                              std::size_t ffn_hidden, Rng& rng);

/// Stacked self-attention + cross-attention + feed-forward layers over the
/// query rows, each with a residual connection. layers = 0 is the identity.
/// `mem_pos`, when given, is added to the cross-attention keys.
ag::Var decode_tokens(const ag::Var& queries, const ag::Var& memory,
                      const std::vector<DecoderLayerWeights>& layers,
                      const Tensor* mem_pos = nullptr);

/// One keypoint hypothesis.
struct Detection {
    int class_id = 0;
    double x = 0.0, y = 0.0;      // normalized [0,1]
    double confidence = 0.0;      // [0,1]
    double sigma_x = 0.0, sigma_y = 0.0;  // predicted residual scale, > 0
};

/// Expected coordinate of the softmax-normalized response map on the unit
/// square (cell centers at ((j+0.5)/wf, (i+0.5)/hf)). Differentiable and
/// upsampling-free.
std::pair<double, double> soft_argmax(const Tensor& response);
/// Row-wise variant: resp [k, hf*wf] -> coords [k, 2] (x then y).
ag::Var soft_argmax_rows(const ag::Var& resp, std::size_t hf, std::size_t wf);

/// Negative log-likelihood of the residual under a Laplace base density with
/// the sigma normalization term, summed over both axes:
/// per axis, log(2*sigma) + |gt - pred| / sigma.
double rle_loss(double pred_x, double pred_y, double sigma_x, double sigma_y,
                double gt_x, double gt_y);

/// (1/2n) * sum (p_j - q_j)^2 over two aligned 2n-vectors.
double mse_loss(const Tensor& p_hat, const Tensor& q_hat);

struct HeadWeights {
    ag::Var w_cls, b_cls;  // [d, C+1] with background as the last class
    ag::Var w_sig, b_sig;  // [d, 2]
    ag::Var w_resp;        // [d, d]
};

HeadWeights init_head(ParamRegistry& reg, std::size_t d, std::size_t num_classes, Rng& rng);

struct HeadOutputs {
    ag::Var cls_logits;  // [k, C+1]
    ag::Var coords;      // [k, 2] normalized (x, y)
    ag::Var sigma;       // [k, 2] > 0
};

/// Response maps are dot products between (projected) query features and the
/// fused stride-8 level; coordinates come from soft-argmax over those maps.
HeadOutputs head_forward(const ag::Var& queries, const ag::Var& f8, std::size_t h8,
                         std::size_t w8, const HeadWeights& w);

struct LossWeights {
    double mse = 1.0, rle = 1.0, cls = 1.0, iou = 1.0;
    double gt_box_size = 0.08;  // nominal normalized box around a gt keypoint
};

struct LossReport {
    double total = 0.0;
    double mse_term = 0.0, rle_term = 0.0, class_term = 0.0, iou_term = 0.0;
    std::size_t matched = 0;
};

/// Minimum-cost one-to-one assignment: cost [n_gt, n_q] with n_gt <= n_q;
/// returns the matched query index per ground truth. Jonker-style shortest
/// augmenting paths, optimal for all sizes.
std::vector<int> optimal_assignment(const Tensor& cost);

struct MatchedLoss {
    ag::Var total;
    LossReport report;
    std::vector<int> assignment;  // query index per gt
};

/// Matches queries to ground-truth keypoints by class-probability +
/// coordinate-distance cost and assembles the supervised terms:
/// coordinate MSE, Laplace RLE, class cross-entropy over all queries
/// (unmatched -> background), and box-quality regression of the score
/// toward iou(predicted box, gt box). `frozen_assignment` bypasses the
/// matching (used by finite-difference checks to fix the discrete choice).
MatchedLoss match_and_supervise_tokens(const ag::Var& cls_logits, const ag::Var& coords,
                                       const ag::Var& sigma, const ag::Var& boxes,
                                       const ag::Var& scores,
                                       const std::vector<Keypoint>& gts,
                                       const LossWeights& w,
                                       const std::vector<int>* frozen_assignment = nullptr);

/// Per-query prediction record for the value-level loss surface.
struct QueryPrediction {
    std::vector<double> class_probs;  // size C+1, background last
    double x = 0, y = 0;
    double sigma_x = 0.1, sigma_y = 0.1;
    enc::Box box;
    double score = 0;
};

LossReport match_and_supervise(const std::vector<QueryPrediction>& preds,
                               const std::vector<Keypoint>& gts, const LossWeights& w);

} // namespace kpdet::dec
