#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kpdet/decoder.hpp"
#include "kpdet/synthetic.hpp"
#include "kpdet/tensor.hpp"

namespace kpdet::metrics {

struct PointPx {
    double x = 0, y = 0;
};

/// Mean Euclidean pixel distance over index-aligned point lists.
double epe(const std::vector<PointPx>& pred, const std::vector<PointPx>& gt);

/// Fraction of keypoints within alpha * max(h, w) pixels of ground truth.
double pck(const std::vector<PointPx>& pred, const std::vector<PointPx>& gt, double alpha,
           std::size_t h, std::size_t w);

using Predictor = std::function<std::vector<dec::Detection>(const Tensor& image)>;

struct BenchResult {
    double t_avg_ms = 0;
    double t_std_ms = 0;
    double throughput_per_s = 0;  // 1 / t_avg, exactly
    int iters = 0;
};

/// Single-image latency: `warmup` untimed iterations, then `iters` timed
/// ones cycling through `images` (monotonic clock, single thread).
BenchResult benchmark(const Predictor& predict, const std::vector<Tensor>& images, int warmup,
                      int iters);

struct MetricsReport {
    double epe_px = 0;
    std::map<double, double> pck;  // alpha -> fraction
    double t_avg_ms = 0;
    double throughput_per_s = 0;
    std::size_t n_images = 0;
    std::size_t n_keypoints = 0;
    std::size_t n_missing = 0;  // classes with no prediction; counted as PCK failures
};

/// Class-aligned evaluation over a split: one prediction per gt class
/// (class-unique mode); missing classes count as PCK failures and are
/// excluded from EPE but reported.
MetricsReport evaluate(const Predictor& predict, const std::vector<synth::Sample>& split,
                       const std::vector<double>& alphas, std::size_t img_h, std::size_t img_w,
                       std::size_t workers = 1);

std::string report_to_json(const MetricsReport& r);
std::string report_to_table(const MetricsReport& r);

} // namespace kpdet::metrics
