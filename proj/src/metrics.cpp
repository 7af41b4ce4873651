#include "kpdet/metrics.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

#include "kpdet/json_util.hpp"

namespace kpdet::metrics {

double epe(const std::vector<PointPx>& pred, const std::vector<PointPx>& gt) {
    if (pred.size() != gt.size()) throw DimensionError("epe: length mismatch");
    if (pred.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dx = pred[i].x - gt[i].x, dy = pred[i].y - gt[i].y;
        acc += std::sqrt(dx * dx + dy * dy);
    }
    return acc / static_cast<double>(pred.size());
}

double pck(const std::vector<PointPx>& pred, const std::vector<PointPx>& gt, double alpha,
           std::size_t h, std::size_t w) {
    if (pred.size() != gt.size()) throw DimensionError("pck: length mismatch");
    if (alpha <= 0.0) throw ParameterError("pck: alpha must be positive");
    if (pred.empty()) return 0.0;
    const double thresh = alpha * static_cast<double>(std::max(h, w));
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dx = pred[i].x - gt[i].x, dy = pred[i].y - gt[i].y;
        if (std::sqrt(dx * dx + dy * dy) <= thresh) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

BenchResult benchmark(const Predictor& predict, const std::vector<Tensor>& images, int warmup,
                      int iters) {
    if (images.empty()) throw ParameterError("benchmark: empty image set");
    if (warmup < 1) throw ParameterError("benchmark: warmup must be >= 1");
    if (iters < 10) throw ParameterError("benchmark: iters must be >= 10");
    using clock = std::chrono::steady_clock;
    for (int i = 0; i < warmup; ++i) {
        (void)predict(images[static_cast<std::size_t>(i) % images.size()]);
    }
    std::vector<double> samples(static_cast<std::size_t>(iters));
    for (int i = 0; i < iters; ++i) {
        const auto t0 = clock::now();
        (void)predict(images[static_cast<std::size_t>(i) % images.size()]);
        const auto t1 = clock::now();
        samples[static_cast<std::size_t>(i)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    BenchResult r;
    r.iters = iters;
    double sum = 0.0;
    for (double s : samples) sum += s;
    r.t_avg_ms = sum / static_cast<double>(iters);
    double ss = 0.0;
    for (double s : samples) ss += (s - r.t_avg_ms) * (s - r.t_avg_ms);
    r.t_std_ms = std::sqrt(ss / static_cast<double>(iters));
    r.throughput_per_s = 1000.0 / r.t_avg_ms;
    return r;
}

MetricsReport evaluate(const Predictor& predict, const std::vector<synth::Sample>& split,
                       const std::vector<double>& alphas, std::size_t img_h, std::size_t img_w,
                       std::size_t workers) {
    if (split.empty()) throw ParameterError("evaluate: empty split");
    const double wd = static_cast<double>(img_w), hd = static_cast<double>(img_h);

    struct PerImage {
        std::vector<PointPx> pred, gt;  // matched by class
        std::size_t missing = 0;
        std::size_t total_gt = 0;
        double ms = 0;
    };
    std::vector<PerImage> rows(split.size());

    auto run_one = [&](std::size_t i) {
        const synth::Sample& s = split[i];
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<dec::Detection> dets = predict(s.image);
        const auto t1 = std::chrono::steady_clock::now();
        PerImage& row = rows[i];
        row.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        row.total_gt = s.keypoints.size();
        for (const Keypoint& gt : s.keypoints) {
            const dec::Detection* best = nullptr;
            for (const dec::Detection& d : dets) {
                if (d.class_id != gt.class_id) continue;
                if (!best || d.confidence > best->confidence) best = &d;
            }
            if (!best) {
                ++row.missing;
                continue;
            }
            row.pred.push_back({best->x * wd, best->y * hd});
            row.gt.push_back({gt.x * wd, gt.y * hd});
        }
    };
    if (workers <= 1) {
        for (std::size_t i = 0; i < split.size(); ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t t = 0; t < workers; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = next++; i < split.size(); i = next++) run_one(i);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    MetricsReport rep;
    rep.n_images = split.size();
    double dist_sum = 0.0, ms_sum = 0.0;
    std::size_t matched = 0;
    std::map<double, std::size_t> within;
    for (double a : alphas) within[a] = 0;
    const double max_hw = static_cast<double>(std::max(img_h, img_w));
    for (const PerImage& row : rows) {
        rep.n_keypoints += row.total_gt;
        rep.n_missing += row.missing;
        ms_sum += row.ms;
        for (std::size_t i = 0; i < row.pred.size(); ++i) {
            const double dx = row.pred[i].x - row.gt[i].x;
            const double dy = row.pred[i].y - row.gt[i].y;
            const double dist = std::sqrt(dx * dx + dy * dy);
            dist_sum += dist;
            ++matched;
            for (double a : alphas) {
                if (dist <= a * max_hw) ++within[a];
            }
        }
    }
    rep.epe_px = matched > 0 ? dist_sum / static_cast<double>(matched) : 0.0;
    // Missing keypoints stay in the PCK denominator as failures.
    for (double a : alphas) {
        rep.pck[a] = rep.n_keypoints > 0
                         ? static_cast<double>(within[a]) / static_cast<double>(rep.n_keypoints)
                         : 0.0;
    }
    rep.t_avg_ms = ms_sum / static_cast<double>(split.size());
    rep.throughput_per_s = 1000.0 / rep.t_avg_ms;
    return rep;
}

std::string report_to_json(const MetricsReport& r) {
    json j;
    j["epe_px"] = r.epe_px;
    json pck_obj = json::object();
    for (const auto& [a, v] : r.pck) {
        std::ostringstream key;
        key << a;
        pck_obj[key.str()] = v;
    }
    j["pck"] = pck_obj;
    j["t_avg_ms"] = r.t_avg_ms;
    j["throughput_per_s"] = r.throughput_per_s;
    j["n_images"] = r.n_images;
    j["n_keypoints"] = r.n_keypoints;
    j["n_missing"] = r.n_missing;
    return j.dump(2);
}

std::string report_to_table(const MetricsReport& r) {
    std::ostringstream os;
    os << "metric                value\n";
    os << "--------------------  ----------\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-20s  %.4f\n", "epe_px", r.epe_px);
    os << buf;
    for (const auto& [a, v] : r.pck) {
        std::snprintf(buf, sizeof(buf), "pck@%-16g  %.4f\n", a, v);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-20s  %.4f\n", "t_avg_ms", r.t_avg_ms);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-20s  %.4f\n", "throughput_per_s", r.throughput_per_s);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-20s  %zu\n", "n_images", r.n_images);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-20s  %zu\n", "n_keypoints", r.n_keypoints);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-20s  %zu\n", "n_missing", r.n_missing);
    os << buf;
    return os.str();
}

} // namespace kpdet::metrics
