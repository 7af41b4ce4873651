#include "kpdet/synthetic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "kpdet/json_util.hpp"
#include "kpdet/rng.hpp"

namespace fs = std::filesystem;

namespace kpdet::synth {

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

Skeleton sample_skeleton(const SkeletonConfig& cfg, std::size_t img_h, std::size_t img_w,
                         std::uint64_t seed) {
    if (cfg.vertebra_count < 2) throw ParameterError("vertebra_count must be >= 2");
    Rng rng(seed);
    Skeleton s;
    s.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const double bw_frac = rng.uniform(cfg.body_width_lo, cfg.body_width_hi);
    s.curvature = rng.uniform(cfg.curvature_lo, cfg.curvature_hi);
    s.tilt = rng.uniform(cfg.tilt_lo, cfg.tilt_hi);

    const double h = static_cast<double>(img_h), w = static_cast<double>(img_w);
    const double span = (cfg.spine_bottom - cfg.spine_top) * s.scale * h;
    const double y_mid = 0.5 * (cfg.spine_top + cfg.spine_bottom) * h;
    const double y_top = y_mid - span / 2.0;
    const std::size_t n = cfg.vertebra_count;
    s.spine.reserve(n);
    constexpr double pi = 3.14159265358979323846;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(n - 1);
        const double x = w * (0.5 + s.tilt * (t - 0.5) + s.curvature * std::sin(pi * t));
        s.spine.push_back({x, y_top + t * span});
    }
    s.body_width = bw_frac * w * s.scale;

    auto perp_at = [&](std::size_t i) -> Point {
        const double dx = s.spine[i + 1][0] - s.spine[i][0];
        const double dy = s.spine[i + 1][1] - s.spine[i][1];
        const double len = std::sqrt(dx * dx + dy * dy);
        return {dy / len, -dx / len};
    };
    auto jit = [&](double a) { return rng.uniform(-a, a); };

    // Scapula lower-corner depression (left side), near the T4 level.
    const Point p4 = perp_at(4);
    const Point v4 = {0.5 * (s.spine[4][0] + s.spine[5][0]),
                      0.5 * (s.spine[4][1] + s.spine[5][1])};
    s.landmarks["scapula_l"] = {v4[0] + p4[0] * 0.32 * s.body_width + jit(0.010 * w),
                                v4[1] + p4[1] * 0.32 * s.body_width + jit(0.010 * h)};
    // Arm chain: shoulder (not an acupoint anchor) -> elbow crease -> wrist.
    const Point p1 = perp_at(1);
    const Point shoulder = {s.spine[1][0] + p1[0] * 0.50 * s.body_width,
                            s.spine[1][1] + p1[1] * 0.50 * s.body_width};
    s.landmarks["shoulder_l"] = shoulder;
    s.landmarks["elbow_l"] = {shoulder[0] + 0.055 * w * s.scale + jit(0.008 * w),
                              shoulder[1] + 0.20 * h * s.scale + jit(0.010 * h)};
    s.landmarks["wrist_l"] = {s.landmarks["elbow_l"][0] + 0.025 * w * s.scale + jit(0.006 * w),
                              s.landmarks["elbow_l"][1] + 0.17 * h * s.scale + jit(0.010 * h)};
    return s;
}

const std::vector<AcupointRule>& back_rules_19() {
    // Vertebra indices: 0 = C7, 1..12 = T1..T12, 13..17 = L1..L5.
    // A "depression below the spinous process" of vertebra i is the midpoint
    // between landmarks i and i+1.
    static const std::vector<AcupointRule> rules = [] {
        std::vector<AcupointRule> r;
        auto dep = [&](const char* name, int vert) {
            r.push_back({name, static_cast<int>(r.size()), AnchorRef::vert(vert), 0.0, {}});
        };
        dep("dazhui", 0);
        dep("taodao", 1);
        dep("shenzhu", 3);
        dep("shendao", 5);
        dep("lingtai", 6);
        dep("zhiyang", 7);
        dep("jinsuo", 9);
        dep("zhongshu", 10);
        dep("jizhong", 11);
        dep("xuanshu", 13);
        dep("mingmen", 14);
        dep("yaoyangguan", 16);
        r.push_back({"dashu", static_cast<int>(r.size()), AnchorRef::vert(1), 1.5, {}});
        r.push_back({"fufen", static_cast<int>(r.size()), AnchorRef::vert(2), 3.0, {}});
        r.push_back({"ruyu", static_cast<int>(r.size()), AnchorRef::mark("scapula_l"), 0.0, {}});
        r.push_back({"quyu", static_cast<int>(r.size()), AnchorRef::vert(2), 0.0,
                     std::make_pair(AnchorRef::mark("scapula_l"), AnchorRef::vert(2))});
        r.push_back({"riyue", static_cast<int>(r.size()), AnchorRef::vert(7), 4.0, {}});
        r.push_back({"chize", static_cast<int>(r.size()), AnchorRef::mark("elbow_l"), 0.0, {}});
        r.push_back({"taiyuan", static_cast<int>(r.size()), AnchorRef::mark("wrist_l"), 0.0, {}});
        return r;
    }();
    return rules;
}

namespace {

Point resolve_anchor(const Skeleton& s, const AnchorRef& a) {
    if (a.vertebra >= 0) {
        const std::size_t i = static_cast<std::size_t>(a.vertebra);
        if (i + 1 >= s.spine.size()) {
            throw RuleError("rule references vertebra " + std::to_string(a.vertebra) +
                            " beyond the skeleton");
        }
        return {0.5 * (s.spine[i][0] + s.spine[i + 1][0]),
                0.5 * (s.spine[i][1] + s.spine[i + 1][1])};
    }
    const auto it = s.landmarks.find(a.landmark);
    if (it == s.landmarks.end()) {
        throw RuleError("rule references absent landmark '" + a.landmark + "'");
    }
    return it->second;
}

Point perp_of_segment(const Skeleton& s, int vertebra) {
    const std::size_t i = static_cast<std::size_t>(vertebra);
    const double dx = s.spine[i + 1][0] - s.spine[i][0];
    const double dy = s.spine[i + 1][1] - s.spine[i][1];
    const double len = std::sqrt(dx * dx + dy * dy);
    return {dy / len, -dx / len};
}

} // namespace

std::vector<Point> place_acupoints(const Skeleton& s, const std::vector<AcupointRule>& rules,
                                   double cun_divisor) {
    if (cun_divisor <= 0.0) throw ParameterError("cun_divisor must be positive");
    if (s.body_width <= 0.0) throw ParameterError("skeleton body_width must be positive");
    const double cun = s.body_width / cun_divisor;
    std::vector<Point> out;
    out.reserve(rules.size());
    for (const AcupointRule& rule : rules) {
        Point p;
        if (rule.midpoint_of) {
            const Point a = resolve_anchor(s, rule.midpoint_of->first);
            const Point b = resolve_anchor(s, rule.midpoint_of->second);
            p = {0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])};
        } else {
            p = resolve_anchor(s, rule.anchor);
        }
        if (rule.lateral_offset_cun != 0.0) {
            if (rule.anchor.vertebra < 0) {
                throw RuleError("lateral offsets need a vertebra anchor: " + rule.name);
            }
            const Point perp = perp_of_segment(s, rule.anchor.vertebra);
            p[0] += perp[0] * rule.lateral_offset_cun * cun;
            p[1] += perp[1] * rule.lateral_offset_cun * cun;
        }
        out.push_back(p);
    }
    return out;
}

namespace {

double smoothstep01(double t) {
    t = std::min(1.0, std::max(0.0, t));
    return t * t * (3.0 - 2.0 * t);
}

double dist_to_segment(double px, double py, const Point& a, const Point& b) {
    const double vx = b[0] - a[0], vy = b[1] - a[1];
    const double wx = px - a[0], wy = py - a[1];
    const double vv = vx * vx + vy * vy;
    double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
    t = std::min(1.0, std::max(0.0, t));
    const double dx = px - (a[0] + t * vx), dy = py - (a[1] + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

} // namespace

Tensor render(const Skeleton& s, const ImageConfig& cfg, double noise_level,
              std::uint64_t seed) {
    if (noise_level < 0.0) throw ParameterError("noise_level must be >= 0");
    const std::size_t H = cfg.h, W = cfg.w;
    const double wd = static_cast<double>(W), hd = static_cast<double>(H);
    Tensor img({cfg.channels, H, W});

    const double edge = 0.06 * wd;
    const double groove_r = 0.035 * wd;
    const double pit_sigma = 0.016 * wd;
    const double scapula_sigma = 0.05 * wd;
    const double arm_r = 0.016 * wd;

    const Point shoulder = s.landmarks.count("shoulder_l") ? s.landmarks.at("shoulder_l")
                                                           : s.spine.front();
    const Point elbow = s.landmarks.count("elbow_l") ? s.landmarks.at("elbow_l") : shoulder;
    const Point wrist = s.landmarks.count("wrist_l") ? s.landmarks.at("wrist_l") : elbow;
    const Point scapula = s.landmarks.count("scapula_l") ? s.landmarks.at("scapula_l")
                                                         : s.spine.front();

    for (std::size_t yi = 0; yi < H; ++yi) {
        for (std::size_t xi = 0; xi < W; ++xi) {
            const double px = static_cast<double>(xi) + 0.5;
            const double py = static_cast<double>(yi) + 0.5;
            double v = 0.16 + 0.05 * (py / hd) + 0.02 * (px / wd);

            double d_spine = 1e30;
            for (std::size_t i = 0; i + 1 < s.spine.size(); ++i) {
                d_spine = std::min(d_spine, dist_to_segment(px, py, s.spine[i], s.spine[i + 1]));
            }
            v += 0.42 * smoothstep01((s.body_width / 2.0 - d_spine) / edge + 0.5);
            v -= 0.07 * std::exp(-(d_spine * d_spine) / (groove_r * groove_r));

            for (const Point& vert : s.spine) {
                const double dx = px - vert[0], dy = py - vert[1];
                if (std::fabs(dx) > 4.0 * pit_sigma || std::fabs(dy) > 4.0 * pit_sigma) continue;
                v -= 0.055 * std::exp(-(dx * dx + dy * dy) / (2.0 * pit_sigma * pit_sigma));
            }
            {
                const double dx = px - scapula[0], dy = py - scapula[1];
                v -= 0.045 *
                     std::exp(-(dx * dx + dy * dy) / (2.0 * scapula_sigma * scapula_sigma));
            }
            const double d_arm = std::min(dist_to_segment(px, py, shoulder, elbow),
                                          dist_to_segment(px, py, elbow, wrist));
            v -= 0.05 * std::exp(-(d_arm * d_arm) / (arm_r * arm_r));
            for (const Point* lp : {&elbow, &wrist}) {
                const double dx = px - (*lp)[0], dy = py - (*lp)[1];
                if (std::fabs(dx) > 5.0 * pit_sigma || std::fabs(dy) > 5.0 * pit_sigma) continue;
                v -= 0.05 * std::exp(-(dx * dx + dy * dy) / (2.0 * pit_sigma * pit_sigma));
            }
            img.at(0, yi, xi) = v;
        }
    }
    for (std::size_t c = 1; c < cfg.channels; ++c) {
        for (std::size_t i = 0; i < H * W; ++i) img[c * H * W + i] = img[i];
    }
    Rng rng(mix_seed(seed, 0x72656e646572ULL));
    for (std::size_t i = 0; i < img.size(); ++i) {
        double v = img[i] + noise_level * rng.normal();
        img[i] = std::min(1.0, std::max(0.0, v));
    }
    return img;
}

Sample generate_sample(const DataConfig& cfg, std::uint64_t sample_seed) {
    Sample s;
    s.seed = sample_seed;
    s.skeleton = sample_skeleton(cfg.skeleton, cfg.image.h, cfg.image.w, sample_seed);
    s.image = render(s.skeleton, cfg.image, cfg.image.noise, sample_seed);
    const auto& rules = back_rules_19();
    const std::vector<Point> pts = place_acupoints(s.skeleton, rules, cfg.image.cun_divisor);
    const double wd = static_cast<double>(cfg.image.w), hd = static_cast<double>(cfg.image.h);
    s.keypoints.reserve(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!(pts[i][0] > 0.0 && pts[i][0] < wd && pts[i][1] > 0.0 && pts[i][1] < hd)) {
            throw StateError("generated keypoint out of image bounds (rule " + rules[i].name +
                             ")");
        }
        s.keypoints.push_back({rules[i].class_id, pts[i][0] / wd, pts[i][1] / hd});
    }
    return s;
}

namespace {

struct SplitPlan {
    std::vector<std::size_t> order;  // shuffled indices
    std::size_t n_train = 0, n_val = 0, n_test = 0;
};

SplitPlan make_split(const DataConfig& cfg) {
    if (cfg.n == 0) throw ParameterError("dataset size must be positive");
    const double sum = cfg.split[0] + cfg.split[1] + cfg.split[2];
    if (std::fabs(sum - 1.0) > 1e-9) throw ParameterError("split fractions must sum to 1");
    SplitPlan plan;
    plan.order.resize(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) plan.order[i] = i;
    Rng rng(mix_seed(cfg.seed, 0x73706c6974ULL));
    for (std::size_t i = cfg.n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
        std::swap(plan.order[i - 1], plan.order[j]);
    }
    plan.n_train = static_cast<std::size_t>(std::llround(cfg.split[0] * cfg.n));
    plan.n_val = static_cast<std::size_t>(std::llround(cfg.split[1] * cfg.n));
    if (plan.n_train + plan.n_val > cfg.n) plan.n_val = cfg.n - plan.n_train;
    plan.n_test = cfg.n - plan.n_train - plan.n_val;
    return plan;
}

const char* split_of(const SplitPlan& plan, std::size_t position) {
    if (position < plan.n_train) return "train";
    if (position < plan.n_train + plan.n_val) return "val";
    return "test";
}

json data_config_json(const DataConfig& cfg) {
    json j;
    j["n"] = cfg.n;
    j["split"] = {cfg.split[0], cfg.split[1], cfg.split[2]};
    j["seed"] = cfg.seed;
    j["image"] = {{"h", cfg.image.h},
                  {"w", cfg.image.w},
                  {"channels", cfg.image.channels},
                  {"noise", cfg.image.noise},
                  {"cun_divisor", cfg.image.cun_divisor}};
    j["skeleton"] = {{"vertebra_count", cfg.skeleton.vertebra_count},
                     {"spine_top", cfg.skeleton.spine_top},
                     {"spine_bottom", cfg.skeleton.spine_bottom},
                     {"body_width", {cfg.skeleton.body_width_lo, cfg.skeleton.body_width_hi}},
                     {"curvature", {cfg.skeleton.curvature_lo, cfg.skeleton.curvature_hi}},
                     {"tilt", {cfg.skeleton.tilt_lo, cfg.skeleton.tilt_hi}},
                     {"scale", {cfg.skeleton.scale_lo, cfg.skeleton.scale_hi}}};
    j["workers"] = cfg.workers;
    return j;
}

DataConfig data_config_from_json(const json& j) {
    check_keys(j, "dataset config",
               {"n", "split", "seed", "image", "skeleton", "workers"});
    DataConfig cfg;
    cfg.n = get_or<std::size_t>(j, "n", cfg.n);
    if (j.contains("split")) {
        const auto v = j["split"].get<std::vector<double>>();
        if (v.size() != 3) throw ParameterError("split must have three fractions");
        cfg.split = {v[0], v[1], v[2]};
    }
    cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
    if (j.contains("image")) {
        const json& im = j["image"];
        check_keys(im, "dataset config.image", {"h", "w", "channels", "noise", "cun_divisor"});
        cfg.image.h = get_or<std::size_t>(im, "h", cfg.image.h);
        cfg.image.w = get_or<std::size_t>(im, "w", cfg.image.w);
        cfg.image.channels = get_or<std::size_t>(im, "channels", cfg.image.channels);
        cfg.image.noise = get_or<double>(im, "noise", cfg.image.noise);
        cfg.image.cun_divisor = get_or<double>(im, "cun_divisor", cfg.image.cun_divisor);
    }
    if (j.contains("skeleton")) {
        const json& sk = j["skeleton"];
        check_keys(sk, "dataset config.skeleton",
                   {"vertebra_count", "spine_top", "spine_bottom", "body_width", "curvature",
                    "tilt", "scale"});
        cfg.skeleton.vertebra_count =
            get_or<std::size_t>(sk, "vertebra_count", cfg.skeleton.vertebra_count);
        cfg.skeleton.spine_top = get_or<double>(sk, "spine_top", cfg.skeleton.spine_top);
        cfg.skeleton.spine_bottom =
            get_or<double>(sk, "spine_bottom", cfg.skeleton.spine_bottom);
        auto range = [&](const char* key, double& lo, double& hi) {
            if (!sk.contains(key)) return;
            const auto v = sk[key].get<std::vector<double>>();
            if (v.size() != 2) throw ParameterError(std::string(key) + " must be [lo, hi]");
            lo = v[0];
            hi = v[1];
        };
        range("body_width", cfg.skeleton.body_width_lo, cfg.skeleton.body_width_hi);
        range("curvature", cfg.skeleton.curvature_lo, cfg.skeleton.curvature_hi);
        range("tilt", cfg.skeleton.tilt_lo, cfg.skeleton.tilt_hi);
        range("scale", cfg.skeleton.scale_lo, cfg.skeleton.scale_hi);
    }
    cfg.workers = get_or<std::size_t>(j, "workers", cfg.workers);
    return cfg;
}

std::string sample_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%06zu", index);
    return buf;
}

json keypoints_json(const Sample& s, const ImageConfig& img) {
    const auto& rules = back_rules_19();
    json j;
    j["seed"] = s.seed;
    j["body_width_px"] = s.skeleton.body_width;
    j["cun_px"] = s.skeleton.body_width / img.cun_divisor;
    json arr = json::array();
    for (std::size_t i = 0; i < s.keypoints.size(); ++i) {
        arr.push_back({{"class", s.keypoints[i].class_id},
                       {"name", rules[i].name},
                       {"x", s.keypoints[i].x},
                       {"y", s.keypoints[i].y}});
    }
    j["keypoints"] = arr;
    return j;
}

// Runs fn(i) for i in [0, n) across `workers` threads; exceptions propagate.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    std::atomic<std::size_t> next{0};
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
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

} // namespace

std::string data_config_to_json(const DataConfig& cfg) { return data_config_json(cfg).dump(2); }

DataConfig data_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParameterError(std::string("dataset config parse error: ") + e.what());
    }
    return data_config_from_json(j);
}

Dataset build_dataset_in_memory(const DataConfig& cfg) {
    const SplitPlan plan = make_split(cfg);
    Dataset ds;
    ds.cfg = cfg;
    std::vector<Sample> all(cfg.n);
    parallel_for(cfg.n, cfg.workers, [&](std::size_t i) {
        all[i] = generate_sample(cfg, mix_seed(cfg.seed, i));
    });
    for (std::size_t pos = 0; pos < cfg.n; ++pos) {
        const std::size_t idx = plan.order[pos];
        const char* sp = split_of(plan, pos);
        if (sp[0] == 't' && sp[1] == 'r') {
            ds.train.push_back(std::move(all[idx]));
        } else if (sp[0] == 'v') {
            ds.val.push_back(std::move(all[idx]));
        } else {
            ds.test.push_back(std::move(all[idx]));
        }
    }
    return ds;
}

std::uint64_t build_dataset(const DataConfig& cfg, const std::string& out_dir) {
    const SplitPlan plan = make_split(cfg);
    const fs::path root(out_dir);
    std::error_code ec;
    fs::create_directories(root / "samples", ec);
    if (ec) throw IoError("cannot create dataset directory: " + out_dir);

    struct Entry {
        std::uint64_t seed;
        std::uint64_t image_hash, kp_hash;
    };
    std::vector<Entry> entries(cfg.n);
    parallel_for(cfg.n, cfg.workers, [&](std::size_t i) {
        const Sample s = generate_sample(cfg, mix_seed(cfg.seed, i));
        const std::string id = sample_id(i);
        const fs::path img_path = root / "samples" / (id + ".img.bin");
        {
            std::ostringstream os(std::ios::binary);
            write_tensor(os, s.image);
            const std::string bytes = os.str();
            std::ofstream f(img_path, std::ios::binary);
            if (!f) throw IoError("cannot write " + img_path.string());
            f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            entries[i].image_hash = fnv1a(bytes.data(), bytes.size());
        }
        const fs::path kp_path = root / "samples" / (id + ".kp.json");
        {
            const std::string text = keypoints_json(s, cfg.image).dump(2);
            std::ofstream f(kp_path);
            if (!f) throw IoError("cannot write " + kp_path.string());
            f << text << "\n";
            entries[i].kp_hash = fnv1a(text.data(), text.size());
        }
        entries[i].seed = s.seed;
    });

    json manifest;
    manifest["config"] = data_config_json(cfg);
    json names = json::array();
    for (const auto& r : back_rules_19()) names.push_back(r.name);
    manifest["rule_names"] = names;
    json samples = json::array();
    // Manifest rows in split-plan order, so split membership is explicit.
    for (std::size_t pos = 0; pos < cfg.n; ++pos) {
        const std::size_t idx = plan.order[pos];
        const std::string id = sample_id(idx);
        char ih[20], kh[20];
        std::snprintf(ih, sizeof(ih), "%016llx",
                      static_cast<unsigned long long>(entries[idx].image_hash));
        std::snprintf(kh, sizeof(kh), "%016llx",
                      static_cast<unsigned long long>(entries[idx].kp_hash));
        samples.push_back({{"id", id},
                           {"index", idx},
                           {"seed", entries[idx].seed},
                           {"split", split_of(plan, pos)},
                           {"image", "samples/" + id + ".img.bin"},
                           {"keypoints", "samples/" + id + ".kp.json"},
                           {"image_hash", ih},
                           {"kp_hash", kh}});
    }
    manifest["samples"] = samples;
    const std::string text = manifest.dump(2);
    {
        std::ofstream f(root / "manifest.json");
        if (!f) throw IoError("cannot write manifest.json under " + out_dir);
        f << text << "\n";
    }
    return fnv1a(text.data(), text.size());
}

Dataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw IoError("missing manifest.json under " + dir);
    json manifest;
    try {
        manifest = json::parse(mf);
    } catch (const json::exception& e) {
        throw IoError("corrupt manifest.json: " + std::string(e.what()));
    }
    Dataset ds;
    try {
        ds.cfg = data_config_from_json(manifest.at("config"));
    } catch (const std::exception& e) {
        throw IoError("corrupt manifest config: " + std::string(e.what()));
    }
    for (const json& row : manifest.at("samples")) {
        Sample s;
        s.seed = row.at("seed").get<std::uint64_t>();
        const fs::path img_path = root / row.at("image").get<std::string>();
        {
            std::ifstream f(img_path, std::ios::binary);
            if (!f) throw IoError("missing sample image: " + img_path.string());
            std::string bytes((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
            char expect[20];
            std::snprintf(expect, sizeof(expect), "%016llx",
                          static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
            if (row.at("image_hash").get<std::string>() != expect) {
                throw IoError("corrupt sample image (hash mismatch): " + img_path.string());
            }
            std::istringstream is(bytes, std::ios::binary);
            s.image = read_tensor(is);
        }
        const fs::path kp_path = root / row.at("keypoints").get<std::string>();
        {
            std::ifstream f(kp_path);
            if (!f) throw IoError("missing keypoint file: " + kp_path.string());
            json kj;
            try {
                kj = json::parse(f);
            } catch (const json::exception& e) {
                throw IoError("corrupt keypoint file " + kp_path.string() + ": " + e.what());
            }
            for (const json& kp : kj.at("keypoints")) {
                s.keypoints.push_back({kp.at("class").get<int>(), kp.at("x").get<double>(),
                                       kp.at("y").get<double>()});
            }
        }
        const std::string split = row.at("split").get<std::string>();
        if (split == "train") {
            ds.train.push_back(std::move(s));
        } else if (split == "val") {
            ds.val.push_back(std::move(s));
        } else if (split == "test") {
            ds.test.push_back(std::move(s));
        } else {
            throw IoError("corrupt manifest: unknown split '" + split + "'");
        }
    }
    return ds;
}

} // namespace kpdet::synth
