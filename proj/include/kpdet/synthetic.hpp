#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kpdet/keypoint.hpp"
#include "kpdet/tensor.hpp"

namespace kpdet::synth {

using Point = std::array<double, 2>;  // pixel (x, y)

struct SkeletonConfig {
    std::size_t vertebra_count = 18;     // C7, T1..T12, L1..L5
    double spine_top = 0.10;             // fractions of image height
    double spine_bottom = 0.90;
    double body_width_lo = 0.30;         // fractions of image width
    double body_width_hi = 0.44;
    double curvature_lo = -0.045;        // lateral sine bow, fraction of width
    double curvature_hi = 0.045;
    double tilt_lo = -0.05;              // lateral slope across span, fraction of width
    double tilt_hi = 0.05;
    double scale_lo = 0.92;
    double scale_hi = 1.08;
};

/// Randomized synthetic back skeleton. Spine points run strictly
/// top-to-bottom; named landmarks cover the scapula and the (left) arm.
struct Skeleton {
    std::vector<Point> spine;  // pixel coords, top to bottom
    double body_width = 0.0;   // pixels
    double curvature = 0.0, tilt = 0.0, scale = 1.0;
    std::map<std::string, Point> landmarks;
};

struct ImageConfig {
    std::size_t h = 128, w = 128, channels = 1;
    double noise = 0.03;
    double cun_divisor = 6.0;  // 1 cun := body_width / cun_divisor
};

Skeleton sample_skeleton(const SkeletonConfig& cfg, std::size_t img_h, std::size_t img_w,
                         std::uint64_t seed);

/// Anchor of an acupoint rule: a vertebra index (depression below its
/// spinous process = midpoint to the next vertebra) or a named landmark.
struct AnchorRef {
    int vertebra = -1;      // valid when >= 0
    std::string landmark;   // valid when non-empty
    static AnchorRef vert(int i) { return {i, {}}; }
    static AnchorRef mark(std::string name) { return {-1, std::move(name)}; }
};

struct AcupointRule {
    std::string name;
    int class_id = 0;
    AnchorRef anchor;
    double lateral_offset_cun = 0.0;  // along the local perpendicular, + = image right
    std::optional<std::pair<AnchorRef, AnchorRef>> midpoint_of;
};

/// The 19 named back/arm rules; class ids follow table order.
const std::vector<AcupointRule>& back_rules_19();

/// Resolves each rule against the skeleton. 1 cun := body_width / cun_divisor;
/// lateral offsets run perpendicular to the local spine direction; midpoint
/// rules average their two resolved anchors. Pixel coordinates.
std::vector<Point> place_acupoints(const Skeleton& s, const std::vector<AcupointRule>& rules,
                                   double cun_divisor = 6.0);

/// Weak-feature render: soft body silhouette, faint spine groove, small
/// vertebra pits, scapula/arm hints, low-contrast gradient, additive noise.
/// Pixel values clamped to [0,1]; deterministic given the seed.
Tensor render(const Skeleton& s, const ImageConfig& cfg, double noise_level,
              std::uint64_t seed);

struct Sample {
    Tensor image;                    // [channels, h, w]
    std::vector<Keypoint> keypoints; // normalized to [0,1]
    Skeleton skeleton;
    std::uint64_t seed = 0;
};

struct DataConfig {
    std::size_t n = 1000;
    std::array<double, 3> split{0.8, 0.1, 0.1};  // train/val/test
    std::uint64_t seed = 42;
    ImageConfig image;
    SkeletonConfig skeleton;
    std::size_t workers = 1;
};

Sample generate_sample(const DataConfig& cfg, std::uint64_t sample_seed);

struct Dataset {
    DataConfig cfg;
    std::vector<Sample> train, val, test;
};

/// Deterministic in-memory dataset: per-sample seeds derive from the config
/// seed; the split is a seeded shuffle of the index range.
Dataset build_dataset_in_memory(const DataConfig& cfg);

/// Writes manifest.json plus per-sample image binaries and keypoint JSONs.
/// Returns the FNV-1a hash of the manifest (which itself embeds per-file
/// content hashes), so equal hashes mean bit-identical datasets.
std::uint64_t build_dataset(const DataConfig& cfg, const std::string& out_dir);

Dataset load_dataset(const std::string& dir);

/// DataConfig <-> JSON text (the same schema the manifest embeds).
std::string data_config_to_json(const DataConfig& cfg);
DataConfig data_config_from_json_text(const std::string& text);

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);

} // namespace kpdet::synth
