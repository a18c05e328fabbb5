#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bevdiff/container.hpp"
#include "bevdiff/losses.hpp"
#include "bevdiff/rng.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

/// Segmentation channels of a scene's class maps.
enum SegClass : int { kRoad = 0, kClassA = 1, kClassB = 2 };

struct SynthConfig {
    int grid = 32;  ///< H = W
    int c_in = 6;   ///< feature channels per modality
    int min_boxes = 1;
    int max_boxes = 5;
    double min_size = 2.0;
    double max_size = 5.0;
    double road_min_width = 4.0;
    double road_max_width = 8.0;
    double cam_sigma = 0.1;
    double cam_jitter = 1.0;  ///< max per-object centre shift in cells
    bool cam_blur = true;
    double lidar_sigma = 0.05;
    double lidar_sparsify = 0.5;  ///< drop probability at the grid corners, 0 at the centre
    int placement_retries = 200;

    static constexpr int kSegClasses = 3;
    static constexpr int kDetClasses = 2;

    friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

void validate(const SynthConfig& cfg);
/// Flat "synth.<field>" keys, used by config files and container headers.
std::map<std::string, std::string> to_kv(const SynthConfig& cfg);
/// Applies any "synth.*" keys present; unknown synth keys throw.
void apply_kv(SynthConfig& cfg, const std::map<std::string, std::string>& kv);

/// A straight road band: points within half_width of the line through (px, py) with direction angle.
struct Road {
    double px = 0, py = 0, angle = 0, half_width = 0;
    friend bool operator==(const Road&, const Road&) = default;
};

struct Scene {
    std::uint64_t seed = 0;
    int height = 0, width = 0;
    Road road;
    std::vector<GtBox> boxes;  ///< cls 0 = class A, 1 = class B
    Tensor class_maps;         ///< [3, H, W] binary: road, class A, class B

    friend bool operator==(const Scene&, const Scene&) = default;
};

struct ModalityPair {
    Tensor cam;    ///< [c_in, H, W]
    Tensor lidar;  ///< [c_in, H, W]

    friend bool operator==(const ModalityPair&, const ModalityPair&) = default;
};

/// Point-in-rotated-rectangle test used for rasterization (cell centres).
bool box_contains(const GtBox& b, double x, double y);
/// The four corners, counter-clockwise in the box frame.
std::array<std::array<double, 2>, 4> box_corners(const GtBox& b);

Scene generate_scene(std::uint64_t seed, const SynthConfig& cfg);
ModalityPair render_modalities(const Scene& scene, const SynthConfig& cfg, Rng& rng);

struct Dataset {
    SynthConfig cfg;
    std::uint64_t seed = 0;
    std::vector<Scene> scenes;
    std::vector<ModalityPair> features;

    std::size_t size() const noexcept { return scenes.size(); }
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Scene i uses seed + i for geometry and the Render stream of that seed for its features.
Dataset generate_dataset(std::uint64_t seed, int n_scenes, const SynthConfig& cfg);

Container dataset_to_container(const Dataset& d);
Dataset dataset_from_container(const Container& c);
void save_dataset(const std::string& path, const Dataset& d);
Dataset load_dataset(const std::string& path);

/// Concatenated camera-then-lidar latent of scene i: [1, 2 c_in, H, W].
Tensor fused_features(const ModalityPair& f);

}  // namespace bevdiff
