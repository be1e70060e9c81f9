#pragma once

// Analytic synthetic scenes with exact ground truth: rendered frames, world
// space normal maps, posed scenes per frame and an initialization point cloud.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "specsplat/scene.hpp"

namespace specsplat {

enum class SyntheticKind { MovingMirror, SpinningPlate, DiffuseOnly };

const char* synthetic_kind_name(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::MovingMirror;
    int frames = 32;
    int width = 96, height = 96;
    /// Cameras orbit the origin on an arc at this distance and height.
    double orbit_radius = 3.0;
    double orbit_height = 0.4;
    double orbit_arc_deg = 50.0;
    double fov_deg = 45.0;
    /// Motion periods over the sequence (t in [0, 1]) for the moving scenes.
    double motion_cycles = 1.0;
    std::size_t env_count = 200;
    double env_radius = 5.0;
    Vec3 background{0.05, 0.05, 0.05};
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument unless frames >= 2 and both sides >= 16.
    void validate() const;
};

SyntheticSpec synthetic_spec_from_json(const std::string& text);
std::string synthetic_spec_to_json(const SyntheticSpec& spec);

/// Static scene (no deformation fields) in its pose at time t.
Scene synthetic_scene(const SyntheticSpec& spec, double t);
std::vector<Camera> synthetic_cameras(const SyntheticSpec& spec);

/// Written under `out_dir`: dataset.json, cameras.json, images/NNN.pfm,
/// normals/NNN.pfm, gt/scene_NNN.json, points.json and init_scene.json.
Dataset generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Held-out protocol: every 8th frame is a test frame.
inline bool is_test_frame(std::size_t index) { return index % 8 == 0; }

/// Point cloud used to initialize training.
struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> colors;
};
PointCloud load_points(const std::filesystem::path& path);
void save_points(const PointCloud& cloud, const std::filesystem::path& path);

}  // namespace specsplat
