#pragma once

// Canonical scene model, cameras, datasets and every on-disk format:
// scene JSON, camera JSON, PPM/PFM images and normal maps.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "specsplat/deform.hpp"
#include "specsplat/splat_math.hpp"
#include "specsplat/vec.hpp"

namespace specsplat {

/// Raw (pre-activation) parameters of one main-content splat.
struct SplatPrimitive {
    Vec3 center;
    Quat rotation;
    Vec2 log_scale;
    double opacity_logit = 0.0;
    ShCoeffs sh_coeffs{};
    double tint_logit = 0.0;
};

/// Environment splat: same parameterization minus the specular tint.
struct EnvSplat {
    Vec3 center;
    Quat rotation;
    Vec2 log_scale;
    double opacity_logit = 0.0;
    ShCoeffs sh_coeffs{};
};

struct Scene {
    int sh_degree = kMaxShDegree;
    std::vector<SplatPrimitive> main;
    std::vector<EnvSplat> env;
    DeformationField main_field;
    DeformationField env_field;
};

struct Camera {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    Mat4 world_to_camera;
    double time = 0.0;

    Mat3 rotation() const;
    Vec3 center() const;
    /// Unit world-space direction through the center of pixel (x, y).
    Vec3 pixel_direction(int x, int y) const;
    Ray pixel_ray(int x, int y, double t_min, double t_max) const;
    /// Camera-space point (z forward) projected to pixel coordinates.
    Vec2 project_camera_point(const Vec3& pc) const { return {fx * pc.x / pc.z + cx, fy * pc.y / pc.z + cy}; }

    /// Camera at `eye` looking at `target`; x right, y down, z forward.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height,
                          double fov_y_deg, double time);
};

struct Image {
    int width = 0, height = 0, channels = 3;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

struct NormalMap {
    int width = 0, height = 0;
    std::vector<Vec3> normals;
    std::vector<std::uint8_t> valid;
};

struct Frame {
    Camera camera;
    std::string image;
    std::optional<std::string> normal_map;
};

struct Dataset {
    std::filesystem::path root;
    std::vector<Frame> frames;
    std::string scene;
    Vec3 background;

    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0, std::size_t offset = 0)
        : std::runtime_error(what), line_(line), offset_(offset) {}
    std::size_t line() const { return line_; }
    std::size_t offset() const { return offset_; }

private:
    std::size_t line_, offset_;
};

class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct InitConfig {
    double default_scale = 0.05;
    double opacity = 0.1;
    double tint = 0.1;
    int sh_degree = kMaxShDegree;
};

struct EnvSphereConfig {
    std::size_t count = 200;
    double radius = 6.0;
    Vec3 center;
    double opacity = 0.9;
    Vec3 color{0.5, 0.5, 0.5};
    /// Disk size relative to the mean spacing between neighboring splats.
    double overlap = 0.6;
};

double logit(double p);
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Rotation whose tangent frame is (tu, tv, tu x tv).
Quat quat_from_frame(const Vec3& tu, const Vec3& tv, const Vec3& tw);
/// A unit quaternion whose normal (t_w) equals `n`.
Quat quat_facing(const Vec3& n);

/// Throws ValidationError naming the offending set, index and field.
void validate_scene(const Scene& scene);
void validate_camera(const Camera& camera);

/// Throws ParseError (with line/offset) or ValidationError.
Scene load_scene(const std::filesystem::path& path);
void save_scene(const Scene& scene, const std::filesystem::path& path);
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);

std::vector<SplatPrimitive> init_from_points(const std::vector<Vec3>& points, const std::vector<Vec3>& colors,
                                             const InitConfig& config);
/// Fibonacci-sphere environment facing inward.
std::vector<EnvSplat> init_env_sphere(const EnvSphereConfig& config, int sh_degree = kMaxShDegree);

/// PPM (P6, 8-bit) or PFM (32-bit float, little-endian), chosen by extension.
Image load_image(const std::filesystem::path& path);
/// As above, additionally requiring the given resolution.
Image load_image(const std::filesystem::path& path, int width, int height);
void save_image(const Image& image, const std::filesystem::path& path);

/// Renormalizes every vector; vectors shorter than 1e-6 are flagged invalid.
NormalMap load_normal_map(const std::filesystem::path& path);
void save_normal_map(const NormalMap& map, const std::filesystem::path& path);

std::vector<Frame> load_cameras(const std::filesystem::path& path);
void save_cameras(const std::vector<Frame>& frames, const std::filesystem::path& path);

/// dataset.json: {"cameras": file, "scene": file, "background": [r, g, b]}.
/// Relative paths resolve against the directory holding dataset.json.
Dataset load_dataset(const std::filesystem::path& path);
/// Writes `path` and a cameras.json next to it.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace specsplat
