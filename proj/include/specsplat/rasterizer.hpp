#pragma once

// Tile-parallel front-to-back compositing of main splats. Every pixel ray is
// intersected exactly with each candidate splat plane; candidates come from
// tiles overlapped by the projected cutoff footprint.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "specsplat/scene.hpp"
#include "specsplat/splat_math.hpp"

namespace specsplat {

struct RenderSettings {
    double cutoff = kDefaultCutoff;
    /// Compositing stops once transmittance falls below this.
    double early_stop = 1e-4;
    /// Normals are reported only where accumulated alpha exceeds this.
    double alpha_mask = 1e-3;
    Vec3 background;
    int tile_size = 16;
    bool flip_normals = false;
    double near = 1e-3;
    /// Depth reported for pixels with no coverage; also the ray range limit.
    double far = 1e3;
    /// 0 selects std::thread::hardware_concurrency().
    unsigned workers = 0;
};

struct RenderBuffers {
    int width = 0, height = 0;
    std::vector<Vec3> diffuse;
    std::vector<double> depth;
    std::vector<Vec3> normal;
    std::vector<double> alpha_spec;
    std::vector<double> transmittance;
    /// 1 - final transmittance.
    std::vector<double> accum;

    RenderBuffers() = default;
    RenderBuffers(int w, int h);
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    Image diffuse_image() const;
    Image depth_image() const;
    Image normal_image() const;
    Image alpha_spec_image() const;
};

/// Per-splat state after activation, with SH color evaluated toward the camera.
struct SplatGeom {
    SplatPlane plane;
    double opacity = 0.0;
    double tint = 0.0;
    Vec3 color;
};

std::vector<SplatGeom> prepare_splats(std::span<const SplatPrimitive> splats, const Camera& camera, int sh_degree);

/// One sorted hit as the compositor sees it.
struct CompositeHit {
    double depth = 0.0;
    double alpha_base = 0.0;
    double weight = 0.0;
    double tint = 0.0;
    Vec3 color;
    Vec3 normal;
};

struct PixelResult {
    Vec3 diffuse;
    double depth = 0.0;
    Vec3 normal;
    double alpha_spec = 0.0;
    double transmittance = 1.0;
    double accum = 0.0;
    /// Hits actually composited (a prefix of the input).
    std::size_t used = 0;
};

/// Front-to-back blend of depth-sorted hits. The hit that drives
/// transmittance below `early_stop` is the last one included.
PixelResult composite_pixel(std::span<const CompositeHit> hits, const RenderSettings& settings);

/// A composited hit recorded for the backward pass.
struct RasterHit {
    std::uint32_t splat = 0;
    double depth = 0.0;
    double u = 0.0, v = 0.0;
    double weight = 0.0;
    /// -1 when the normal was flipped toward the camera.
    int sign = 1;
};

/// Composited hits for each pixel in CSR form.
struct PixelHits {
    std::vector<std::uint32_t> offsets;
    std::vector<RasterHit> hits;

    std::span<const RasterHit> pixel(std::size_t p) const {
        return {hits.data() + offsets[p], hits.data() + offsets[p + 1]};
    }
};

RenderBuffers render(std::span<const SplatPrimitive> splats, const Camera& camera, int sh_degree,
                     const RenderSettings& settings);
RenderBuffers render(const std::vector<SplatGeom>& geoms, const Camera& camera, const RenderSettings& settings,
                     PixelHits* hits = nullptr);

/// Reference renderer: every splat against every pixel through the inverse
/// affine map, full sort, literal products for transmittance.
RenderBuffers oracle_render(std::span<const SplatPrimitive> splats, const Camera& camera, int sh_degree,
                            const RenderSettings& settings);

/// Back-projected depth, central differences (one-sided at borders), sign
/// chosen to face the camera. `valid` is 0 where the cross product vanishes.
struct PseudoNormals {
    std::vector<Vec3> normals;
    std::vector<std::uint8_t> valid;
};
PseudoNormals pseudo_normals_from_depth(std::span<const double> depth, const Camera& camera);

/// Runs body(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body);

}  // namespace specsplat
