#pragma once

// Per-splat geometry for planar (2D) Gaussians: tangent frames, the
// local-to-world affine map, the Gaussian kernel, ray intersection,
// mirror reflection and real spherical harmonics.

#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>

#include "specsplat/vec.hpp"

namespace specsplat {

/// Smallest world-space scale a splat axis may take at evaluation time.
inline constexpr double kMinScale = 1e-6;

/// Default kernel truncation: weight >= exp(-4.5), i.e. 3 sigma.
inline const double kDefaultCutoff = std::exp(-4.5);

/// Maximum supported SH degree and the coefficient counts it implies.
inline constexpr int kMaxShDegree = 2;
inline constexpr int kShBasisCount = (kMaxShDegree + 1) * (kMaxShDegree + 1);
inline constexpr int kShCoeffCount = 3 * kShBasisCount;

constexpr int sh_basis_count(int degree) { return (degree + 1) * (degree + 1); }

/// SH coefficients are stored basis-major: coeffs[3 * k + channel].
using ShCoeffs = std::array<double, kShCoeffCount>;

/// Anything with a center, a rotation quaternion and a log-scale pair.
template <class S>
concept PlanarSplat = requires(const S& s) {
    { s.center } -> std::convertible_to<Vec3>;
    { s.rotation } -> std::convertible_to<Quat>;
    { s.log_scale } -> std::convertible_to<Vec2>;
};

struct TangentFrame {
    Vec3 tu, tv, tw;
};

struct Ray {
    Vec3 origin;
    Vec3 direction;
    double t_min = 0.0;
    double t_max = std::numeric_limits<double>::infinity();
};

struct SplatHit {
    std::size_t index = 0;
    Vec2 uv;
    double depth = 0.0;
    double weight = 0.0;
    Vec3 world_point;
};

/// Frame from a unit quaternion. The first two columns of the rotation
/// matrix are the tangents; the normal is their cross product.
inline TangentFrame tangent_frame(const Quat& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    TangentFrame f;
    f.tu = {1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)};
    f.tv = {2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)};
    f.tw = cross(f.tu, f.tv);
    return f;
}

inline Vec2 splat_scale(const Vec2& log_scale) {
    return {std::max(std::exp(log_scale.x), kMinScale), std::max(std::exp(log_scale.y), kMinScale)};
}

template <PlanarSplat S>
Vec3 plane_point(const S& s, double u, double v) {
    const TangentFrame f = tangent_frame(s.rotation);
    const Vec2 sc = splat_scale(s.log_scale);
    return s.center + (sc.x * u) * f.tu + (sc.y * v) * f.tv;
}

inline double gaussian_weight(double u, double v) { return std::exp(-0.5 * (u * u + v * v)); }

template <PlanarSplat S>
Vec3 splat_normal(const S& s) {
    return tangent_frame(s.rotation).tw;
}

inline Vec3 reflect(const Vec3& d_in, const Vec3& n) { return d_in - (2.0 * dot(d_in, n)) * n; }

/// Maps local homogeneous (u, v, w, 1) to world: columns are s_u t_u, s_v t_v,
/// t_w and the center. The third column uses the unit normal so the matrix
/// stays invertible.
template <PlanarSplat S>
Mat4 splat_affine(const S& s) {
    const TangentFrame f = tangent_frame(s.rotation);
    const Vec2 sc = splat_scale(s.log_scale);
    Mat4 h;
    for (int r = 0; r < 3; ++r) {
        h(r, 0) = sc.x * f.tu[static_cast<std::size_t>(r)];
        h(r, 1) = sc.y * f.tv[static_cast<std::size_t>(r)];
        h(r, 2) = f.tw[static_cast<std::size_t>(r)];
        h(r, 3) = s.center[static_cast<std::size_t>(r)];
    }
    h(3, 0) = h(3, 1) = h(3, 2) = 0.0;
    h(3, 3) = 1.0;
    return h;
}

/// Geometry needed to intersect a splat, precomputed once per splat.
struct SplatPlane {
    Vec3 center;
    TangentFrame frame;
    Vec2 scale;
};

template <PlanarSplat S>
SplatPlane splat_plane(const S& s) {
    return {s.center, tangent_frame(s.rotation), splat_scale(s.log_scale)};
}

/// Ray/plane intersection without range or cutoff tests. Returns false only
/// for rays parallel to the plane.
struct PlaneIntersection {
    double depth;
    double u, v;
};

inline bool intersect_plane(const Ray& ray, const SplatPlane& p, PlaneIntersection& out) {
    const double denom = dot(ray.direction, p.frame.tw);
    if (std::abs(denom) < 1e-12) return false;
    const Vec3 q = p.center - ray.origin;
    out.depth = dot(q, p.frame.tw) / denom;
    const Vec3 r = ray.origin + out.depth * ray.direction - p.center;
    out.u = dot(r, p.frame.tu) / p.scale.x;
    out.v = dot(r, p.frame.tv) / p.scale.y;
    return true;
}

inline std::optional<SplatHit> intersect_ray_plane(const Ray& ray, const SplatPlane& p, std::size_t index,
                                                   double cutoff) {
    PlaneIntersection pi{};
    if (!intersect_plane(ray, p, pi)) return std::nullopt;
    if (!(pi.depth >= ray.t_min && pi.depth <= ray.t_max)) return std::nullopt;
    const double w = gaussian_weight(pi.u, pi.v);
    if (!(w >= cutoff)) return std::nullopt;
    SplatHit hit;
    hit.index = index;
    hit.uv = {pi.u, pi.v};
    hit.depth = pi.depth;
    hit.weight = w;
    hit.world_point = p.center + (p.scale.x * pi.u) * p.frame.tu + (p.scale.y * pi.v) * p.frame.tv;
    return hit;
}

template <PlanarSplat S>
std::optional<SplatHit> intersect_ray_splat(const Ray& ray, const S& s, double cutoff = kDefaultCutoff,
                                            std::size_t index = 0) {
    return intersect_ray_plane(ray, splat_plane(s), index, cutoff);
}

// Real SH basis constants (graphics convention with Condon-Shortley phase).
inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kShC1 = 0.4886025119029199;
inline constexpr std::array<double, 5> kShC2{1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                             -1.0925484305920792, 0.5462742152960396};

/// The nine basis values at a unit direction. Entries above the degree are 0.
inline std::array<double, kShBasisCount> sh_basis(const Vec3& d, int degree) {
    std::array<double, kShBasisCount> b{};
    b[0] = kShC0;
    if (degree >= 1) {
        b[1] = -kShC1 * d.y;
        b[2] = kShC1 * d.z;
        b[3] = -kShC1 * d.x;
    }
    if (degree >= 2) {
        b[4] = kShC2[0] * d.x * d.y;
        b[5] = kShC2[1] * d.y * d.z;
        b[6] = kShC2[2] * (2.0 * d.z * d.z - d.x * d.x - d.y * d.y);
        b[7] = kShC2[3] * d.x * d.z;
        b[8] = kShC2[4] * (d.x * d.x - d.y * d.y);
    }
    return b;
}

/// Jacobian of sh_basis w.r.t. the direction components: grad[k] = dB_k/dd.
inline std::array<Vec3, kShBasisCount> sh_basis_grad(const Vec3& d, int degree) {
    std::array<Vec3, kShBasisCount> g{};
    if (degree >= 1) {
        g[1] = {0.0, -kShC1, 0.0};
        g[2] = {0.0, 0.0, kShC1};
        g[3] = {-kShC1, 0.0, 0.0};
    }
    if (degree >= 2) {
        g[4] = {kShC2[0] * d.y, kShC2[0] * d.x, 0.0};
        g[5] = {0.0, kShC2[1] * d.z, kShC2[1] * d.y};
        g[6] = {-2.0 * kShC2[2] * d.x, -2.0 * kShC2[2] * d.y, 4.0 * kShC2[2] * d.z};
        g[7] = {kShC2[3] * d.z, 0.0, kShC2[3] * d.x};
        g[8] = {2.0 * kShC2[4] * d.x, -2.0 * kShC2[4] * d.y, 0.0};
    }
    return g;
}

/// Unclamped SH color.
inline Vec3 eval_sh_raw(std::span<const double> coeffs, const Vec3& dir, int degree) {
    const int stored = static_cast<int>(std::lround(std::sqrt(static_cast<double>(coeffs.size() / 3)))) - 1;
    if (degree < 0 || degree > stored || degree > kMaxShDegree)
        throw std::invalid_argument("eval_sh: requested degree exceeds stored degree");
    const auto b = sh_basis(dir, degree);
    Vec3 c;
    for (int k = 0; k < sh_basis_count(degree); ++k) {
        const auto base = static_cast<std::size_t>(3 * k);
        c.x += b[static_cast<std::size_t>(k)] * coeffs[base];
        c.y += b[static_cast<std::size_t>(k)] * coeffs[base + 1];
        c.z += b[static_cast<std::size_t>(k)] * coeffs[base + 2];
    }
    return c;
}

/// SH color clamped to be non-negative per channel.
inline Vec3 eval_sh(std::span<const double> coeffs, const Vec3& dir, int degree) {
    const Vec3 c = eval_sh_raw(coeffs, dir, degree);
    return {std::max(c.x, 0.0), std::max(c.y, 0.0), std::max(c.z, 0.0)};
}

}  // namespace specsplat
