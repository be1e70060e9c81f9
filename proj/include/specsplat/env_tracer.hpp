#pragma once

// Reflection rays against environment splats: a median-split BVH over the
// splats' cutoff ellipses, k-nearest hit gathering and compositing.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "specsplat/scene.hpp"
#include "specsplat/splat_math.hpp"

namespace specsplat {

struct TraceSettings {
    std::size_t k = 16;
    double cutoff = kDefaultCutoff;
    double early_stop = 1e-4;
    /// Offset along the surface normal applied to reflection origins.
    double epsilon = 1e-3;
    Vec3 miss_color;
    unsigned workers = 0;
};

struct Aabb {
    Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity()};
    Vec3 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
            -std::numeric_limits<double>::infinity()};

    void expand(const Vec3& p);
    void expand(const Aabb& b);
    bool contains(const Aabb& b) const;
    bool empty() const { return lo.x > hi.x; }
    /// Slab test clipped to [t0, t1]; writes the entry distance.
    bool intersect(const Ray& ray, double& t_enter) const;
};

/// Bounds of the splat's cutoff ellipse.
Aabb splat_bounds(const SplatPlane& plane, double cutoff);

struct BvhNode {
    Aabb box;
    /// Child node ids for interior nodes.
    std::uint32_t left = 0, right = 0;
    /// Leaves: range into Bvh::order.
    std::uint32_t first = 0, count = 0;
    bool leaf() const { return count > 0; }
};

class Bvh {
public:
    static constexpr std::size_t kLeafSize = 4;
    static constexpr int kMaxDepth = 64;

    bool empty() const { return nodes_.empty(); }
    std::size_t size() const { return planes_.size(); }
    int depth() const;
    const std::vector<BvhNode>& nodes() const { return nodes_; }
    /// Splat indices grouped by leaf.
    const std::vector<std::uint32_t>& order() const { return order_; }
    const std::vector<SplatPlane>& planes() const { return planes_; }
    double cutoff() const { return cutoff_; }

private:
    friend Bvh build_bvh(std::span<const EnvSplat> splats, double cutoff);
    std::vector<BvhNode> nodes_;
    std::vector<std::uint32_t> order_;
    std::vector<SplatPlane> planes_;
    double cutoff_ = kDefaultCutoff;
};

Bvh build_bvh(std::span<const EnvSplat> splats, double cutoff = kDefaultCutoff);

/// The k nearest hits (by depth, then index) with weight >= cutoff and depth
/// within the ray range, ascending.
std::vector<SplatHit> gather_k_hits(const Ray& ray, const Bvh& bvh, const TraceSettings& settings);

/// Every hit of every splat, fully sorted. No truncation.
std::vector<SplatHit> brute_force_hits(const Ray& ray, std::span<const EnvSplat> splats, double cutoff);

struct TraceSample {
    Vec3 color;
    double transmittance = 1.0;
    /// Hits composited before the early stop.
    std::size_t used = 0;
};

/// Blends sorted hits with per-hit SH colors evaluated along the ray.
TraceSample composite_trace(std::span<const SplatHit> hits, std::span<const EnvSplat> splats, const Vec3& direction,
                            int sh_degree, const TraceSettings& settings);

/// Exhaustive enumeration truncated to k, then the same blend.
TraceSample brute_force_trace(const Ray& ray, std::span<const EnvSplat> splats, int sh_degree,
                              const TraceSettings& settings);

struct TraceResult {
    std::vector<Vec3> color;
    std::vector<double> transmittance;
    /// Composited hits per ray when requested.
    std::vector<std::vector<SplatHit>> hits;
};

/// Rays start at origins[i] with t_min = 0; callers apply the epsilon offset.
TraceResult trace_specular(std::span<const Vec3> origins, std::span<const Vec3> directions,
                           std::span<const EnvSplat> splats, const Bvh& bvh, int sh_degree,
                           const TraceSettings& settings, bool keep_hits = false);

}  // namespace specsplat
