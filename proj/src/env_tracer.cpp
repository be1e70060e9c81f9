#include "specsplat/env_tracer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "specsplat/rasterizer.hpp"

namespace specsplat {

void Aabb::expand(const Vec3& p) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
}

void Aabb::expand(const Aabb& b) {
    if (b.empty()) return;
    expand(b.lo);
    expand(b.hi);
}

bool Aabb::contains(const Aabb& b) const {
    return lo.x <= b.lo.x && lo.y <= b.lo.y && lo.z <= b.lo.z && hi.x >= b.hi.x && hi.y >= b.hi.y && hi.z >= b.hi.z;
}

bool Aabb::intersect(const Ray& ray, double& t_enter) const {
    double t0 = ray.t_min, t1 = ray.t_max;
    for (std::size_t a = 0; a < 3; ++a) {
        const double o = ray.origin[a], d = ray.direction[a];
        if (d == 0.0) {
            if (o < lo[a] || o > hi[a]) return false;
            continue;
        }
        const double inv = 1.0 / d;
        double ta = (lo[a] - o) * inv, tb = (hi[a] - o) * inv;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    t_enter = t0;
    return true;
}

Aabb splat_bounds(const SplatPlane& p, double cutoff) {
    const double r = std::sqrt(-2.0 * std::log(cutoff));
    Aabb b;
    Vec3 ext;
    for (std::size_t a = 0; a < 3; ++a) {
        const double eu = p.scale.x * p.frame.tu[a], ev = p.scale.y * p.frame.tv[a];
        ext[a] = r * std::sqrt(eu * eu + ev * ev);
        // Padding keeps flat boxes robust to rounding in the slab test.
        ext[a] += 1e-9 * (1.0 + std::abs(p.center[a]) + ext[a]);
    }
    b.lo = p.center - ext;
    b.hi = p.center + ext;
    return b;
}

int Bvh::depth() const {
    if (nodes_.empty()) return 0;
    int best = 0;
    std::vector<std::pair<std::uint32_t, int>> stack{{0u, 1}};
    while (!stack.empty()) {
        const auto [n, d] = stack.back();
        stack.pop_back();
        best = std::max(best, d);
        if (!nodes_[n].leaf()) {
            stack.push_back({nodes_[n].left, d + 1});
            stack.push_back({nodes_[n].right, d + 1});
        }
    }
    return best;
}

Bvh build_bvh(std::span<const EnvSplat> splats, double cutoff) {
    Bvh bvh;
    bvh.cutoff_ = cutoff;
    const std::size_t n = splats.size();
    if (n == 0) return bvh;
    bvh.planes_.reserve(n);
    std::vector<Aabb> bounds(n);
    std::vector<Vec3> centroid(n);
    for (std::size_t i = 0; i < n; ++i) {
        bvh.planes_.push_back(splat_plane(splats[i]));
        bounds[i] = splat_bounds(bvh.planes_[i], cutoff);
        centroid[i] = bvh.planes_[i].center;
    }
    bvh.order_.resize(n);
    std::iota(bvh.order_.begin(), bvh.order_.end(), 0u);

    struct Task {
        std::uint32_t node, first, count;
    };
    bvh.nodes_.emplace_back();
    std::vector<Task> stack{{0, 0, static_cast<std::uint32_t>(n)}};
    while (!stack.empty()) {
        const Task t = stack.back();
        stack.pop_back();
        Aabb box, cbox;
        for (std::uint32_t i = t.first; i < t.first + t.count; ++i) {
            box.expand(bounds[bvh.order_[i]]);
            cbox.expand(centroid[bvh.order_[i]]);
        }
        bvh.nodes_[t.node].box = box;
        if (t.count <= Bvh::kLeafSize) {
            bvh.nodes_[t.node].first = t.first;
            bvh.nodes_[t.node].count = t.count;
            continue;
        }
        const Vec3 ext = cbox.hi - cbox.lo;
        const std::size_t axis = (ext.x >= ext.y && ext.x >= ext.z) ? 0 : (ext.y >= ext.z ? 1 : 2);
        const std::uint32_t half = t.count / 2;
        auto begin = bvh.order_.begin() + t.first;
        std::nth_element(begin, begin + half, begin + t.count, [&](std::uint32_t a, std::uint32_t b) {
            const double ca = centroid[a][axis], cb = centroid[b][axis];
            return ca < cb || (ca == cb && a < b);
        });
        const auto left = static_cast<std::uint32_t>(bvh.nodes_.size());
        bvh.nodes_.emplace_back();
        bvh.nodes_.emplace_back();
        bvh.nodes_[t.node].left = left;
        bvh.nodes_[t.node].right = left + 1;
        stack.push_back({left, t.first, half});
        stack.push_back({left + 1, t.first + half, t.count - half});
    }
    return bvh;
}

namespace {

bool hit_before(const SplatHit& a, const SplatHit& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
}

}  // namespace

std::vector<SplatHit> gather_k_hits(const Ray& ray, const Bvh& bvh, const TraceSettings& settings) {
    std::vector<SplatHit> best;
    if (bvh.empty() || settings.k == 0) return best;
    best.reserve(settings.k + 1);
    const auto& nodes = bvh.nodes();
    const auto& order = bvh.order();
    const auto& planes = bvh.planes();

    auto worst_depth = [&] {
        return best.size() < settings.k ? std::numeric_limits<double>::infinity() : best.back().depth;
    };

    double t_root = 0.0;
    if (!nodes[0].box.intersect(ray, t_root)) return best;
    std::vector<std::pair<std::uint32_t, double>> stack{{0u, t_root}};
    while (!stack.empty()) {
        const auto [id, t_enter] = stack.back();
        stack.pop_back();
        // A tie in depth may still win on index, so prune strictly.
        if (t_enter > worst_depth()) continue;
        const BvhNode& node = nodes[id];
        if (node.leaf()) {
            for (std::uint32_t k = node.first; k < node.first + node.count; ++k) {
                const std::uint32_t i = order[k];
                auto hit = intersect_ray_plane(ray, planes[i], i, settings.cutoff);
                if (!hit) continue;
                if (best.size() == settings.k && !hit_before(*hit, best.back())) continue;
                best.insert(std::upper_bound(best.begin(), best.end(), *hit, hit_before), *hit);
                if (best.size() > settings.k) best.pop_back();
            }
            continue;
        }
        double ta = 0.0, tb = 0.0;
        const bool ha = nodes[node.left].box.intersect(ray, ta);
        const bool hb = nodes[node.right].box.intersect(ray, tb);
        // Push the farther child first so the nearer one is visited next.
        if (ha && hb) {
            if (ta <= tb) {
                stack.push_back({node.right, tb});
                stack.push_back({node.left, ta});
            } else {
                stack.push_back({node.left, ta});
                stack.push_back({node.right, tb});
            }
        } else if (ha) {
            stack.push_back({node.left, ta});
        } else if (hb) {
            stack.push_back({node.right, tb});
        }
    }
    return best;
}

std::vector<SplatHit> brute_force_hits(const Ray& ray, std::span<const EnvSplat> splats, double cutoff) {
    std::vector<SplatHit> hits;
    for (std::size_t i = 0; i < splats.size(); ++i)
        if (auto h = intersect_ray_splat(ray, splats[i], cutoff, i)) hits.push_back(*h);
    std::sort(hits.begin(), hits.end(), hit_before);
    return hits;
}

TraceSample composite_trace(std::span<const SplatHit> hits, std::span<const EnvSplat> splats, const Vec3& direction,
                            int sh_degree, const TraceSettings& settings) {
    TraceSample s;
    double T = 1.0;
    for (const SplatHit& h : hits) {
        const EnvSplat& e = splats[h.index];
        const double a = sigmoid(e.opacity_logit) * h.weight;
        s.color += (a * T) * eval_sh(e.sh_coeffs, direction, sh_degree);
        T *= 1.0 - a;
        ++s.used;
        if (T < settings.early_stop) break;
    }
    s.color += T * settings.miss_color;
    s.transmittance = T;
    return s;
}

TraceSample brute_force_trace(const Ray& ray, std::span<const EnvSplat> splats, int sh_degree,
                              const TraceSettings& settings) {
    auto hits = brute_force_hits(ray, splats, settings.cutoff);
    if (hits.size() > settings.k) hits.resize(settings.k);
    return composite_trace(hits, splats, ray.direction, sh_degree, settings);
}

TraceResult trace_specular(std::span<const Vec3> origins, std::span<const Vec3> directions,
                           std::span<const EnvSplat> splats, const Bvh& bvh, int sh_degree,
                           const TraceSettings& settings, bool keep_hits) {
    if (origins.size() != directions.size()) throw std::invalid_argument("trace_specular: origin/direction count mismatch");
    if (settings.k < 1) throw std::invalid_argument("trace_specular: k must be at least 1");
    if (bvh.size() != splats.size()) throw std::invalid_argument("trace_specular: BVH built for a different splat set");
    const std::size_t n = origins.size();
    TraceResult out;
    out.color.resize(n);
    out.transmittance.assign(n, 1.0);
    if (keep_hits) out.hits.resize(n);
    constexpr std::size_t kChunk = 256;
    parallel_for((n + kChunk - 1) / kChunk, settings.workers, [&](std::size_t c) {
        for (std::size_t i = c * kChunk; i < std::min(n, (c + 1) * kChunk); ++i) {
            const Ray ray{origins[i], directions[i], 0.0, std::numeric_limits<double>::infinity()};
            auto hits = gather_k_hits(ray, bvh, settings);
            const TraceSample s = composite_trace(hits, splats, directions[i], sh_degree, settings);
            out.color[i] = s.color;
            out.transmittance[i] = s.transmittance;
            if (keep_hits) {
                hits.resize(s.used);
                out.hits[i] = std::move(hits);
            }
        }
    });
    return out;
}

}  // namespace specsplat
