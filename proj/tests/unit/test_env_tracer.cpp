#include <gtest/gtest.h>

#include "specsplat/env_tracer.hpp"
#include "specsplat/fixtures.hpp"

using namespace specsplat;
using namespace specsplat::testing;

namespace {

Ray random_ray(Rng& rng) {
    return Ray{uniform_vec(rng, -1.0, 1.0), normalize(uniform_vec(rng, -1.0, 1.0)), 0.0,
               std::numeric_limits<double>::infinity()};
}

EnvSplat wall(double z, double opacity, const Vec3& color) {
    EnvSplat e;
    e.center = {0, 0, z};
    e.rotation = quat_facing({0, 0, -1});
    e.log_scale = {0.0, 0.0};
    e.opacity_logit = logit(opacity);
    e.sh_coeffs[0] = color.x / kShC0;
    e.sh_coeffs[1] = color.y / kShC0;
    e.sh_coeffs[2] = color.z / kShC0;
    return e;
}

}  // namespace

TEST(EnvTracer, AabbSlabTest) {
    Aabb b;
    b.expand(Vec3{-1, -1, -1});
    b.expand(Vec3{1, 1, 1});
    double t = 0.0;
    EXPECT_TRUE(b.intersect(Ray{{-5, 0, 0}, {1, 0, 0}}, t));
    EXPECT_DOUBLE_EQ(t, 4.0);
    EXPECT_FALSE(b.intersect(Ray{{-5, 2, 0}, {1, 0, 0}}, t));
    EXPECT_FALSE(b.intersect(Ray{{5, 0, 0}, {1, 0, 0}}, t));
    EXPECT_TRUE(b.intersect(Ray{{0, 0, 0}, {0, 1, 0}}, t));
    EXPECT_EQ(t, 0.0);
}

TEST(EnvTracer, BvhBoundsContainEverySplat) {
    Rng rng(1);
    const auto env = random_env_splats(rng, 300);
    const Bvh bvh = build_bvh(env);
    ASSERT_EQ(bvh.size(), env.size());
    const Aabb root = bvh.nodes()[0].box;
    std::vector<int> seen(env.size(), 0);
    for (const BvhNode& n : bvh.nodes()) {
        if (!n.leaf()) {
            EXPECT_TRUE(n.box.contains(bvh.nodes()[n.left].box));
            EXPECT_TRUE(n.box.contains(bvh.nodes()[n.right].box));
            continue;
        }
        EXPECT_LE(n.count, Bvh::kLeafSize);
        for (std::uint32_t k = n.first; k < n.first + n.count; ++k) {
            const std::uint32_t i = bvh.order()[k];
            ++seen[i];
            EXPECT_TRUE(n.box.contains(splat_bounds(bvh.planes()[i], bvh.cutoff())));
        }
    }
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    EXPECT_FALSE(root.empty());
    EXPECT_LE(bvh.depth(), 12);
}

TEST(EnvTracer, GatherMatchesBruteForce) {
    Rng rng(2);
    for (int scene = 0; scene < 5; ++scene) {
        const auto env = random_env_splats(rng, 400, 2.0);
        const Bvh bvh = build_bvh(env);
        TraceSettings ts;
        ts.k = 12;
        for (int i = 0; i < 200; ++i) {
            const Ray ray = random_ray(rng);
            const auto got = gather_k_hits(ray, bvh, ts);
            auto want = brute_force_hits(ray, env, ts.cutoff);
            if (want.size() > ts.k) want.resize(ts.k);
            ASSERT_EQ(got.size(), want.size());
            for (std::size_t h = 0; h < got.size(); ++h) {
                EXPECT_EQ(got[h].index, want[h].index);
                EXPECT_EQ(got[h].depth, want[h].depth);
            }
        }
    }
}

TEST(EnvTracer, CompositeByHandAndMissColor) {
    const std::vector<EnvSplat> env{wall(2.0, 0.5, {1, 0, 0}), wall(1.0, 0.25, {0, 0, 1})};
    const Bvh bvh = build_bvh(env);
    TraceSettings ts;
    ts.miss_color = {0, 1, 0};
    const Ray ray{{0, 0, 0}, {0, 0, 1}};
    const auto hits = gather_k_hits(ray, bvh, ts);
    ASSERT_EQ(hits.size(), 2u);
    EXPECT_EQ(hits[0].index, 1u);
    EXPECT_DOUBLE_EQ(hits[0].depth, 1.0);
    const TraceSample s = composite_trace(hits, env, ray.direction, 0, ts);
    EXPECT_NEAR(s.color.z, 0.25, 1e-12);
    EXPECT_NEAR(s.color.x, 0.75 * 0.5, 1e-12);
    EXPECT_NEAR(s.transmittance, 0.75 * 0.5, 1e-12);
    EXPECT_NEAR(s.color.y, 0.375, 1e-12);
    // A ray that misses everything returns the miss color.
    const TraceSample miss = composite_trace(gather_k_hits(Ray{{0, 0, 0}, {0, 0, -1}}, bvh, ts), env, {0, 0, -1}, 0, ts);
    EXPECT_EQ(miss.color, ts.miss_color);
    EXPECT_EQ(miss.transmittance, 1.0);
}

TEST(EnvTracer, KLimitsTheHitCount) {
    std::vector<EnvSplat> env;
    for (int i = 0; i < 10; ++i) env.push_back(wall(1.0 + i, 0.1, {1, 1, 1}));
    const Bvh bvh = build_bvh(env);
    TraceSettings ts;
    ts.k = 4;
    const auto hits = gather_k_hits(Ray{{0, 0, 0}, {0, 0, 1}}, bvh, ts);
    ASSERT_EQ(hits.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(hits[i].index, i);
}

TEST(EnvTracer, TraceSpecularMatchesBruteForceTrace) {
    Rng rng(3);
    const auto env = random_env_splats(rng, 200, 2.5);
    const Bvh bvh = build_bvh(env);
    TraceSettings ts;
    ts.k = 8;
    std::vector<Vec3> o, d;
    for (int i = 0; i < 300; ++i) {
        const Ray r = random_ray(rng);
        o.push_back(r.origin);
        d.push_back(r.direction);
    }
    const TraceResult tr = trace_specular(o, d, env, bvh, 2, ts, true);
    for (std::size_t i = 0; i < o.size(); ++i) {
        const TraceSample want = brute_force_trace(Ray{o[i], d[i]}, env, 2, ts);
        EXPECT_NEAR(norm(tr.color[i] - want.color), 0.0, 1e-12);
        EXPECT_NEAR(tr.transmittance[i], want.transmittance, 1e-12);
        EXPECT_EQ(tr.hits[i].size(), want.used);
    }
    EXPECT_THROW(trace_specular(o, std::vector<Vec3>(1), env, bvh, 2, ts), std::invalid_argument);
    ts.k = 0;
    EXPECT_THROW(trace_specular(o, d, env, bvh, 2, ts), std::invalid_argument);
}
