#include <gtest/gtest.h>

#include "specsplat/fixtures.hpp"
#include "specsplat/rasterizer.hpp"

using namespace specsplat;
using namespace specsplat::testing;

namespace {

double max_diff(const RenderBuffers& a, const RenderBuffers& b) {
    double m = 0.0;
    for (std::size_t p = 0; p < a.pixel_count(); ++p) {
        m = std::max(m, norm(a.diffuse[p] - b.diffuse[p]));
        m = std::max(m, std::abs(a.depth[p] - b.depth[p]));
        m = std::max(m, norm(a.normal[p] - b.normal[p]));
        m = std::max(m, std::abs(a.alpha_spec[p] - b.alpha_spec[p]));
    }
    return m;
}

SplatPrimitive facing_splat(const Vec3& center, double opacity, const Vec3& color, double tint) {
    SplatPrimitive s;
    s.center = center;
    s.rotation = quat_facing({0, 0, -1});
    s.log_scale = {std::log(0.4), std::log(0.4)};
    s.opacity_logit = logit(opacity);
    s.tint_logit = logit(tint);
    s.sh_coeffs[0] = color.x / kShC0;
    s.sh_coeffs[1] = color.y / kShC0;
    s.sh_coeffs[2] = color.z / kShC0;
    return s;
}

}  // namespace

TEST(Rasterizer, EmptySceneIsBackground) {
    RenderSettings rs;
    rs.background = {0.1, 0.2, 0.3};
    const RenderBuffers b = render(std::vector<SplatPrimitive>{}, default_camera(8, 6), 2, rs);
    for (std::size_t p = 0; p < b.pixel_count(); ++p) {
        EXPECT_EQ(b.diffuse[p], rs.background);
        EXPECT_EQ(b.accum[p], 0.0);
        EXPECT_EQ(b.depth[p], rs.far);
        EXPECT_EQ(b.normal[p], Vec3{});
    }
}

TEST(Rasterizer, TwoLayerCompositeByHand) {
    // Camera at z = -3 looking down +z; two splats centered on the axis.
    const Camera cam = default_camera(9, 9);
    const std::vector<SplatPrimitive> splats{facing_splat({0, 0, 1}, 0.5, {0, 0, 1}, 0.8),
                                             facing_splat({0, 0, 0}, 0.6, {1, 0, 0}, 0.2)};
    RenderSettings rs;
    rs.background = {0, 1, 0};
    const RenderBuffers b = render(splats, cam, 0, rs);
    const std::size_t c = 4 * 9 + 4;
    const Vec3 d = cam.pixel_direction(4, 4);
    ASSERT_NEAR(norm(d - Vec3{0, 0, 1}), 0.0, 1e-12);
    // Near splat (z = 0) first, then far splat (z = 1), both at full kernel weight.
    const double a0 = 0.6, a1 = 0.5;
    const double T1 = 1 - a0, T2 = T1 * (1 - a1);
    EXPECT_NEAR(b.diffuse[c].x, a0, 1e-12);
    EXPECT_NEAR(b.diffuse[c].z, T1 * a1, 1e-12);
    EXPECT_NEAR(b.diffuse[c].y, T2, 1e-12);
    EXPECT_NEAR(b.alpha_spec[c], a0 * 0.2 + T1 * a1 * 0.8, 1e-12);
    EXPECT_NEAR(b.accum[c], 1 - T2, 1e-12);
    EXPECT_NEAR(b.depth[c], (a0 * 3.0 + T1 * a1 * 4.0) / (1 - T2), 1e-12);
    EXPECT_NEAR(norm(b.normal[c] - Vec3{0, 0, -1}), 0.0, 1e-12);
}

TEST(Rasterizer, FlipNormalsFacesCamera) {
    const Camera cam = default_camera(5, 5);
    SplatPrimitive s = facing_splat({0, 0, 0}, 0.9, {1, 1, 1}, 0.5);
    s.rotation = quat_facing({0, 0, 1});
    RenderSettings rs;
    EXPECT_GT(render(std::vector{s}, cam, 0, rs).normal[12].z, 0.99);
    rs.flip_normals = true;
    EXPECT_LT(render(std::vector{s}, cam, 0, rs).normal[12].z, -0.99);
}

TEST(Rasterizer, EarlyStopIncludesTheCrossingHit) {
    std::vector<CompositeHit> hits(5);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        hits[i].depth = 1.0 + static_cast<double>(i);
        hits[i].alpha_base = 0.9;
        hits[i].weight = 1.0;
        hits[i].color = {1, 1, 1};
    }
    RenderSettings rs;
    rs.early_stop = 5e-3;
    // T after k hits is 0.1^k: 0.1, 0.01, 0.001 < 5e-3 on the third.
    const PixelResult r = composite_pixel(hits, rs);
    EXPECT_EQ(r.used, 3u);
    EXPECT_NEAR(r.transmittance, 1e-3, 1e-15);
}

TEST(Rasterizer, MatchesOracleOnRandomScenes) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng(seed);
        const auto splats = random_main_splats(rng, 60);
        const Camera cam = default_camera(40, 32, 0.0);
        RenderSettings rs;
        rs.background = uniform_vec(rng, 0, 1);
        rs.flip_normals = seed % 2 == 1;
        EXPECT_LT(max_diff(render(splats, cam, 2, rs), oracle_render(splats, cam, 2, rs)), 1e-9) << seed;
    }
}

TEST(Rasterizer, TileSizeDoesNotChangeTheImage) {
    Rng rng(9);
    const auto splats = random_main_splats(rng, 80);
    const Camera cam = default_camera(50, 37);
    RenderSettings a, b;
    a.tile_size = 16;
    b.tile_size = 7;
    EXPECT_EQ(max_diff(render(splats, cam, 2, a), render(splats, cam, 2, b)), 0.0);
}

TEST(Rasterizer, TransmittanceInvariants) {
    Rng rng(10);
    const auto splats = random_main_splats(rng, 100);
    RenderSettings rs;
    const RenderBuffers b = render(splats, default_camera(32, 32), 2, rs);
    for (std::size_t p = 0; p < b.pixel_count(); ++p) {
        EXPECT_GE(b.transmittance[p], 0.0);
        EXPECT_LE(b.transmittance[p], 1.0);
        EXPECT_NEAR(b.accum[p] + b.transmittance[p], 1.0, 1e-15);
        EXPECT_GE(b.alpha_spec[p], 0.0);
        EXPECT_LE(b.alpha_spec[p], b.accum[p] + 1e-15);
        if (b.normal[p] != Vec3{}) {
            EXPECT_NEAR(norm(b.normal[p]), 1.0, 1e-12);
        }
    }
}

TEST(Rasterizer, PseudoNormalsOfAPlane) {
    // A fronto-parallel wall at z = 2 gives pseudo normals facing the camera.
    const Camera cam = default_camera(16, 16);
    std::vector<double> depth(256);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) depth[static_cast<std::size_t>(y * 16 + x)] = 5.0 / cam.pixel_direction(x, y).z;
    const PseudoNormals pn = pseudo_normals_from_depth(depth, cam);
    for (std::size_t p = 0; p < 256; ++p) {
        ASSERT_TRUE(pn.valid[p]);
        EXPECT_NEAR(norm(pn.normals[p] - Vec3{0, 0, -1}), 0.0, 1e-9);
    }
}

TEST(Rasterizer, ParallelForCoversEveryIndexOnce) {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
    EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
}
