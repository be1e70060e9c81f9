#include <gtest/gtest.h>

#include <numbers>

#include "specsplat/fixtures.hpp"
#include "specsplat/scene.hpp"
#include "specsplat/splat_math.hpp"

using namespace specsplat;
using namespace specsplat::testing;

namespace {

SplatPrimitive random_splat(Rng& rng) {
    SplatPrimitive s;
    s.center = uniform_vec(rng, -1.0, 1.0);
    s.rotation = random_rotation(rng);
    s.log_scale = {std::log(uniform(rng, 0.1, 0.5)), std::log(uniform(rng, 0.1, 0.5))};
    return s;
}

}  // namespace

TEST(SplatMath, TangentFrameIsRightHandedOrthonormal) {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        const Quat q = random_rotation(rng);
        const TangentFrame f = tangent_frame(q);
        EXPECT_NEAR(norm(f.tu), 1.0, 1e-12);
        EXPECT_NEAR(norm(f.tv), 1.0, 1e-12);
        EXPECT_NEAR(dot(f.tu, f.tv), 0.0, 1e-12);
        EXPECT_NEAR(norm(f.tw - rotate(q, {0, 0, 1})), 0.0, 1e-12);
        EXPECT_NEAR(norm(f.tu - rotate(q, {1, 0, 0})), 0.0, 1e-12);
    }
}

TEST(SplatMath, ScaleIsClampedBelow) {
    const Vec2 s = splat_scale({-100.0, std::log(0.3)});
    EXPECT_EQ(s.x, kMinScale);
    EXPECT_NEAR(s.y, 0.3, 1e-15);
}

TEST(SplatMath, AffineMapsLocalCoordinatesToPlanePoints) {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const SplatPrimitive s = random_splat(rng);
        const Mat4 h = splat_affine(s);
        const double u = uniform(rng, -2, 2), v = uniform(rng, -2, 2);
        const Vec3 p = plane_point(s, u, v);
        for (int r = 0; r < 3; ++r)
            EXPECT_NEAR(h(r, 0) * u + h(r, 1) * v + h(r, 3), p[static_cast<std::size_t>(r)], 1e-12);
    }
}

TEST(SplatMath, RayHitRecoversLocalCoordinates) {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const SplatPrimitive s = random_splat(rng);
        const double u = uniform(rng, -2.5, 2.5), v = uniform(rng, -2.5, 2.5);
        const Vec3 target = plane_point(s, u, v);
        const Vec3 origin = target + uniform(rng, 1.0, 3.0) * normalize(uniform_vec(rng, -1, 1));
        const Vec3 dir = normalize(target - origin);
        if (std::abs(dot(dir, splat_normal(s))) < 0.05) continue;
        const auto hit = intersect_ray_splat(Ray{origin, dir}, s, 0.0, 7);
        ASSERT_TRUE(hit);
        EXPECT_EQ(hit->index, 7u);
        EXPECT_NEAR(hit->uv.x, u, 1e-9);
        EXPECT_NEAR(hit->uv.y, v, 1e-9);
        EXPECT_NEAR(hit->depth, norm(target - origin), 1e-9);
        EXPECT_NEAR(hit->weight, std::exp(-0.5 * (u * u + v * v)), 1e-9);
        EXPECT_NEAR(norm(hit->world_point - target), 0.0, 1e-9);
    }
}

TEST(SplatMath, IntersectionRejections) {
    SplatPrimitive s;
    s.log_scale = {0.0, 0.0};
    // Parallel to the plane.
    EXPECT_FALSE(intersect_ray_splat(Ray{{0, 0, -1}, {1, 0, 0}}, s));
    // Behind the origin.
    EXPECT_FALSE(intersect_ray_splat(Ray{{0, 0, 1}, {0, 0, 1}}, s));
    // Outside the kernel cutoff (radius 3).
    EXPECT_FALSE(intersect_ray_splat(Ray{{3.1, 0, -1}, {0, 0, 1}}, s));
    EXPECT_TRUE(intersect_ray_splat(Ray{{2.9, 0, -1}, {0, 0, 1}}, s));
    // Range limit.
    EXPECT_FALSE(intersect_ray_splat(Ray{{0, 0, -1}, {0, 0, 1}, 0.0, 0.5}, s));
}

TEST(SplatMath, ReflectionProperties) {
    Rng rng(13);
    for (int i = 0; i < 1000; ++i) {
        const Vec3 n = normalize(uniform_vec(rng, -1, 1));
        const Vec3 d = normalize(uniform_vec(rng, -1, 1));
        const Vec3 r = reflect(d, n);
        EXPECT_NEAR(norm(r), 1.0, 1e-12);
        EXPECT_NEAR(dot(r, n), -dot(d, n), 1e-12);
        EXPECT_NEAR(norm(reflect(r, n) - d), 0.0, 1e-12);
        // The tangential part is unchanged.
        EXPECT_NEAR(norm((r - dot(r, n) * n) - (d - dot(d, n) * n)), 0.0, 1e-12);
    }
    EXPECT_EQ(reflect({1, 0, 0}, {0, 0, 1}), (Vec3{1, 0, 0}));
    EXPECT_EQ(reflect({0, 0, 1}, {0, 0, 1}), (Vec3{0, 0, -1}));
}

TEST(SplatMath, ShBasisIsOrthonormalOverTheSphere) {
    // Midpoint quadrature in (theta, phi).
    const int nt = 300, np = 600;
    std::array<std::array<double, kShBasisCount>, kShBasisCount> gram{};
    for (int i = 0; i < nt; ++i) {
        const double th = (i + 0.5) * std::numbers::pi / nt;
        for (int j = 0; j < np; ++j) {
            const double ph = (j + 0.5) * 2.0 * std::numbers::pi / np;
            const Vec3 d{std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)};
            const auto b = sh_basis(d, 2);
            const double w = std::sin(th) * (std::numbers::pi / nt) * (2.0 * std::numbers::pi / np);
            for (std::size_t a = 0; a < kShBasisCount; ++a)
                for (std::size_t c = 0; c < kShBasisCount; ++c) gram[a][c] += w * b[a] * b[c];
        }
    }
    for (std::size_t a = 0; a < kShBasisCount; ++a)
        for (std::size_t c = 0; c < kShBasisCount; ++c) EXPECT_NEAR(gram[a][c], a == c ? 1.0 : 0.0, 1e-4);
}

TEST(SplatMath, ShGradientMatchesFiniteDifferences) {
    Rng rng(17);
    for (int i = 0; i < 20; ++i) {
        const Vec3 d = normalize(uniform_vec(rng, -1, 1));
        const auto g = sh_basis_grad(d, 2);
        for (std::size_t a = 0; a < 3; ++a) {
            Vec3 dp = d, dm = d;
            dp[a] += 1e-6;
            dm[a] -= 1e-6;
            const auto bp = sh_basis(dp, 2), bm = sh_basis(dm, 2);
            for (std::size_t k = 0; k < kShBasisCount; ++k) EXPECT_NEAR(g[k][a], (bp[k] - bm[k]) / 2e-6, 1e-8);
        }
    }
}

TEST(SplatMath, ShEvaluationDegreesAndClamp) {
    ShCoeffs c{};
    c[0] = 1.0, c[1] = -1.0, c[2] = 2.0;
    const Vec3 dc = eval_sh(c, {0, 0, 1}, 0);
    EXPECT_DOUBLE_EQ(dc.x, kShC0);
    EXPECT_EQ(dc.y, 0.0);
    EXPECT_DOUBLE_EQ(dc.z, 2.0 * kShC0);
    EXPECT_LT(eval_sh_raw(c, {0, 0, 1}, 0).y, 0.0);
    // A degree-1 z term only changes colors along z.
    c[3 * 2] = 0.5;
    EXPECT_DOUBLE_EQ(eval_sh(c, {0, 0, 1}, 1).x, kShC0 + 0.5 * kShC1);
    EXPECT_DOUBLE_EQ(eval_sh(c, {1, 0, 0}, 1).x, kShC0);
    EXPECT_THROW(eval_sh(c, {0, 0, 1}, 3), std::invalid_argument);
    const std::array<double, 3> only_dc{1, 1, 1};
    EXPECT_THROW(eval_sh(only_dc, {0, 0, 1}, 1), std::invalid_argument);
}

TEST(SplatMath, QuatFacingPointsTheNormal) {
    Rng rng(19);
    for (int i = 0; i < 100; ++i) {
        const Vec3 n = normalize(uniform_vec(rng, -1, 1));
        EXPECT_NEAR(norm(tangent_frame(quat_facing(n)).tw - n), 0.0, 1e-12);
    }
    EXPECT_NEAR(norm(tangent_frame(quat_facing({0, 0, -1})).tw - Vec3{0, 0, -1}), 0.0, 1e-12);
}
