#include <gtest/gtest.h>

#include <fstream>

#include "specsplat/fixtures.hpp"
#include "specsplat/pipeline.hpp"
#include "specsplat/scene.hpp"

using namespace specsplat;
using namespace specsplat::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("specsplat_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Scene, JsonRoundTripIsExact) {
    Rng rng(2);
    const Scene s = random_scene(rng, {7, 5, true});
    const Scene t = scene_from_json(scene_to_json(s));
    EXPECT_EQ(flatten_parameters(t), flatten_parameters(s));
    EXPECT_EQ(t.sh_degree, s.sh_degree);
    EXPECT_EQ(t.main_field, s.main_field);
    EXPECT_EQ(t.env_field, s.env_field);

    const fs::path dir = temp_dir("scene");
    save_scene(s, dir / "s.json");
    EXPECT_EQ(flatten_parameters(load_scene(dir / "s.json")), flatten_parameters(s));
}

TEST(Scene, ValidationNamesTheOffendingField) {
    Rng rng(4);
    Scene s = random_scene(rng, {3, 2, false});
    s.main[1].rotation = {2.0, 0.0, 0.0, 0.0};
    try {
        validate_scene(s);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("main[1].rotation"), std::string::npos);
    }
    s = random_scene(rng, {3, 2, false});
    s.env[0].center.y = std::nan("");
    EXPECT_THROW(validate_scene(s), ValidationError);
}

TEST(Scene, MalformedJsonReportsLine) {
    try {
        scene_from_json("{\n  \"header\": {\n   oops }");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
    EXPECT_THROW(scene_from_json("{}"), ParseError);
}

TEST(Scene, PfmRoundTripIsFloatExact) {
    Rng rng(6);
    Image img(13, 7, 3);
    for (double& v : img.data) v = static_cast<float>(uniform(rng, -1.0, 2.0));
    const fs::path dir = temp_dir("pfm");
    save_image(img, dir / "a.pfm");
    const Image back = load_image(dir / "a.pfm", 13, 7);
    EXPECT_EQ(back.data, img.data);
    EXPECT_THROW(load_image(dir / "a.pfm", 12, 7), std::exception);
}

TEST(Scene, PpmRoundTripQuantizes) {
    Rng rng(8);
    Image img(5, 4, 3);
    for (double& v : img.data) v = uniform(rng, 0.0, 1.0);
    const fs::path dir = temp_dir("ppm");
    save_image(img, dir / "a.ppm");
    const Image back = load_image(dir / "a.ppm");
    ASSERT_EQ(back.data.size(), img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255.0 + 1e-12);
}

TEST(Scene, NormalMapRoundTripFlagsInvalid) {
    NormalMap m;
    m.width = 2;
    m.height = 1;
    m.normals = {{0, 0, 2}, {0, 0, 0}};
    m.valid = {1, 0};
    const fs::path dir = temp_dir("normals");
    save_normal_map(m, dir / "n.pfm");
    const NormalMap back = load_normal_map(dir / "n.pfm");
    EXPECT_EQ(back.valid, (std::vector<std::uint8_t>{1, 0}));
    EXPECT_NEAR(norm(back.normals[0] - Vec3{0, 0, 1}), 0.0, 1e-7);
}

TEST(Scene, LookAtCamera) {
    const Camera c = Camera::look_at({1, 2, -3}, {0, 0, 0}, {0, 1, 0}, 64, 48, 60.0, 0.25);
    EXPECT_NEAR(norm(c.center() - Vec3{1, 2, -3}), 0.0, 1e-12);
    const Vec3 forward = normalize(Vec3{-1, -2, 3});
    // Pixel centers straddle the principal point, so average the middle four.
    const Vec3 mid = normalize(c.pixel_direction(31, 23) + c.pixel_direction(32, 23) + c.pixel_direction(31, 24) +
                               c.pixel_direction(32, 24));
    EXPECT_NEAR(norm(mid - forward), 0.0, 1e-12);
    EXPECT_NEAR(c.fy, 24.0 / std::tan(30.0 * std::numbers::pi / 180.0), 1e-9);
    EXPECT_NO_THROW(validate_camera(c));
    Camera bad = c;
    bad.time = 1.5;
    EXPECT_THROW(validate_camera(bad), ValidationError);
}

TEST(Scene, CameraFileRoundTrip) {
    std::vector<Frame> frames;
    for (int i = 0; i < 3; ++i)
        frames.push_back({Camera::look_at({0.5 * i, 0.2, -3}, {0, 0, 0}, {0, 1, 0}, 20, 10, 45, 0.1 * i),
                          "img_" + std::to_string(i) + ".pfm", std::nullopt});
    frames[1].normal_map = "n1.pfm";
    const fs::path dir = temp_dir("cams");
    save_cameras(frames, dir / "c.json");
    const auto back = load_cameras(dir / "c.json");
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back[i].image, frames[i].image);
        EXPECT_EQ(back[i].camera.time, frames[i].camera.time);
        EXPECT_EQ(back[i].camera.fx, frames[i].camera.fx);
        EXPECT_NEAR(norm(back[i].camera.center() - frames[i].camera.center()), 0.0, 1e-12);
    }
    EXPECT_EQ(back[1].normal_map, frames[1].normal_map);
}

TEST(Scene, Base64RoundTrip) {
    std::vector<std::uint8_t> bytes;
    for (int n = 0; n < 10; ++n) {
        EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
        bytes.push_back(static_cast<std::uint8_t>(37 * n + 250));
    }
    EXPECT_EQ(base64_encode(std::vector<std::uint8_t>{'M', 'a'}), "TWE=");
}

TEST(Scene, InitFromPointsAndEnvSphere) {
    const std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    const std::vector<Vec3> cols{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    InitConfig ic;
    const auto splats = init_from_points(pts, cols, ic);
    ASSERT_EQ(splats.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(splats[i].center, pts[i]);
        EXPECT_NEAR(sigmoid(splats[i].opacity_logit), ic.opacity, 1e-12);
        EXPECT_NEAR(sigmoid(splats[i].tint_logit), ic.tint, 1e-12);
        EXPECT_NEAR(norm(eval_sh(splats[i].sh_coeffs, {0, 0, 1}, 0) - cols[i]), 0.0, 1e-12);
    }
    EnvSphereConfig ec;
    ec.count = 50;
    ec.radius = 4.0;
    const auto env = init_env_sphere(ec);
    ASSERT_EQ(env.size(), 50u);
    for (const EnvSplat& e : env) {
        EXPECT_NEAR(norm(e.center), 4.0, 1e-9);
        // Inward facing.
        EXPECT_NEAR(dot(splat_normal(e), normalize(e.center)), -1.0, 1e-9);
    }
}
