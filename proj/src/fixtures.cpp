#include "specsplat/fixtures.hpp"

#include <cmath>
#include <numbers>

namespace specsplat::testing {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Vec3 uniform_vec(Rng& rng, double lo, double hi) { return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)}; }

Quat random_rotation(Rng& rng) {
    std::normal_distribution<double> g;
    return Quat{g(rng), g(rng), g(rng), g(rng)}.normalized();
}

namespace {

template <class S>
void randomize_common(Rng& rng, S& s, double scale_lo, double scale_hi) {
    s.rotation = random_rotation(rng);
    s.log_scale = {std::log(uniform(rng, scale_lo, scale_hi)), std::log(uniform(rng, scale_lo, scale_hi))};
    s.opacity_logit = logit(uniform(rng, 0.2, 0.9));
    for (std::size_t k = 0; k < 3; ++k) s.sh_coeffs[k] = uniform(rng, 0.5, 2.0);
    for (std::size_t k = 3; k < kShCoeffCount; ++k) s.sh_coeffs[k] = uniform(rng, -0.3, 0.3);
}

}  // namespace

std::vector<SplatPrimitive> random_main_splats(Rng& rng, std::size_t n) {
    std::vector<SplatPrimitive> out(n);
    for (auto& s : out) {
        s.center = {uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8), uniform(rng, -0.5, 0.5)};
        randomize_common(rng, s, 0.05, 0.25);
        s.tint_logit = logit(uniform(rng, 0.1, 0.9));
    }
    return out;
}

std::vector<EnvSplat> random_env_splats(Rng& rng, std::size_t n, double radius) {
    std::vector<EnvSplat> out(n);
    for (auto& s : out) {
        Vec3 dir{0, 0, 0};
        while (norm(dir) < 1e-3) dir = uniform_vec(rng, -1.0, 1.0);
        s.center = radius * uniform(rng, 0.8, 1.2) * normalize(dir);
        randomize_common(rng, s, 0.8, 2.0);
    }
    return out;
}

namespace {

DeformationField random_field(Rng& rng, SplatKind kind) {
    FieldConfig cfg;
    cfg.l_pos = 2;
    cfg.l_time = 2;
    cfg.hidden = {8, 8};
    DeformationField f = DeformationField::create(kind, cfg, rng());
    auto p = f.parameters();
    // The head starts at zero; give it small weights so residuals depend on every layer.
    const std::size_t head = f.layers.back().parameter_count();
    for (std::size_t i = p.size() - head; i < p.size(); ++i) p[i] = uniform(rng, -0.02, 0.02);
    f.set_parameters(p);
    return f;
}

}  // namespace

Scene random_scene(Rng& rng, const SceneOptions& options) {
    Scene s;
    s.main = random_main_splats(rng, options.n_main);
    s.env = random_env_splats(rng, options.n_env);
    if (options.fields) {
        s.main_field = random_field(rng, SplatKind::Main);
        s.env_field = random_field(rng, SplatKind::Env);
    }
    return s;
}

Camera default_camera(int width, int height, double time) {
    return Camera::look_at({0.0, 0.0, -3.0}, {0.0, 0.0, 0.0}, {0.0, -1.0, 0.0}, width, height, 45.0, time);
}

}  // namespace specsplat::testing
