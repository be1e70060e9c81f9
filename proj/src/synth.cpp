#include "specsplat/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "specsplat/losses.hpp"
#include "specsplat/pipeline.hpp"

namespace specsplat {

using json = nlohmann::ordered_json;

const char* synthetic_kind_name(SyntheticKind k) {
    switch (k) {
        case SyntheticKind::MovingMirror: return "moving_mirror";
        case SyntheticKind::SpinningPlate: return "spinning_plate";
        case SyntheticKind::DiffuseOnly: return "diffuse_only";
    }
    return "?";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
    for (auto k : {SyntheticKind::MovingMirror, SyntheticKind::SpinningPlate, SyntheticKind::DiffuseOnly})
        if (name == synthetic_kind_name(k)) return k;
    throw std::invalid_argument("unknown synthetic scene kind: " + name);
}

void SyntheticSpec::validate() const {
    if (frames < 2) throw std::invalid_argument("synthetic spec: frames must be at least 2");
    if (width < 16 || height < 16) throw std::invalid_argument("synthetic spec: resolution must be at least 16x16");
    if (!(orbit_radius > 0.0) || !(fov_deg > 0.0 && fov_deg < 180.0) || !(env_radius > 0.0))
        throw std::invalid_argument("synthetic spec: orbit radius, fov and env radius must be positive");
    if (!std::isfinite(motion_cycles)) throw std::invalid_argument("synthetic spec: motion_cycles must be finite");
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("synthetic spec: ") + e.what(), 0, e.byte);
    }
    SyntheticSpec s;
    try {
        if (j.contains("kind")) s.kind = parse_synthetic_kind(j["kind"].get<std::string>());
        s.frames = j.value("frames", s.frames);
        s.width = j.value("width", s.width);
        s.height = j.value("height", s.height);
        s.orbit_radius = j.value("orbit_radius", s.orbit_radius);
        s.orbit_height = j.value("orbit_height", s.orbit_height);
        s.orbit_arc_deg = j.value("orbit_arc_deg", s.orbit_arc_deg);
        s.fov_deg = j.value("fov_deg", s.fov_deg);
        s.motion_cycles = j.value("motion_cycles", s.motion_cycles);
        s.env_count = j.value("env_count", s.env_count);
        s.env_radius = j.value("env_radius", s.env_radius);
        s.seed = j.value("seed", s.seed);
        if (j.contains("background")) {
            const auto b = j["background"].get<std::vector<double>>();
            if (b.size() != 3) throw std::invalid_argument("synthetic spec: background needs 3 values");
            s.background = {b[0], b[1], b[2]};
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("synthetic spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::string synthetic_spec_to_json(const SyntheticSpec& s) {
    json j{{"kind", synthetic_kind_name(s.kind)},
           {"frames", s.frames},
           {"width", s.width},
           {"height", s.height},
           {"orbit_radius", s.orbit_radius},
           {"orbit_height", s.orbit_height},
           {"orbit_arc_deg", s.orbit_arc_deg},
           {"fov_deg", s.fov_deg},
           {"motion_cycles", s.motion_cycles},
           {"env_count", s.env_count},
           {"env_radius", s.env_radius},
           {"background", {s.background.x, s.background.y, s.background.z}},
           {"seed", s.seed}};
    return j.dump(1) + "\n";
}

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s, hp = h * 6.0, x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Vec3 rgb;
    if (hp < 1) rgb = {c, x, 0};
    else if (hp < 2) rgb = {x, c, 0};
    else if (hp < 3) rgb = {0, c, x};
    else if (hp < 4) rgb = {0, x, c};
    else if (hp < 5) rgb = {x, 0, c};
    else rgb = {c, 0, x};
    const double m = v - c;
    return rgb + Vec3{m, m, m};
}

ShCoeffs constant_color(const Vec3& c) {
    ShCoeffs sh{};
    for (std::size_t ch = 0; ch < 3; ++ch) sh[ch] = c[ch] / kShC0;
    return sh;
}

SplatPrimitive disk(const Vec3& center, const Quat& rotation, double scale, double opacity, double tint,
                    const Vec3& color) {
    SplatPrimitive s;
    s.center = center;
    s.rotation = rotation;
    s.log_scale = {std::log(scale), std::log(scale)};
    s.opacity_logit = logit(opacity);
    s.tint_logit = tint <= 0.0 ? -10.0 : logit(tint);
    s.sh_coeffs = constant_color(color);
    return s;
}

/// Main content in canonical pose plus the rigid motion at time t.
struct Layout {
    std::vector<SplatPrimitive> main;
    Quat motion;
};

Layout mirror_layout(double t, double cycles) {
    Layout l;
    const Quat facing = quat_facing({0.0, 0.0, -1.0});
    constexpr int kGrid = 12;
    constexpr double kHalf = 0.8;
    const double step = 2.0 * kHalf / (kGrid - 1);
    for (int j = 0; j < kGrid; ++j)
        for (int i = 0; i < kGrid; ++i)
            l.main.push_back(disk({-kHalf + i * step, -kHalf + j * step, 0.0}, facing, 0.75 * step, 0.98, 0.9,
                                  {0.06, 0.06, 0.08}));
    constexpr int kRing = 40;
    for (int k = 0; k < kRing; ++k) {
        const double a = static_cast<double>(k) / kRing;
        const double side = 4.0 * a;
        const double e = 1.0;
        // Slightly in front of the mirror so overlapping disks never tie in depth.
        const double z = -0.03;
        Vec3 p;
        if (side < 1) p = {-e + 2 * e * side, -e, z};
        else if (side < 2) p = {e, -e + 2 * e * (side - 1), z};
        else if (side < 3) p = {e - 2 * e * (side - 2), e, z};
        else p = {-e, e - 2 * e * (side - 3), z};
        l.main.push_back(disk(p, facing, 0.09, 0.95, 0.0, hsv(a, 0.8, 0.9)));
    }
    l.motion = Quat::axis_angle({0.0, 1.0, 0.0}, 0.35 * std::sin(2.0 * kPi * cycles * t)) *
               Quat::axis_angle({1.0, 0.0, 0.0}, 0.2 * std::sin(2.0 * kPi * cycles * t + 1.0));
    return l;
}

Layout plate_layout(double t, double cycles) {
    Layout l;
    // Facing the cameras, tilted up so reflections see the upper hemisphere.
    const Quat tilt = Quat::axis_angle({1.0, 0.0, 0.0}, -0.35);
    const Quat facing = quat_facing({0.0, 0.0, -1.0});
    constexpr double kRadius = 0.9;
    for (int ring = 0; ring < 6; ++ring) {
        const double r = kRadius * ring / 5.0;
        const int count = ring == 0 ? 1 : 8 * ring;
        for (int k = 0; k < count; ++k) {
            const double a = 2.0 * kPi * k / count;
            const Vec3 color = ring == 5 ? Vec3{0.8, 0.75, 0.6} : hsv(std::floor(4.0 * k / count) / 4.0 + 0.1 * ring, 0.5, 0.7);
            l.main.push_back(disk({r * std::cos(a), r * std::sin(a), 0.0}, facing, 0.13, 0.97, ring == 5 ? 0.0 : 0.45, color));
        }
    }
    l.motion = tilt * Quat::axis_angle({0.0, 0.0, 1.0}, kPi * cycles * t);
    return l;
}

Layout diffuse_layout(std::mt19937_64& rng) {
    Layout l;
    std::uniform_real_distribution<double> u(-0.8, 0.8), h(0.0, 1.0);
    const Quat facing = quat_facing({0.0, 0.0, -1.0});
    for (int k = 0; k < 120; ++k) {
        const Vec3 p{u(rng), u(rng), 0.3 * u(rng)};
        l.main.push_back(disk(p, facing * Quat::axis_angle({1.0, 0.0, 0.0}, 0.3 * u(rng)), 0.12, 0.9, 0.0,
                              hsv(h(rng), 0.7, 0.85)));
    }
    l.motion = Quat{1.0, 0.0, 0.0, 0.0};
    return l;
}

std::vector<EnvSplat> environment(const SyntheticSpec& spec, std::mt19937_64& rng) {
    EnvSphereConfig cfg;
    cfg.count = spec.env_count;
    cfg.radius = spec.env_radius;
    cfg.opacity = 0.95;
    std::vector<EnvSplat> env = init_env_sphere(cfg);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi), jitter(-0.08, 0.08);
    const Vec3 ph{phase(rng), phase(rng), phase(rng)};
    for (EnvSplat& e : env) {
        const Vec3 d = normalize(e.center - cfg.center);
        Vec3 c;
        for (std::size_t ch = 0; ch < 3; ++ch)
            c[ch] = std::clamp(0.5 + 0.4 * std::sin(3.0 * d[(ch + 1) % 3] + 2.0 * d[ch] + ph[ch]) + jitter(rng), 0.0, 1.0);
        e.sh_coeffs = constant_color(c);
    }
    return env;
}

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("synthetic_scene: time outside [0, 1]");
}

}  // namespace

Scene synthetic_scene(const SyntheticSpec& spec, double t) {
    spec.validate();
    check_time(t);
    std::mt19937_64 rng(spec.seed);
    Layout l;
    switch (spec.kind) {
        case SyntheticKind::MovingMirror: l = mirror_layout(t, spec.motion_cycles); break;
        case SyntheticKind::SpinningPlate: l = plate_layout(t, spec.motion_cycles); break;
        case SyntheticKind::DiffuseOnly: l = diffuse_layout(rng); break;
    }
    Scene s;
    s.sh_degree = kMaxShDegree;
    for (SplatPrimitive p : l.main) {
        p.center = rotate(l.motion, p.center);
        p.rotation = (l.motion * p.rotation).normalized();
        s.main.push_back(p);
    }
    s.env = environment(spec, rng);
    return s;
}

std::vector<Camera> synthetic_cameras(const SyntheticSpec& spec) {
    spec.validate();
    std::vector<Camera> cams;
    for (int i = 0; i < spec.frames; ++i) {
        const double f = static_cast<double>(i) / (spec.frames - 1);
        const double phi = (f - 0.5) * spec.orbit_arc_deg * kPi / 180.0;
        const Vec3 eye{spec.orbit_radius * std::sin(phi), spec.orbit_height, -spec.orbit_radius * std::cos(phi)};
        cams.push_back(Camera::look_at(eye, {0.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, spec.width, spec.height, spec.fov_deg, f));
    }
    return cams;
}

namespace {

std::string frame_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu", i);
    return buf;
}

}  // namespace

PointCloud load_points(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), 0, e.byte);
    }
    PointCloud c;
    try {
        for (const auto& p : j.at("points")) c.points.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
        for (const auto& p : j.at("colors")) c.colors.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    if (c.points.size() != c.colors.size()) throw ValidationError(path.string() + ": points and colors differ in length");
    return c;
}

void save_points(const PointCloud& cloud, const std::filesystem::path& path) {
    json j{{"points", json::array()}, {"colors", json::array()}};
    for (const Vec3& p : cloud.points) j["points"].push_back({p.x, p.y, p.z});
    for (const Vec3& c : cloud.colors) j["colors"].push_back({c.x, c.y, c.z});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump() << "\n";
}

Dataset generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    spec.validate();
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "normals");
    fs::create_directories(out_dir / "gt");
    {
        std::ofstream s(out_dir / "spec.json");
        s << synthetic_spec_to_json(spec);
    }

    Dataset d;
    d.root = out_dir;
    d.background = spec.background;
    d.scene = "init_scene.json";
    RenderSettings rs;
    rs.background = spec.background;
    TraceSettings ts;
    const auto cams = synthetic_cameras(spec);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const Scene posed = synthetic_scene(spec, cams[i].time);
        ts.epsilon = reflection_epsilon(posed);
        const Image img = oracle_render_hybrid(posed, cams[i], rs, ts);
        const RenderBuffers b = oracle_render(posed.main, cams[i], posed.sh_degree, rs);
        NormalMap nm;
        nm.width = b.width;
        nm.height = b.height;
        nm.normals.assign(b.pixel_count(), Vec3{});
        nm.valid.assign(b.pixel_count(), 0);
        for (std::size_t p = 0; p < b.pixel_count(); ++p)
            if (b.accum[p] > kNormalLossAlpha && norm(b.normal[p]) > 0.0) {
                nm.normals[p] = b.normal[p];
                nm.valid[p] = 1;
            }
        const std::string n = frame_name(i);
        save_image(img, out_dir / "images" / (n + ".pfm"));
        save_normal_map(nm, out_dir / "normals" / (n + ".pfm"));
        save_scene(posed, out_dir / "gt" / ("scene_" + n + ".json"));
        d.frames.push_back({cams[i], "images/" + n + ".pfm", "normals/" + n + ".pfm"});
    }

    // Initialization: jittered surface samples at t = 0 and a gray environment sphere.
    const Scene first = synthetic_scene(spec, 0.0);
    std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> noise(0.0, 0.01);
    PointCloud cloud;
    for (const SplatPrimitive& s : first.main) {
        cloud.points.push_back(s.center + Vec3{noise(rng), noise(rng), noise(rng)});
        Vec3 c;
        for (std::size_t ch = 0; ch < 3; ++ch) c[ch] = std::clamp(s.sh_coeffs[ch] * kShC0, 0.0, 1.0);
        cloud.colors.push_back(c);
    }
    save_points(cloud, out_dir / "points.json");

    Scene init;
    init.main = init_from_points(cloud.points, cloud.colors, InitConfig{});
    EnvSphereConfig env;
    env.count = spec.env_count;
    env.radius = spec.env_radius;
    init.env = init_env_sphere(env);
    init.main_field = DeformationField::create(SplatKind::Main, FieldConfig{}, spec.seed + 1);
    init.env_field = DeformationField::create(SplatKind::Env, FieldConfig{}, spec.seed + 2);
    save_scene(init, out_dir / "init_scene.json");

    save_dataset(d, out_dir / "dataset.json");
    return load_dataset(out_dir / "dataset.json");
}

}  // namespace specsplat
