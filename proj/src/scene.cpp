#include "specsplat/scene.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace specsplat {

using json = nlohmann::ordered_json;

namespace {

constexpr int kSceneVersion = 1;

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t pos = std::min<std::size_t>(e.byte, text.size());
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < pos; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ParseError(what + ": malformed JSON at line " + std::to_string(line) + ", offset " +
                             std::to_string(pos) + ": " + e.what(),
                         line, pos);
    }
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParseError(where + ": bad field '" + key + "': " + e.what());
    }
}

Vec3 vec3_of(const json& j, const char* key, const std::string& where) {
    const auto v = field<std::vector<double>>(j, key, where);
    if (v.size() != 3) throw ParseError(where + ": field '" + key + "' must have 3 entries");
    return {v[0], v[1], v[2]};
}

json vec3_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

std::string doubles_to_base64(std::span<const double> xs) {
    std::vector<std::uint8_t> bytes(xs.size() * sizeof(double));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(xs[i]);
        for (std::size_t b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return base64_encode(bytes);
}

std::vector<double> base64_to_doubles(const std::string& text, std::size_t expected, const std::string& where) {
    const auto bytes = base64_decode(text);
    if (bytes.size() != expected * sizeof(double))
        throw ParseError(where + ": weight blob holds " + std::to_string(bytes.size() / 8) + " values, expected " +
                         std::to_string(expected));
    std::vector<double> out(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        std::uint64_t bits = 0;
        for (std::size_t b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

json field_json(const DeformationField& f) {
    json layers = json::array();
    for (const auto& l : f.layers) {
        layers.push_back(json{{"shape", json::array({l.out, l.in})},
                              {"weight", doubles_to_base64(l.weight)},
                              {"bias", doubles_to_base64(l.bias)}});
    }
    return json{{"l_pos", f.l_pos}, {"l_time", f.l_time}, {"layers", layers}};
}

DeformationField field_from_json(const json& j, const std::string& where) {
    DeformationField f;
    f.l_pos = field<int>(j, "l_pos", where);
    f.l_time = field<int>(j, "l_time", where);
    if (f.l_pos < 0 || f.l_time < 0) throw ValidationError(where + ": negative encoding frequency count");
    const auto& layers = j.contains("layers") ? j.at("layers") : throw ParseError(where + ": missing 'layers'");
    std::size_t expect_in = f.input_width();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string lw = where + ".layers[" + std::to_string(i) + "]";
        const auto shape = field<std::vector<std::size_t>>(layers[i], "shape", lw);
        if (shape.size() != 2) throw ParseError(lw + ": shape must be [out, in]");
        DenseLayer l;
        l.out = shape[0];
        l.in = shape[1];
        if (l.in != expect_in)
            throw ValidationError(lw + ": input width " + std::to_string(l.in) + " does not chain (expected " +
                                  std::to_string(expect_in) + ")");
        l.weight = base64_to_doubles(field<std::string>(layers[i], "weight", lw), l.out * l.in, lw);
        l.bias = base64_to_doubles(field<std::string>(layers[i], "bias", lw), l.out, lw);
        expect_in = l.out;
        f.layers.push_back(std::move(l));
    }
    return f;
}

template <class S>
json splat_json(const S& s, int sh_degree) {
    const std::size_t n = static_cast<std::size_t>(3 * sh_basis_count(sh_degree));
    json j{{"center", vec3_json(s.center)},
           {"rotation", json::array({s.rotation.w, s.rotation.x, s.rotation.y, s.rotation.z})},
           {"log_scale", json::array({s.log_scale.x, s.log_scale.y})},
           {"opacity_logit", s.opacity_logit},
           {"sh_coeffs", std::vector<double>(s.sh_coeffs.begin(), s.sh_coeffs.begin() + static_cast<long>(n))}};
    if constexpr (requires { s.tint_logit; }) j["tint_logit"] = s.tint_logit;
    return j;
}

template <class S>
S splat_from_json(const json& j, int sh_degree, const std::string& where) {
    S s;
    s.center = vec3_of(j, "center", where);
    const auto q = field<std::vector<double>>(j, "rotation", where);
    if (q.size() != 4) throw ParseError(where + ": rotation must have 4 entries");
    s.rotation = {q[0], q[1], q[2], q[3]};
    const auto ls = field<std::vector<double>>(j, "log_scale", where);
    if (ls.size() != 2) throw ParseError(where + ": log_scale must have 2 entries");
    s.log_scale = {ls[0], ls[1]};
    s.opacity_logit = field<double>(j, "opacity_logit", where);
    const auto sh = field<std::vector<double>>(j, "sh_coeffs", where);
    if (sh.size() != static_cast<std::size_t>(3 * sh_basis_count(sh_degree)))
        throw ParseError(where + ": sh_coeffs has " + std::to_string(sh.size()) + " entries for degree " +
                         std::to_string(sh_degree));
    std::copy(sh.begin(), sh.end(), s.sh_coeffs.begin());
    if constexpr (requires { s.tint_logit; }) s.tint_logit = field<double>(j, "tint_logit", where);
    return s;
}

bool finite3(const Vec3& v) { return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z); }

template <class S>
void validate_splat(const S& s, const std::string& where) {
    if (!finite3(s.center)) throw ValidationError(where + ".center: non-finite");
    const double qn = s.rotation.norm();
    if (!std::isfinite(qn) || std::abs(qn - 1.0) > 1e-9)
        throw ValidationError(where + ".rotation: quaternion norm " + std::to_string(qn) + " is not unit");
    if (!std::isfinite(s.log_scale.x) || !std::isfinite(s.log_scale.y) || !(std::exp(s.log_scale.x) > 0.0) ||
        !(std::exp(s.log_scale.y) > 0.0))
        throw ValidationError(where + ".log_scale: scale not strictly positive");
    const double a = sigmoid(s.opacity_logit);
    if (!std::isfinite(s.opacity_logit) || !(a > 0.0 && a < 1.0))
        throw ValidationError(where + ".opacity_logit: activated opacity outside (0, 1)");
    for (double c : s.sh_coeffs)
        if (!std::isfinite(c)) throw ValidationError(where + ".sh_coeffs: non-finite");
    if constexpr (requires { s.tint_logit; }) {
        const double t = sigmoid(s.tint_logit);
        if (!std::isfinite(s.tint_logit) || !(t > 0.0 && t < 1.0))
            throw ValidationError(where + ".tint_logit: activated tint outside (0, 1)");
    }
}

void validate_field(const DeformationField& f, SplatKind kind, const std::string& where) {
    std::size_t in = f.input_width();
    for (std::size_t i = 0; i < f.layers.size(); ++i) {
        const auto& l = f.layers[i];
        if (l.in != in || l.weight.size() != l.in * l.out || l.bias.size() != l.out)
            throw ValidationError(where + ".layers[" + std::to_string(i) + "]: shapes do not chain");
        for (double w : l.weight)
            if (!std::isfinite(w)) throw ValidationError(where + ".layers[" + std::to_string(i) + "]: non-finite");
        in = l.out;
    }
    if (!f.layers.empty() && f.output_width() != residual_width(kind))
        throw ValidationError(where + ": head width " + std::to_string(f.output_width()) + " does not match residual");
}

}  // namespace

double logit(double p) { return std::log(p / (1.0 - p)); }

Quat quat_from_frame(const Vec3& tu, const Vec3& tv, const Vec3& tw) {
    // Rotation matrix with columns tu, tv, tw.
    const double m00 = tu.x, m10 = tu.y, m20 = tu.z;
    const double m01 = tv.x, m11 = tv.y, m21 = tv.z;
    const double m02 = tw.x, m12 = tw.y, m22 = tw.z;
    const double trace = m00 + m11 + m22;
    Quat q;
    if (trace > 0.0) {
        const double s = 0.5 / std::sqrt(trace + 1.0);
        q = {0.25 / s, (m21 - m12) * s, (m02 - m20) * s, (m10 - m01) * s};
    } else if (m00 > m11 && m00 > m22) {
        const double s = 2.0 * std::sqrt(1.0 + m00 - m11 - m22);
        q = {(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s};
    } else if (m11 > m22) {
        const double s = 2.0 * std::sqrt(1.0 + m11 - m00 - m22);
        q = {(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s};
    } else {
        const double s = 2.0 * std::sqrt(1.0 + m22 - m00 - m11);
        q = {(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s};
    }
    return q.normalized();
}

Quat quat_facing(const Vec3& n) {
    const Vec3 w = normalize(n);
    const Vec3 helper = std::abs(w.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
    const Vec3 tu = normalize(cross(helper, w));
    const Vec3 tv = cross(w, tu);
    return quat_from_frame(tu, tv, w);
}

// ---- Camera -------------------------------------------------------------------

Mat3 Camera::rotation() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r(i, j) = world_to_camera(i, j);
    return r;
}

Vec3 Camera::center() const {
    const Mat3 r = rotation();
    const Vec3 t{world_to_camera(0, 3), world_to_camera(1, 3), world_to_camera(2, 3)};
    return -(r.transposed() * t);
}

Vec3 Camera::pixel_direction(int x, int y) const {
    const Vec3 dc{(x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1.0};
    return normalize(rotation().transposed() * dc);
}

Ray Camera::pixel_ray(int x, int y, double t_min, double t_max) const {
    return {center(), pixel_direction(x, y), t_min, t_max};
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height,
                       double fov_y_deg, double time) {
    const Vec3 f = normalize(target - eye);
    const Vec3 r = normalize(cross(f, up));
    const Vec3 d = cross(f, r);
    Camera c;
    c.width = width;
    c.height = height;
    c.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * std::numbers::pi / 180.0);
    c.fx = c.fy;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    c.time = time;
    const std::array<Vec3, 3> rows{r, d, f};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) c.world_to_camera(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        c.world_to_camera(i, 3) = -dot(rows[static_cast<std::size_t>(i)], eye);
    }
    return c;
}

// ---- validation ----------------------------------------------------------------

void validate_scene(const Scene& scene) {
    if (scene.sh_degree < 0 || scene.sh_degree > kMaxShDegree)
        throw ValidationError("scene: sh_degree " + std::to_string(scene.sh_degree) + " unsupported");
    for (std::size_t i = 0; i < scene.main.size(); ++i) validate_splat(scene.main[i], "main[" + std::to_string(i) + "]");
    for (std::size_t i = 0; i < scene.env.size(); ++i) validate_splat(scene.env[i], "env[" + std::to_string(i) + "]");
    validate_field(scene.main_field, SplatKind::Main, "main_field");
    validate_field(scene.env_field, SplatKind::Env, "env_field");
}

void validate_camera(const Camera& c) {
    if (!(c.fx > 0.0 && c.fy > 0.0)) throw ValidationError("camera: focal lengths must be positive");
    if (!(c.time >= 0.0 && c.time <= 1.0)) throw ValidationError("camera: time outside [0, 1]");
    if (c.width < 0 || c.height < 0) throw ValidationError("camera: negative resolution");
    const Mat3 r = c.rotation();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double d = dot(r.row(i), r.row(j)) - (i == j ? 1.0 : 0.0);
            if (std::abs(d) > 1e-9) throw ValidationError("camera: rotation is not orthonormal");
        }
}

// ---- scene files ---------------------------------------------------------------

std::string scene_to_json(const Scene& scene) {
    json j;
    j["header"] = json{{"version", kSceneVersion},
                       {"n_main", scene.main.size()},
                       {"n_env", scene.env.size()},
                       {"sh_degree", scene.sh_degree}};
    json main = json::array();
    for (const auto& s : scene.main) main.push_back(splat_json(s, scene.sh_degree));
    json env = json::array();
    for (const auto& s : scene.env) env.push_back(splat_json(s, scene.sh_degree));
    j["main"] = std::move(main);
    j["env"] = std::move(env);
    j["main_field"] = field_json(scene.main_field);
    j["env_field"] = field_json(scene.env_field);
    return j.dump(1) + "\n";
}

Scene scene_from_json(const std::string& text) {
    const json j = parse_json(text, "scene");
    if (!j.contains("header")) throw ParseError("scene: missing header");
    const json& h = j.at("header");
    const int version = field<int>(h, "version", "header");
    if (version != kSceneVersion) throw ParseError("scene: unsupported version " + std::to_string(version));
    Scene scene;
    scene.sh_degree = field<int>(h, "sh_degree", "header");
    if (scene.sh_degree < 0 || scene.sh_degree > kMaxShDegree)
        throw ValidationError("header.sh_degree: unsupported degree " + std::to_string(scene.sh_degree));
    const auto n_main = field<std::size_t>(h, "n_main", "header");
    const auto n_env = field<std::size_t>(h, "n_env", "header");
    const auto main = field<json>(j, "main", "scene");
    const auto env = field<json>(j, "env", "scene");
    if (!main.is_array() || main.size() != n_main)
        throw ParseError("scene: header declares " + std::to_string(n_main) + " main splats");
    if (!env.is_array() || env.size() != n_env)
        throw ParseError("scene: header declares " + std::to_string(n_env) + " env splats");
    for (std::size_t i = 0; i < n_main; ++i)
        scene.main.push_back(splat_from_json<SplatPrimitive>(main[i], scene.sh_degree, "main[" + std::to_string(i) + "]"));
    for (std::size_t i = 0; i < n_env; ++i)
        scene.env.push_back(splat_from_json<EnvSplat>(env[i], scene.sh_degree, "env[" + std::to_string(i) + "]"));
    scene.main_field = field_from_json(field<json>(j, "main_field", "scene"), "main_field");
    scene.env_field = field_from_json(field<json>(j, "env_field", "scene"), "env_field");
    validate_scene(scene);
    return scene;
}

Scene load_scene(const std::filesystem::path& path) { return scene_from_json(read_file(path)); }

void save_scene(const Scene& scene, const std::filesystem::path& path) {
    validate_scene(scene);
    write_file(path, scene_to_json(scene));
}

// ---- initialization ------------------------------------------------------------

std::vector<SplatPrimitive> init_from_points(const std::vector<Vec3>& points, const std::vector<Vec3>& colors,
                                             const InitConfig& config) {
    if (points.empty()) throw std::invalid_argument("init_from_points: no points");
    if (colors.size() != points.size()) throw std::invalid_argument("init_from_points: colors/points size mismatch");
    const std::size_t n = points.size();
    std::vector<SplatPrimitive> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double scale = config.default_scale;
        if (n >= 4) {
            std::array<double, 3> best{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                                       std::numeric_limits<double>::infinity()};
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double d = norm(points[j] - points[i]);
                if (d < best[2]) {
                    best[2] = d;
                    std::sort(best.begin(), best.end());
                }
            }
            scale = (best[0] + best[1] + best[2]) / 3.0;
            if (!(scale > 0.0)) scale = config.default_scale;
        }
        SplatPrimitive& s = out[i];
        s.center = points[i];
        s.rotation = Quat{};
        s.log_scale = {std::log(scale), std::log(scale)};
        s.opacity_logit = logit(config.opacity);
        s.tint_logit = logit(config.tint);
        s.sh_coeffs.fill(0.0);
        s.sh_coeffs[0] = colors[i].x / kShC0;
        s.sh_coeffs[1] = colors[i].y / kShC0;
        s.sh_coeffs[2] = colors[i].z / kShC0;
    }
    return out;
}

std::vector<EnvSplat> init_env_sphere(const EnvSphereConfig& config, int sh_degree) {
    (void)sh_degree;
    std::vector<EnvSplat> out;
    if (config.count == 0) return out;
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const double spacing = config.radius * std::sqrt(4.0 * std::numbers::pi / static_cast<double>(config.count));
    const double scale = config.overlap * spacing;
    for (std::size_t i = 0; i < config.count; ++i) {
        const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(config.count);
        const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
        const double phi = golden * static_cast<double>(i);
        const Vec3 dir{r * std::cos(phi), y, r * std::sin(phi)};
        EnvSplat s;
        s.center = config.center + config.radius * dir;
        s.rotation = quat_facing(-dir);
        s.log_scale = {std::log(scale), std::log(scale)};
        s.opacity_logit = logit(config.opacity);
        s.sh_coeffs.fill(0.0);
        s.sh_coeffs[0] = config.color.x / kShC0;
        s.sh_coeffs[1] = config.color.y / kShC0;
        s.sh_coeffs[2] = config.color.z / kShC0;
        out.push_back(s);
    }
    return out;
}

// ---- images --------------------------------------------------------------------

namespace {

std::string extension_of(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e;
}

/// Reads whitespace-separated header tokens, skipping '#' comments.
class HeaderReader {
public:
    HeaderReader(const std::string& bytes, const std::string& name) : b_(bytes), name_(name) {}

    std::string token() {
        skip();
        const std::size_t start = pos_;
        while (pos_ < b_.size() && !std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
        if (start == pos_) throw ParseError(name_ + ": truncated header", 0, pos_);
        return b_.substr(start, pos_ - start);
    }
    long integer() {
        const std::string t = token();
        try {
            std::size_t used = 0;
            const long v = std::stol(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw ParseError(name_ + ": bad header value '" + t + "'", 0, pos_);
        }
    }
    double real() {
        const std::string t = token();
        try {
            return std::stod(t);
        } catch (const std::exception&) {
            throw ParseError(name_ + ": bad header value '" + t + "'", 0, pos_);
        }
    }
    /// Consumes the single whitespace byte that ends the header.
    std::size_t data_start() {
        if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_])))
            throw ParseError(name_ + ": truncated header", 0, pos_);
        return pos_ + 1;
    }

private:
    void skip() {
        while (pos_ < b_.size()) {
            if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
                ++pos_;
            } else if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }
    const std::string& b_;
    std::string name_;
    std::size_t pos_ = 0;
};

Image load_ppm(const std::string& bytes, const std::string& name) {
    HeaderReader h(bytes, name);
    if (h.token() != "P6") throw ParseError(name + ": not a binary PPM (P6)");
    const long w = h.integer(), hh = h.integer(), maxval = h.integer();
    if (w <= 0 || hh <= 0 || maxval != 255) throw ParseError(name + ": unsupported PPM dimensions or depth");
    const std::size_t start = h.data_start();
    const std::size_t need = static_cast<std::size_t>(w * hh * 3);
    if (bytes.size() < start + need) throw ParseError(name + ": truncated pixel data", 0, bytes.size());
    Image img(static_cast<int>(w), static_cast<int>(hh), 3);
    for (std::size_t i = 0; i < need; ++i) img.data[i] = static_cast<unsigned char>(bytes[start + i]) / 255.0;
    return img;
}

Image load_pfm(const std::string& bytes, const std::string& name) {
    HeaderReader h(bytes, name);
    const std::string magic = h.token();
    int channels = 0;
    if (magic == "PF") channels = 3;
    else if (magic == "Pf") channels = 1;
    else throw ParseError(name + ": not a PFM file");
    const long w = h.integer(), hh = h.integer();
    const double scale = h.real();
    if (w <= 0 || hh <= 0) throw ParseError(name + ": bad PFM dimensions");
    if (scale >= 0.0) throw ParseError(name + ": big-endian PFM is not supported");
    const std::size_t start = h.data_start();
    const std::size_t count = static_cast<std::size_t>(w * hh * channels);
    if (bytes.size() < start + count * 4) throw ParseError(name + ": truncated pixel data", 0, bytes.size());
    Image img(static_cast<int>(w), static_cast<int>(hh), channels);
    for (long y = 0; y < hh; ++y) {
        const long src_row = hh - 1 - y;  // PFM stores rows bottom-up
        for (long k = 0; k < w * channels; ++k) {
            const std::size_t off = start + static_cast<std::size_t>((src_row * w * channels + k) * 4);
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + static_cast<std::size_t>(b)])) << (8 * b);
            img.data[static_cast<std::size_t>(y * w * channels + k)] = std::bit_cast<float>(bits);
        }
    }
    return img;
}

std::string encode_ppm(const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("save_image: PPM requires 3 channels");
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.data.size());
    for (double v : img.data) {
        const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return out;
}

std::string encode_pfm(const Image& img) {
    if (img.channels != 3 && img.channels != 1) throw std::invalid_argument("save_image: PFM requires 1 or 3 channels");
    std::string out = std::string(img.channels == 3 ? "PF" : "Pf") + "\n" + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n-1.0\n";
    const std::size_t row = static_cast<std::size_t>(img.width * img.channels);
    for (int y = img.height - 1; y >= 0; --y) {
        for (std::size_t k = 0; k < row; ++k) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(img.data[static_cast<std::size_t>(y) * row + k]));
            for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
        }
    }
    return out;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
    const std::string ext = extension_of(path);
    if (ext != ".ppm" && ext != ".pfm") throw std::invalid_argument("load_image: unsupported extension '" + ext + "'");
    const std::string bytes = read_file(path);
    return ext == ".ppm" ? load_ppm(bytes, path.string()) : load_pfm(bytes, path.string());
}

Image load_image(const std::filesystem::path& path, int width, int height) {
    Image img = load_image(path);
    if (img.width != width || img.height != height)
        throw ValidationError(path.string() + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                              ", expected " + std::to_string(width) + "x" + std::to_string(height));
    return img;
}

void save_image(const Image& image, const std::filesystem::path& path) {
    const std::string ext = extension_of(path);
    if (ext == ".ppm") write_file(path, encode_ppm(image));
    else if (ext == ".pfm") write_file(path, encode_pfm(image));
    else throw std::invalid_argument("save_image: unsupported extension '" + ext + "'");
}

NormalMap load_normal_map(const std::filesystem::path& path) {
    const Image img = load_image(path);
    if (img.channels != 3) throw ParseError(path.string() + ": normal map must have 3 channels");
    NormalMap m;
    m.width = img.width;
    m.height = img.height;
    m.normals.resize(img.pixel_count());
    m.valid.resize(img.pixel_count());
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        const Vec3 v{img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]};
        const double n = norm(v);
        if (n < 1e-6 || !std::isfinite(n)) {
            m.normals[i] = {};
            m.valid[i] = 0;
        } else {
            m.normals[i] = v / n;
            m.valid[i] = 1;
        }
    }
    return m;
}

void save_normal_map(const NormalMap& map, const std::filesystem::path& path) {
    Image img(map.width, map.height, 3);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        const Vec3 v = map.valid.empty() || map.valid[i] ? map.normals[i] : Vec3{};
        img.data[3 * i] = v.x;
        img.data[3 * i + 1] = v.y;
        img.data[3 * i + 2] = v.z;
    }
    save_image(img, path);
}

// ---- cameras and datasets --------------------------------------------------------

std::vector<Frame> load_cameras(const std::filesystem::path& path) {
    const json j = parse_json(read_file(path), path.string());
    if (!j.is_array()) throw ParseError(path.string() + ": camera file must be a JSON list");
    std::vector<Frame> frames;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string where = "camera[" + std::to_string(i) + "]";
        const json& c = j[i];
        Frame f;
        f.camera.fx = field<double>(c, "fx", where);
        f.camera.fy = field<double>(c, "fy", where);
        f.camera.cx = field<double>(c, "cx", where);
        f.camera.cy = field<double>(c, "cy", where);
        f.camera.width = field<int>(c, "width", where);
        f.camera.height = field<int>(c, "height", where);
        f.camera.time = field<double>(c, "time", where);
        const auto m = field<std::vector<double>>(c, "world_to_camera", where);
        if (m.size() != 16) throw ParseError(where + ": world_to_camera must have 16 entries");
        std::copy(m.begin(), m.end(), f.camera.world_to_camera.m.begin());
        f.image = field<std::string>(c, "image", where);
        if (c.contains("normal_map") && !c.at("normal_map").is_null()) f.normal_map = field<std::string>(c, "normal_map", where);
        try {
            validate_camera(f.camera);
        } catch (const ValidationError& e) {
            throw ValidationError(where + ": " + e.what());
        }
        frames.push_back(std::move(f));
    }
    return frames;
}

void save_cameras(const std::vector<Frame>& frames, const std::filesystem::path& path) {
    json j = json::array();
    for (const auto& f : frames) {
        const Camera& c = f.camera;
        json e{{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
               {"world_to_camera", std::vector<double>(c.world_to_camera.m.begin(), c.world_to_camera.m.end())},
               {"time", c.time}, {"image", f.image}};
        if (f.normal_map) e["normal_map"] = *f.normal_map;
        j.push_back(std::move(e));
    }
    write_file(path, j.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& path) {
    const json j = parse_json(read_file(path), path.string());
    Dataset d;
    d.root = path.parent_path();
    d.scene = field<std::string>(j, "scene", "dataset");
    d.background = vec3_of(j, "background", "dataset");
    d.frames = load_cameras(d.root / field<std::string>(j, "cameras", "dataset"));
    for (std::size_t i = 0; i < d.frames.size(); ++i) {
        const Frame& f = d.frames[i];
        if (!std::filesystem::exists(d.resolve(f.image)))
            throw ValidationError("dataset frame " + std::to_string(i) + ": missing image " + f.image);
        if (f.normal_map && !std::filesystem::exists(d.resolve(*f.normal_map)))
            throw ValidationError("dataset frame " + std::to_string(i) + ": missing normal map " + *f.normal_map);
    }
    return d;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    const auto dir = path.parent_path();
    save_cameras(dataset.frames, dir / "cameras.json");
    json j{{"cameras", "cameras.json"}, {"scene", dataset.scene}, {"background", vec3_json(dataset.background)}};
    write_file(path, j.dump(1) + "\n");
}

// ---- base64 ------------------------------------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(kAlphabet[(v >> 18) & 63]);
        out.push_back(kAlphabet[(v >> 12) & 63]);
        out.push_back(kAlphabet[(v >> 6) & 63]);
        out.push_back(kAlphabet[v & 63]);
    }
    if (i < bytes.size()) {
        std::uint32_t v = bytes[i] << 16;
        if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
        out.push_back(kAlphabet[(v >> 18) & 63]);
        out.push_back(kAlphabet[(v >> 12) & 63]);
        out.push_back(i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=');
        out.push_back('=');
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw ParseError("base64: length is not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + static_cast<std::size_t>(k)];
            if (c == '=' && i + 4 == text.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                v[k] = value(c);
                if (v[k] < 0 || pad > 0) throw ParseError("base64: invalid character", 0, i + static_cast<std::size_t>(k));
            }
        }
        const std::uint32_t n = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                                (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
        out.push_back(static_cast<std::uint8_t>(n >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
    }
    return out;
}

}  // namespace specsplat
