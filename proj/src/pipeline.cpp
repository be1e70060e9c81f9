#include "specsplat/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace specsplat {

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::MainPosition: return "main_position";
        case ParamGroup::MainRotation: return "main_rotation";
        case ParamGroup::MainScale: return "main_scale";
        case ParamGroup::MainOpacity: return "main_opacity";
        case ParamGroup::MainSh: return "main_sh";
        case ParamGroup::MainTint: return "main_tint";
        case ParamGroup::EnvSplats: return "env_splats";
        case ParamGroup::MainField: return "main_field";
        case ParamGroup::EnvField: return "env_field";
    }
    return "?";
}

ParamLayout ParamLayout::of(const Scene& scene) {
    return {scene.main.size(), scene.env.size(), scene.main_field.parameter_count(), scene.env_field.parameter_count()};
}

ParamGroup ParamLayout::group(std::size_t i) const {
    if (i < env_offset()) {
        const std::size_t k = i % kMainStride;
        if (k < 3) return ParamGroup::MainPosition;
        if (k < 7) return ParamGroup::MainRotation;
        if (k < 9) return ParamGroup::MainScale;
        if (k == 9) return ParamGroup::MainOpacity;
        if (k == 10) return ParamGroup::MainTint;
        return ParamGroup::MainSh;
    }
    if (i < main_field_offset()) return ParamGroup::EnvSplats;
    if (i < env_field_offset()) return ParamGroup::MainField;
    if (i < total()) return ParamGroup::EnvField;
    throw std::out_of_range("ParamLayout: index out of range");
}

std::vector<std::size_t> ParamLayout::quaternion_offsets() const {
    std::vector<std::size_t> q;
    for (std::size_t i = 0; i < n_main; ++i) q.push_back(i * kMainStride + 3);
    for (std::size_t i = 0; i < n_env; ++i) q.push_back(env_offset() + i * kEnvStride + 3);
    return q;
}

namespace {

template <class S>
void write_splat(const S& s, double* x) {
    x[0] = s.center.x;
    x[1] = s.center.y;
    x[2] = s.center.z;
    x[3] = s.rotation.w;
    x[4] = s.rotation.x;
    x[5] = s.rotation.y;
    x[6] = s.rotation.z;
    x[7] = s.log_scale.x;
    x[8] = s.log_scale.y;
    x[9] = s.opacity_logit;
    std::size_t k = 10;
    if constexpr (requires { s.tint_logit; }) x[k++] = s.tint_logit;
    std::copy(s.sh_coeffs.begin(), s.sh_coeffs.end(), x + k);
}

template <class S>
void read_splat(const double* x, S& s) {
    s.center = {x[0], x[1], x[2]};
    s.rotation = {x[3], x[4], x[5], x[6]};
    s.log_scale = {x[7], x[8]};
    s.opacity_logit = x[9];
    std::size_t k = 10;
    if constexpr (requires { s.tint_logit; }) s.tint_logit = x[k++];
    std::copy(x + k, x + k + kShCoeffCount, s.sh_coeffs.begin());
}

}  // namespace

std::vector<double> flatten_parameters(const Scene& scene) {
    const ParamLayout L = ParamLayout::of(scene);
    std::vector<double> x(L.total());
    for (std::size_t i = 0; i < L.n_main; ++i) write_splat(scene.main[i], x.data() + i * kMainStride);
    for (std::size_t i = 0; i < L.n_env; ++i) write_splat(scene.env[i], x.data() + L.env_offset() + i * kEnvStride);
    const auto mf = scene.main_field.parameters();
    const auto ef = scene.env_field.parameters();
    std::copy(mf.begin(), mf.end(), x.begin() + static_cast<long>(L.main_field_offset()));
    std::copy(ef.begin(), ef.end(), x.begin() + static_cast<long>(L.env_field_offset()));
    return x;
}

void unflatten_parameters(std::span<const double> x, Scene& scene) {
    const ParamLayout L = ParamLayout::of(scene);
    if (x.size() != L.total()) throw std::invalid_argument("unflatten_parameters: layout mismatch");
    for (std::size_t i = 0; i < L.n_main; ++i) read_splat(x.data() + i * kMainStride, scene.main[i]);
    for (std::size_t i = 0; i < L.n_env; ++i) read_splat(x.data() + L.env_offset() + i * kEnvStride, scene.env[i]);
    scene.main_field.set_parameters(x.subspan(L.main_field_offset(), L.main_field));
    scene.env_field.set_parameters(x.subspan(L.env_field_offset(), L.env_field));
}

double reflection_epsilon(const Scene& scene) {
    if (scene.main.empty()) return 1e-3;
    Vec3 lo = scene.main[0].center, hi = lo;
    for (const auto& s : scene.main) {
        lo = {std::min(lo.x, s.center.x), std::min(lo.y, s.center.y), std::min(lo.z, s.center.z)};
        hi = {std::max(hi.x, s.center.x), std::max(hi.y, s.center.y), std::max(hi.z, s.center.z)};
    }
    const double diag = norm(hi - lo);
    return diag > 0.0 ? 1e-3 * diag : 1e-3;
}

// ---- forward-only rendering ------------------------------------------------------

HybridRender render_hybrid(const Scene& scene, const Camera& camera, const RenderSettings& rs,
                           const TraceSettings& ts) {
    validate_camera(camera);
    const DeformedScene d = deform_scene(scene, camera.time);
    HybridRender out;
    out.buffers = render(d.main, camera, scene.sh_degree, rs);
    const RenderBuffers& b = out.buffers;
    const std::size_t P = b.pixel_count();
    const Vec3 eye = camera.center();

    std::vector<std::size_t> traced;
    std::vector<Vec3> origins, dirs;
    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
            if (!(b.accum[p] > rs.alpha_mask)) continue;
            const Vec3 dir = camera.pixel_direction(x, y);
            traced.push_back(p);
            origins.push_back(eye + b.depth[p] * dir + ts.epsilon * b.normal[p]);
            dirs.push_back(reflect(dir, b.normal[p]));
        }
    const Bvh bvh = build_bvh(d.env, ts.cutoff);
    const TraceResult tr = trace_specular(origins, dirs, d.env, bvh, scene.sh_degree, ts);

    out.image = Image(camera.width, camera.height, 3);
    out.specular = Image(camera.width, camera.height, 3);
    for (std::size_t p = 0; p < P; ++p)
        for (int c = 0; c < 3; ++c) out.image.data[3 * p + static_cast<std::size_t>(c)] = b.diffuse[p][static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < traced.size(); ++k) {
        const std::size_t p = traced[k];
        const double a = b.alpha_spec[p];
        for (std::size_t c = 0; c < 3; ++c) {
            out.specular.data[3 * p + c] = tr.color[k][c];
            out.image.data[3 * p + c] = (1.0 - a) * b.diffuse[p][c] + a * tr.color[k][c];
        }
    }
    return out;
}

Image oracle_render_hybrid(const Scene& scene, const Camera& camera, const RenderSettings& rs,
                           const TraceSettings& ts) {
    validate_camera(camera);
    const DeformedScene d = deform_scene(scene, camera.time);
    const RenderBuffers b = oracle_render(d.main, camera, scene.sh_degree, rs);
    TraceSettings all = ts;
    all.k = std::max<std::size_t>(1, d.env.size());
    const Vec3 eye = camera.center();
    Image img(camera.width, camera.height, 3);
    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
            Vec3 c = b.diffuse[p];
            if (b.accum[p] > rs.alpha_mask) {
                const Vec3 dir = camera.pixel_direction(x, y);
                const Vec3 n = b.normal[p];
                const Ray r{eye + b.depth[p] * dir + ts.epsilon * n, dir - 2.0 * dot(dir, n) * n, 0.0,
                            std::numeric_limits<double>::infinity()};
                const Vec3 s = brute_force_trace(r, d.env, scene.sh_degree, all).color;
                const double a = b.alpha_spec[p];
                c = (1.0 - a) * c + a * s;
            }
            img.data[3 * p] = c.x;
            img.data[3 * p + 1] = c.y;
            img.data[3 * p + 2] = c.z;
        }
    return img;
}

// ---- tape forms ------------------------------------------------------------------

namespace {

struct SplatVars {
    Var3 c, tu, tv, tw;
    Var su, sv, alpha, tint;
    Var3 color;
    std::vector<Var> sh;
    /// Unit rotation and log-scale values, used to build acceleration structures.
    Quat q;
    Vec2 log_scale;
};

Var3 var3(std::span<const Var> p, std::size_t o) { return {p[o], p[o + 1], p[o + 2]}; }

/// SH color before clamping: one node per channel over coefficients and basis.
Var3 sh_color(Tape& tape, std::span<const Var> coeffs, const Var3& d, int degree) {
    std::vector<Var> basis;
    std::vector<double> bconst;
    if (degree >= 1) {
        basis.push_back(d[1] * -kShC1);
        basis.push_back(d[2] * kShC1);
        basis.push_back(d[0] * -kShC1);
    }
    if (degree >= 2) {
        basis.push_back(d[0] * d[1] * kShC2[0]);
        basis.push_back(d[1] * d[2] * kShC2[1]);
        basis.push_back((2.0 * (d[2] * d[2]) - d[0] * d[0] - d[1] * d[1]) * kShC2[2]);
        basis.push_back(d[0] * d[2] * kShC2[3]);
        basis.push_back((d[0] * d[0] - d[1] * d[1]) * kShC2[4]);
    }
    Var3 out;
    std::vector<std::uint32_t> parents;
    std::vector<double> partials;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        parents.clear();
        partials.clear();
        double v = kShC0 * coeffs[ch].value();
        parents.push_back(coeffs[ch].id);
        partials.push_back(kShC0);
        for (std::size_t k = 0; k < basis.size(); ++k) {
            const Var& cf = coeffs[3 * (k + 1) + ch];
            v += basis[k].value() * cf.value();
            parents.push_back(cf.id);
            partials.push_back(basis[k].value());
            parents.push_back(basis[k].id);
            partials.push_back(cf.value());
        }
        out[ch] = tape.record(v, parents, partials);
    }
    return out;
}

/// Deforms and activates one splat set on the tape.
std::vector<SplatVars> splat_vars(Tape& tape, std::span<const Var> params, std::size_t offset, std::size_t count,
                                  std::size_t stride, bool has_tint, const DeformationField& field,
                                  std::span<const Var> field_params, double t) {
    std::vector<Var3> centers(count);
    for (std::size_t i = 0; i < count; ++i) centers[i] = var3(params, offset + i * stride);
    std::vector<std::vector<Var>> res;
    if (!field.layers.empty()) res = eval_deform_batch(tape, field, field_params, centers, t);

    std::vector<SplatVars> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t o = offset + i * stride;
        SplatVars& s = out[i];
        std::array<Var, 4> q{params[o + 3], params[o + 4], params[o + 5], params[o + 6]};
        Var ls0 = params[o + 7], ls1 = params[o + 8], op = params[o + 9];
        Var tint_logit = has_tint ? params[o + 10] : Var{};
        s.c = centers[i];
        if (!res.empty()) {
            const auto& r = res[i];
            s.c = {s.c[0] + r[0], s.c[1] + r[1], s.c[2] + r[2]};
            ls0 = ls0 + r[3];
            ls1 = ls1 + r[4];
            std::array<Var, 4> qs{q[0] + r[5], q[1] + r[6], q[2] + r[7], q[3] + r[8]};
            double n2 = 0.0;
            for (const Var& v : qs) n2 += v.value() * v.value();
            if (tape.branches().decide(std::sqrt(n2) >= 1e-9)) {
                const auto qn = normalize(std::span<const Var>(qs));
                std::copy(qn.begin(), qn.end(), q.begin());
            }
            op = op + r[9];
            if (has_tint) tint_logit = tint_logit + r[10];
        }
        const Var &w = q[0], &x = q[1], &y = q[2], &z = q[3];
        s.q = {w.value(), x.value(), y.value(), z.value()};
        s.log_scale = {ls0.value(), ls1.value()};
        s.tu = {1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)};
        s.tv = {2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)};
        s.tw = cross(s.tu, s.tv);
        const Var e0 = exp(ls0), e1 = exp(ls1);
        s.su = tape.branches().decide(e0.value() >= kMinScale) ? e0 : tape.constant(kMinScale);
        s.sv = tape.branches().decide(e1.value() >= kMinScale) ? e1 : tape.constant(kMinScale);
        s.alpha = sigmoid(op);
        if (has_tint) s.tint = sigmoid(tint_logit);
        const std::size_t sh0 = o + (has_tint ? 11 : 10);
        s.sh.assign(params.begin() + static_cast<long>(sh0), params.begin() + static_cast<long>(sh0 + kShCoeffCount));
    }
    return out;
}

SplatPlane plane_value(const SplatVars& s) {
    return {value3(s.c), {value3(s.tu), value3(s.tv), value3(s.tw)}, {s.su.value(), s.sv.value()}};
}

/// Adjoints of one ray/plane hit. Inputs: the plane, ray origin o and
/// direction d, hit depth tau and local (u, v). Accumulates into the given
/// plane adjoints and the ray adjoints.
struct PlaneAdjoint {
    Vec3 c, tu, tv, tw;
    double su = 0.0, sv = 0.0;
};

void plane_hit_backward(const SplatPlane& p, const Vec3& o, const Vec3& d, double tau, double u, double v, double gu,
                        double gv, double gtau, PlaneAdjoint& gp, Vec3& go, Vec3& gd) {
    const double su = p.scale.x, sv = p.scale.y;
    const Vec3 r = o + tau * d - p.center;
    const Vec3 gr = (gu / su) * p.frame.tu + (gv / sv) * p.frame.tv;
    gp.tu += (gu / su) * r;
    gp.tv += (gv / sv) * r;
    gp.su -= gu * u / su;
    gp.sv -= gv * v / sv;
    go += gr;
    gd += tau * gr;
    gp.c -= gr;
    gtau += dot(gr, d);
    const double den = dot(d, p.frame.tw);
    const Vec3 q = p.center - o;
    gp.c += (gtau / den) * p.frame.tw;
    go -= (gtau / den) * p.frame.tw;
    gp.tw += (gtau / den) * (q - tau * d);
    gd -= (gtau * tau / den) * p.frame.tw;
}

constexpr std::size_t kRasterIn = 19;
constexpr std::size_t kRasterOut = 9;

struct RasterRecord {
    std::uint32_t first = 0;
    std::vector<std::uint8_t> normal_mask;
};

struct RasterSave {
    std::vector<SplatGeom> geoms;
    std::vector<std::uint32_t> ids;
    std::vector<std::uint32_t> offsets;
    std::vector<RasterHit> hits;
    std::vector<std::uint8_t> mask;
    Camera camera;
    Vec3 background;
};

RasterRecord record_raster(Tape& tape, const std::vector<SplatVars>& sv, const Camera& camera, const RenderSettings& rs) {
    auto save = std::make_shared<RasterSave>();
    const std::size_t n = sv.size();
    save->camera = camera;
    save->background = rs.background;
    save->geoms.resize(n);
    save->ids.resize(n * kRasterIn);
    for (std::size_t i = 0; i < n; ++i) {
        const SplatVars& s = sv[i];
        SplatGeom& g = save->geoms[i];
        g.plane = plane_value(s);
        g.opacity = s.alpha.value();
        g.tint = s.tint.value();
        g.color = value3(s.color);
        const std::array<Var, kRasterIn> in{s.c[0],  s.c[1],  s.c[2],  s.tu[0], s.tu[1],  s.tu[2],   s.tv[0],
                                            s.tv[1], s.tv[2], s.tw[0], s.tw[1], s.tw[2],  s.su,      s.sv,
                                            s.alpha, s.tint,  s.color[0], s.color[1], s.color[2]};
        for (std::size_t k = 0; k < kRasterIn; ++k) save->ids[i * kRasterIn + k] = in[k].id;
    }
    const int W = camera.width, H = camera.height;
    const std::size_t P = static_cast<std::size_t>(W) * H;
    const Vec3 eye = camera.center();

    BranchLog& log = tape.branches();
    auto streams = log.streams(3);
    const bool replay = log.mode() == BranchLog::Mode::Replay;
    if (replay) {
        const auto& off = streams[0];
        const auto& ent = streams[1];
        save->offsets.assign(off.begin(), off.end());
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * W + x;
                const Ray ray{eye, camera.pixel_direction(x, y)};
                for (std::uint32_t k = save->offsets[p]; k < save->offsets[p + 1]; ++k) {
                    const auto splat = static_cast<std::uint32_t>(ent[2 * k]);
                    PlaneIntersection pi{};
                    if (!intersect_plane(ray, save->geoms[splat].plane, pi))
                        throw std::runtime_error("replay: recorded hit became parallel");
                    save->hits.push_back({splat, pi.depth, pi.u, pi.v, gaussian_weight(pi.u, pi.v), ent[2 * k + 1]});
                }
            }
        save->mask.assign(streams[2].begin(), streams[2].end());
    } else {
        PixelHits ph;
        render(save->geoms, camera, rs, &ph);
        save->offsets = std::move(ph.offsets);
        save->hits = std::move(ph.hits);
    }

    std::vector<double> out(P * kRasterOut, 0.0);
    if (!replay) save->mask.assign(P, 0);
    for (std::size_t p = 0; p < P; ++p) {
        double T = 1.0, depth_sum = 0.0, spec = 0.0;
        Vec3 diffuse, nsum;
        for (std::uint32_t k = save->offsets[p]; k < save->offsets[p + 1]; ++k) {
            const RasterHit& h = save->hits[k];
            const SplatGeom& g = save->geoms[h.splat];
            const double a = g.opacity * h.weight;
            const double w = a * T;
            diffuse += w * g.color;
            spec += w * g.tint;
            depth_sum += w * h.depth;
            nsum += w * (h.sign > 0 ? g.plane.frame.tw : -g.plane.frame.tw);
            T *= 1.0 - a;
        }
        const double acc = 1.0 - T;
        diffuse += T * rs.background;
        const double nn = norm(nsum);
        if (!replay) save->mask[p] = acc > rs.alpha_mask && nn > 0.0;
        const Vec3 normal = save->mask[p] ? nsum / nn : Vec3{};
        double* o = out.data() + p * kRasterOut;
        o[0] = diffuse.x;
        o[1] = diffuse.y;
        o[2] = diffuse.z;
        o[3] = acc > 0.0 ? depth_sum / acc : rs.far;
        o[4] = normal.x;
        o[5] = normal.y;
        o[6] = normal.z;
        o[7] = spec;
        o[8] = acc;
    }
    if (log.mode() == BranchLog::Mode::Record) {
        streams[0].assign(save->offsets.begin(), save->offsets.end());
        streams[1].reserve(2 * save->hits.size());
        for (const RasterHit& h : save->hits) {
            streams[1].push_back(static_cast<std::int32_t>(h.splat));
            streams[1].push_back(h.sign);
        }
        streams[2].assign(save->mask.begin(), save->mask.end());
    }

    RasterRecord rec;
    rec.normal_mask = save->mask;
    rec.first = tape.record_fused(out, [save, W, P](std::span<const double> g, std::span<double> adj) {
        const std::size_t n = save->geoms.size();
        std::vector<double> gs(n * kRasterIn, 0.0);
        const Vec3 eye = save->camera.center();
        std::vector<double> Ts;
        for (std::size_t p = 0; p < P; ++p) {
            const double* go = g.data() + p * kRasterOut;
            bool any = false;
            for (std::size_t k = 0; k < kRasterOut; ++k) any = any || go[k] != 0.0;
            const std::uint32_t b0 = save->offsets[p], b1 = save->offsets[p + 1];
            if (!any || b0 == b1) continue;
            const Vec3 gD{go[0], go[1], go[2]}, gN{go[4], go[5], go[6]};
            const double gDepth = go[3], gS = go[7], gAcc = go[8];
            const Vec3 dir = save->camera.pixel_direction(static_cast<int>(p % W), static_cast<int>(p / W));

            Ts.resize(b1 - b0);
            double T = 1.0, depth_sum = 0.0;
            Vec3 nsum;
            for (std::uint32_t k = b0; k < b1; ++k) {
                const RasterHit& h = save->hits[k];
                const SplatGeom& sg = save->geoms[h.splat];
                const double a = sg.opacity * h.weight;
                Ts[k - b0] = T;
                depth_sum += a * T * h.depth;
                nsum += (a * T) * (h.sign > 0 ? sg.plane.frame.tw : -sg.plane.frame.tw);
                T *= 1.0 - a;
            }
            const double acc = 1.0 - T;
            double gSd = 0.0, gAccTotal = gAcc;
            if (acc > 0.0) {
                const double depth = depth_sum / acc;
                gSd = gDepth / acc;
                gAccTotal -= gDepth * depth / acc;
            }
            Vec3 gNs;
            if (save->mask[p]) {
                const double nn = norm(nsum);
                const Vec3 nh = nsum / nn;
                gNs = (gN - dot(nh, gN) * nh) / nn;
            }
            double B = dot(gD, save->background) - gAccTotal;
            for (std::uint32_t k = b1; k-- > b0;) {
                const RasterHit& h = save->hits[k];
                const SplatGeom& sg = save->geoms[h.splat];
                const Vec3 normal = h.sign > 0 ? sg.plane.frame.tw : -sg.plane.frame.tw;
                const double a = sg.opacity * h.weight;
                const double Ti = Ts[k - b0];
                const double phi = dot(gD, sg.color) + gSd * h.depth + dot(gNs, normal) + gS * sg.tint;
                const double g_alpha = Ti * (phi - B);
                B = phi * a + (1.0 - a) * B;
                const double w = a * Ti;
                double* gsp = gs.data() + static_cast<std::size_t>(h.splat) * kRasterIn;
                gsp[16] += gD.x * w;
                gsp[17] += gD.y * w;
                gsp[18] += gD.z * w;
                gsp[15] += gS * w;
                const double sgn = h.sign > 0 ? 1.0 : -1.0;
                gsp[9] += sgn * gNs.x * w;
                gsp[10] += sgn * gNs.y * w;
                gsp[11] += sgn * gNs.z * w;
                gsp[14] += g_alpha * h.weight;
                const double gG = g_alpha * sg.opacity;
                const double gu = -gG * h.weight * h.u, gv = -gG * h.weight * h.v;
                PlaneAdjoint pa;
                Vec3 go_unused, gd_unused;
                plane_hit_backward(sg.plane, eye, dir, h.depth, h.u, h.v, gu, gv, gSd * w, pa, go_unused, gd_unused);
                for (std::size_t a3 = 0; a3 < 3; ++a3) {
                    gsp[a3] += pa.c[a3];
                    gsp[3 + a3] += pa.tu[a3];
                    gsp[6 + a3] += pa.tv[a3];
                    gsp[9 + a3] += pa.tw[a3];
                }
                gsp[12] += pa.su;
                gsp[13] += pa.sv;
            }
        }
        for (std::size_t k = 0; k < gs.size(); ++k)
            if (gs[k] != 0.0) adj[save->ids[k]] += gs[k];
    });
    return rec;
}

constexpr std::size_t kTraceSplatIn = 9 + 3 + 2 + 1 + kShCoeffCount;  // c tu tv tw su sv alpha sh

struct TraceHitRec {
    std::uint32_t splat;
    double depth, u, v, weight;
    std::array<std::uint8_t, 3> active;
};

struct TraceSave {
    std::vector<SplatPlane> planes;
    std::vector<double> alpha;
    std::vector<std::array<double, kShCoeffCount>> sh;
    std::vector<std::uint32_t> splat_ids;
    std::vector<Vec3> origin, dir;
    std::vector<std::uint32_t> ray_ids;
    std::vector<std::uint32_t> offsets;
    std::vector<TraceHitRec> hits;
    int degree = 2;
    Vec3 miss;
};

/// Traced color per ray (3 outputs each).
std::uint32_t record_trace(Tape& tape, const std::vector<SplatVars>& env, std::span<const Var3> origins,
                           std::span<const Var3> dirs, int degree, const TraceSettings& ts) {
    auto save = std::make_shared<TraceSave>();
    const std::size_t n = env.size(), R = origins.size();
    save->degree = degree;
    save->miss = ts.miss_color;
    save->planes.resize(n);
    save->alpha.resize(n);
    save->sh.resize(n);
    save->splat_ids.resize(n * kTraceSplatIn);
    std::vector<EnvSplat> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SplatVars& s = env[i];
        save->planes[i] = plane_value(s);
        save->alpha[i] = s.alpha.value();
        for (std::size_t k = 0; k < kShCoeffCount; ++k) save->sh[i][k] = s.sh[k].value();
        std::uint32_t* id = save->splat_ids.data() + i * kTraceSplatIn;
        const std::array<Var, 15> geo{s.c[0],  s.c[1],  s.c[2],  s.tu[0], s.tu[1], s.tu[2], s.tv[0], s.tv[1],
                                      s.tv[2], s.tw[0], s.tw[1], s.tw[2], s.su,    s.sv,    s.alpha};
        for (std::size_t k = 0; k < geo.size(); ++k) id[k] = geo[k].id;
        for (std::size_t k = 0; k < kShCoeffCount; ++k) id[15 + k] = s.sh[k].id;
        values[i].center = value3(s.c);
        values[i].rotation = s.q;
        values[i].log_scale = s.log_scale;
        values[i].opacity_logit = 0.0;
    }
    save->origin.resize(R);
    save->dir.resize(R);
    save->ray_ids.resize(R * 6);
    for (std::size_t r = 0; r < R; ++r) {
        save->origin[r] = value3(origins[r]);
        save->dir[r] = value3(dirs[r]);
        for (std::size_t k = 0; k < 3; ++k) {
            save->ray_ids[r * 6 + k] = origins[r][k].id;
            save->ray_ids[r * 6 + 3 + k] = dirs[r][k].id;
        }
    }

    BranchLog& log = tape.branches();
    auto streams = log.streams(2);
    const bool replay = log.mode() == BranchLog::Mode::Replay;
    std::vector<double> out(R * 3, 0.0);
    Bvh bvh;
    if (!replay) bvh = build_bvh(values, ts.cutoff);
    save->offsets.assign(1, 0);
    std::size_t cursor = 0;
    for (std::size_t r = 0; r < R; ++r) {
        const Ray ray{save->origin[r], save->dir[r], 0.0, std::numeric_limits<double>::infinity()};
        std::vector<std::uint32_t> chosen;
        if (replay) {
            const std::size_t b0 = static_cast<std::size_t>(streams[0][r]), b1 = static_cast<std::size_t>(streams[0][r + 1]);
            for (std::size_t k = b0; k < b1; ++k) chosen.push_back(static_cast<std::uint32_t>(streams[1][4 * k]));
        } else {
            for (const SplatHit& h : gather_k_hits(ray, bvh, ts)) chosen.push_back(static_cast<std::uint32_t>(h.index));
        }
        const auto basis = sh_basis(ray.direction, degree);
        double T = 1.0;
        Vec3 color;
        for (std::size_t j = 0; j < chosen.size(); ++j) {
            const std::uint32_t i = chosen[j];
            PlaneIntersection pi{};
            if (!intersect_plane(ray, save->planes[i], pi)) throw std::runtime_error("trace: recorded hit became parallel");
            TraceHitRec h{i, pi.depth, pi.u, pi.v, gaussian_weight(pi.u, pi.v), {}};
            Vec3 c;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double raw = 0.0;
                for (int k = 0; k < sh_basis_count(degree); ++k)
                    raw += basis[static_cast<std::size_t>(k)] * save->sh[i][3 * static_cast<std::size_t>(k) + ch];
                h.active[ch] = replay ? static_cast<std::uint8_t>(streams[1][4 * cursor + 1 + ch]) : raw > 0.0;
                c[ch] = h.active[ch] ? raw : 0.0;
            }
            const double a = save->alpha[i] * h.weight;
            color += (a * T) * c;
            T *= 1.0 - a;
            save->hits.push_back(h);
            ++cursor;
            if (!replay && T < ts.early_stop) break;
        }
        color += T * ts.miss_color;
        save->offsets.push_back(static_cast<std::uint32_t>(save->hits.size()));
        out[3 * r] = color.x;
        out[3 * r + 1] = color.y;
        out[3 * r + 2] = color.z;
    }
    if (log.mode() == BranchLog::Mode::Record) {
        streams[0].assign(save->offsets.begin(), save->offsets.end());
        for (const auto& h : save->hits) {
            streams[1].push_back(static_cast<std::int32_t>(h.splat));
            for (auto a : h.active) streams[1].push_back(a);
        }
    }

    return tape.record_fused(out, [save, R](std::span<const double> g, std::span<double> adj) {
        const std::size_t n = save->planes.size();
        std::vector<double> gs(n * kTraceSplatIn, 0.0);
        std::vector<double> gr(R * 6, 0.0);
        std::vector<double> Ts;
        const int nb = sh_basis_count(save->degree);
        for (std::size_t r = 0; r < R; ++r) {
            const Vec3 gC{g[3 * r], g[3 * r + 1], g[3 * r + 2]};
            const std::uint32_t b0 = save->offsets[r], b1 = save->offsets[r + 1];
            if ((gC.x == 0.0 && gC.y == 0.0 && gC.z == 0.0) || b0 == b1) continue;
            const Vec3 o = save->origin[r], d = save->dir[r];
            const auto basis = sh_basis(d, save->degree);
            const auto bgrad = sh_basis_grad(d, save->degree);
            Ts.resize(b1 - b0);
            double T = 1.0;
            for (std::uint32_t k = b0; k < b1; ++k) {
                Ts[k - b0] = T;
                T *= 1.0 - save->alpha[save->hits[k].splat] * save->hits[k].weight;
            }
            Vec3 go, gd;
            double B = dot(gC, save->miss);
            for (std::uint32_t k = b1; k-- > b0;) {
                const TraceHitRec& h = save->hits[k];
                const auto& sh = save->sh[h.splat];
                Vec3 c;
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    if (!h.active[ch]) continue;
                    for (int q = 0; q < nb; ++q) c[ch] += basis[static_cast<std::size_t>(q)] * sh[3 * static_cast<std::size_t>(q) + ch];
                }
                const double a = save->alpha[h.splat] * h.weight;
                const double Ti = Ts[k - b0];
                const double phi = dot(gC, c);
                const double g_alpha = Ti * (phi - B);
                B = phi * a + (1.0 - a) * B;
                const double w = a * Ti;
                double* gsp = gs.data() + static_cast<std::size_t>(h.splat) * kTraceSplatIn;
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    if (!h.active[ch]) continue;
                    const double gc = gC[ch] * w;
                    for (int q = 0; q < nb; ++q) {
                        gsp[15 + 3 * static_cast<std::size_t>(q) + ch] += gc * basis[static_cast<std::size_t>(q)];
                        gd += (gc * sh[3 * static_cast<std::size_t>(q) + ch]) * bgrad[static_cast<std::size_t>(q)];
                    }
                }
                gsp[14] += g_alpha * h.weight;
                const double gG = g_alpha * save->alpha[h.splat];
                const double gu = -gG * h.weight * h.u, gv = -gG * h.weight * h.v;
                PlaneAdjoint pa;
                plane_hit_backward(save->planes[h.splat], o, d, h.depth, h.u, h.v, gu, gv, 0.0, pa, go, gd);
                for (std::size_t a3 = 0; a3 < 3; ++a3) {
                    gsp[a3] += pa.c[a3];
                    gsp[3 + a3] += pa.tu[a3];
                    gsp[6 + a3] += pa.tv[a3];
                    gsp[9 + a3] += pa.tw[a3];
                }
                gsp[12] += pa.su;
                gsp[13] += pa.sv;
            }
            for (std::size_t k = 0; k < 3; ++k) {
                gr[6 * r + k] += go[k];
                gr[6 * r + 3 + k] += gd[k];
            }
        }
        for (std::size_t k = 0; k < gs.size(); ++k)
            if (gs[k] != 0.0) adj[save->splat_ids[k]] += gs[k];
        for (std::size_t k = 0; k < gr.size(); ++k)
            if (gr[k] != 0.0) adj[save->ray_ids[k]] += gr[k];
    });
}

}  // namespace

TapeFrame record_frame(Tape& tape, std::span<const Var> params, const Scene& structure, const Camera& camera,
                       const PipelineOptions& options) {
    const ParamLayout L = ParamLayout::of(structure);
    if (params.size() != L.total()) throw std::invalid_argument("record_frame: parameter layout mismatch");
    if (camera.width <= 0 || camera.height <= 0) throw std::invalid_argument("record_frame: zero-resolution camera");
    const double t = camera.time;
    const int degree = structure.sh_degree;
    const Vec3 eye = camera.center();

    std::vector<SplatVars> main =
        splat_vars(tape, params, 0, L.n_main, kMainStride, true, structure.main_field,
                   params.subspan(L.main_field_offset(), L.main_field), t);
    for (SplatVars& s : main) {
        const Var3 view = normalize(s.c + (-eye));
        const Var3 raw = sh_color(tape, s.sh, view, degree);
        s.color = {clamp_min0(raw[0]), clamp_min0(raw[1]), clamp_min0(raw[2])};
    }
    const RasterRecord rr = record_raster(tape, main, camera, options.render);

    const int W = camera.width, H = camera.height;
    const std::size_t P = static_cast<std::size_t>(W) * H;
    TapeFrame f;
    f.depth.resize(P);
    f.normal.resize(P);
    f.alpha_spec.resize(P);
    f.accum.resize(P);
    std::vector<Var3> diffuse(P);
    for (std::size_t p = 0; p < P; ++p) {
        const std::uint32_t b = rr.first + static_cast<std::uint32_t>(p * kRasterOut);
        diffuse[p] = {tape.at(b), tape.at(b + 1), tape.at(b + 2)};
        f.depth[p] = tape.at(b + 3);
        f.normal[p] = {tape.at(b + 4), tape.at(b + 5), tape.at(b + 6)};
        f.alpha_spec[p] = tape.at(b + 7);
        f.accum[p] = tape.value(b + 8);
    }

    f.image.resize(3 * P);
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = 0; c < 3; ++c) f.image[3 * p + c] = diffuse[p][c];
    if (options.phase == Phase::Diffuse || !options.specular) return f;

    std::vector<SplatVars> env =
        splat_vars(tape, params, L.env_offset(), L.n_env, kEnvStride, false, structure.env_field,
                   params.subspan(L.env_field_offset(), L.env_field), t);
    std::vector<std::size_t> traced;
    std::vector<Var3> origins, dirs;
    const double eps = options.trace.epsilon;
    for (std::size_t p = 0; p < P; ++p) {
        if (!rr.normal_mask[p]) continue;
        const Vec3 d = camera.pixel_direction(static_cast<int>(p % W), static_cast<int>(p / W));
        const Var3& n = f.normal[p];
        const Var depth = f.depth[p];
        origins.push_back({depth * d.x + eye.x + eps * n[0], depth * d.y + eye.y + eps * n[1],
                           depth * d.z + eye.z + eps * n[2]});
        const Var dn2 = dot(n, d) * 2.0;
        dirs.push_back({d.x - dn2 * n[0], d.y - dn2 * n[1], d.z - dn2 * n[2]});
        traced.push_back(p);
    }
    const std::uint32_t tr = record_trace(tape, env, origins, dirs, degree, options.trace);
    for (std::size_t k = 0; k < traced.size(); ++k) {
        const std::size_t p = traced[k];
        const Var a = f.alpha_spec[p];
        const Var one_minus = 1.0 - a;
        for (std::size_t c = 0; c < 3; ++c)
            f.image[3 * p + c] = one_minus * diffuse[p][c] + a * tape.at(tr + static_cast<std::uint32_t>(3 * k + c));
    }
    return f;
}

Var record_frame_loss(Tape& tape, std::span<const Var> params, const Scene& structure, const Camera& camera,
                      const Image& gt, const NormalMap* external, const PipelineOptions& options, LossReport* report) {
    if (gt.width != camera.width || gt.height != camera.height || gt.channels != 3)
        throw std::invalid_argument("record_frame_loss: ground truth does not match the camera");
    const TapeFrame f = record_frame(tape, params, structure, camera, options);
    const LossWeights& lw = options.weights;
    LossReport r;
    Var photo = photometric(tape, f.image, gt);
    Var total = photo;
    r.photometric = photo.value();
    r.photometric_count = f.image.size();
    if (lw.lambda_ssim != 0.0) {
        const Var term = (1.0 - ssim(tape, f.image, gt)) * 0.5;
        r.ssim_term = term.value();
        total = total + lw.lambda_ssim * term;
    }
    auto logged_mask = [&](std::vector<std::uint8_t> natural) {
        auto s = tape.branches().streams(1);
        if (tape.branches().mode() == BranchLog::Mode::Replay) return std::vector<std::uint8_t>(s[0].begin(), s[0].end());
        if (!s.empty()) s[0].assign(natural.begin(), natural.end());
        return natural;
    };
    if (lw.lambda_norm != 0.0) {
        std::vector<double> depth(f.depth.size());
        for (std::size_t p = 0; p < depth.size(); ++p) depth[p] = f.depth[p].value();
        const PseudoNormals pn = pseudo_normals_from_depth(depth, camera);
        const auto mask = logged_mask(pseudo_normal_mask(f.accum, pn.valid, camera.width, camera.height));
        const auto target = pseudo_normals_from_depth(tape, f.depth, camera, mask);
        const Var ln = normal_consistency(tape, f.normal, target, mask);
        r.l_norm = ln.value();
        r.norm_count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
        total = total + lw.lambda_norm * ln;
    }
    if (lw.lambda_tc != 0.0 && external) {
        const auto mask = logged_mask(external_normal_mask(f.accum, *external));
        const Var lt = tc_normal(tape, f.normal, external->normals, mask);
        r.l_tcnorm = lt.value();
        r.tc_count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
        total = total + lw.lambda_tc * lt;
    }
    r.total = total.value();
    if (report) *report = r;
    return total;
}

}  // namespace specsplat
