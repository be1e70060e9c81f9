#include "specsplat/rasterizer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace specsplat {

RenderBuffers::RenderBuffers(int w, int h)
    : width(w), height(h), diffuse(pixel_count()), depth(pixel_count(), 0.0), normal(pixel_count()),
      alpha_spec(pixel_count(), 0.0), transmittance(pixel_count(), 1.0), accum(pixel_count(), 0.0) {}

namespace {

Image vec_image(const std::vector<Vec3>& v, int w, int h) {
    Image img(w, h, 3);
    for (std::size_t i = 0; i < v.size(); ++i) {
        img.data[3 * i] = v[i].x;
        img.data[3 * i + 1] = v[i].y;
        img.data[3 * i + 2] = v[i].z;
    }
    return img;
}

Image scalar_image(const std::vector<double>& v, int w, int h) {
    Image img(w, h, 1);
    img.data = v;
    return img;
}

}  // namespace

Image RenderBuffers::diffuse_image() const { return vec_image(diffuse, width, height); }
Image RenderBuffers::depth_image() const { return scalar_image(depth, width, height); }
Image RenderBuffers::normal_image() const { return vec_image(normal, width, height); }
Image RenderBuffers::alpha_spec_image() const { return scalar_image(alpha_spec, width, height); }

void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    auto run = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                body(i);
            } catch (...) {
                if (!failed.exchange(true)) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned k = 1; k < workers; ++k) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

std::vector<SplatGeom> prepare_splats(std::span<const SplatPrimitive> splats, const Camera& camera, int sh_degree) {
    const Vec3 eye = camera.center();
    std::vector<SplatGeom> out(splats.size());
    for (std::size_t i = 0; i < splats.size(); ++i) {
        const SplatPrimitive& s = splats[i];
        SplatGeom& g = out[i];
        g.plane = splat_plane(s);
        g.opacity = sigmoid(s.opacity_logit);
        g.tint = sigmoid(s.tint_logit);
        Vec3 view = s.center - eye;
        const double n = norm(view);
        view = n > 0.0 ? view / n : Vec3{0, 0, 1};
        g.color = eval_sh(s.sh_coeffs, view, sh_degree);
    }
    return out;
}

PixelResult composite_pixel(std::span<const CompositeHit> hits, const RenderSettings& settings) {
    PixelResult r;
    double T = 1.0;
    double depth_sum = 0.0;
    Vec3 nsum;
    for (const CompositeHit& h : hits) {
        const double a = h.alpha_base * h.weight;
        const double w = a * T;
        r.diffuse += w * h.color;
        r.alpha_spec += w * h.tint;
        depth_sum += w * h.depth;
        nsum += w * h.normal;
        T *= 1.0 - a;
        ++r.used;
        if (T < settings.early_stop) break;
    }
    r.transmittance = T;
    r.accum = 1.0 - T;
    r.diffuse += T * settings.background;
    r.depth = r.accum > 0.0 ? depth_sum / r.accum : settings.far;
    const double nn = norm(nsum);
    r.normal = (r.accum > settings.alpha_mask && nn > 0.0) ? nsum / nn : Vec3{};
    return r;
}

namespace {

struct Footprint {
    int x0, y0, x1, y1;  // inclusive tile range; x0 > x1 means culled
};

/// Tiles overlapped by the projection of the splat's cutoff square. The cutoff
/// disk lies inside the square, and with every corner in front of the camera
/// the projected square is the convex hull of the projected corners.
Footprint footprint(const SplatGeom& g, const Camera& cam, double radius, int tiles_x, int tiles_y, int tile) {
    const Footprint none{1, 1, 0, 0};
    const Footprint all{0, 0, tiles_x - 1, tiles_y - 1};
    const Vec3 eu = (radius * g.plane.scale.x) * g.plane.frame.tu;
    const Vec3 ev = (radius * g.plane.scale.y) * g.plane.frame.tv;
    double minx = std::numeric_limits<double>::infinity(), miny = minx;
    double maxx = -minx, maxy = -minx;
    int behind = 0;
    for (int k = 0; k < 4; ++k) {
        const Vec3 p = g.plane.center + ((k & 1) ? eu : -eu) + ((k & 2) ? ev : -ev);
        const Vec3 pc = cam.world_to_camera.transform_point(p);
        if (pc.z <= 1e-9) {
            ++behind;
            continue;
        }
        const Vec2 px = cam.project_camera_point(pc);
        minx = std::min(minx, px.x);
        maxx = std::max(maxx, px.x);
        miny = std::min(miny, px.y);
        maxy = std::max(maxy, px.y);
    }
    if (behind == 4) return none;
    if (behind > 0) return all;
    if (!(std::isfinite(minx) && std::isfinite(maxx) && std::isfinite(miny) && std::isfinite(maxy))) return all;
    // Pixel x is sampled at x + 0.5.
    const double lx = std::ceil(minx - 0.5), hx = std::floor(maxx - 0.5);
    const double ly = std::ceil(miny - 0.5), hy = std::floor(maxy - 0.5);
    if (hx < 0 || hy < 0 || lx > cam.width - 1 || ly > cam.height - 1 || lx > hx || ly > hy) return none;
    auto tile_of = [tile](double v, int count) {
        return std::clamp(static_cast<int>(std::floor(v / tile)), 0, count - 1);
    };
    return {tile_of(std::max(lx, 0.0), tiles_x), tile_of(std::max(ly, 0.0), tiles_y),
            tile_of(std::min(hx, cam.width - 1.0), tiles_x), tile_of(std::min(hy, cam.height - 1.0), tiles_y)};
}

void check_settings(const RenderSettings& s) {
    if (s.tile_size < 1) throw std::invalid_argument("render: tile size must be at least 1");
    if (!(s.early_stop > 0.0 && s.early_stop < 1.0) || !(s.alpha_mask > 0.0 && s.alpha_mask < 1.0) ||
        !(s.cutoff > 0.0 && s.cutoff < 1.0))
        throw std::invalid_argument("render: thresholds must lie in (0, 1)");
}

}  // namespace

RenderBuffers render(const std::vector<SplatGeom>& geoms, const Camera& camera, const RenderSettings& settings,
                     PixelHits* hits_out) {
    check_settings(settings);
    if (camera.width <= 0 || camera.height <= 0) throw std::invalid_argument("render: zero-resolution camera");
    const int W = camera.width, H = camera.height, ts = settings.tile_size;
    const int tiles_x = (W + ts - 1) / ts, tiles_y = (H + ts - 1) / ts;
    const double radius = std::sqrt(-2.0 * std::log(settings.cutoff));

    std::vector<std::vector<std::uint32_t>> bins(static_cast<std::size_t>(tiles_x) * tiles_y);
    for (std::size_t i = 0; i < geoms.size(); ++i) {
        const Footprint f = footprint(geoms[i], camera, radius, tiles_x, tiles_y, ts);
        for (int ty = f.y0; ty <= f.y1; ++ty)
            for (int tx = f.x0; tx <= f.x1; ++tx)
                bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<std::uint32_t>(i));
    }

    RenderBuffers out(W, H);
    const Vec3 eye = camera.center();
    std::vector<std::vector<RasterHit>> pixel_hits;
    if (hits_out) pixel_hits.resize(out.pixel_count());

    parallel_for(bins.size(), settings.workers, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % tiles_x), ty = static_cast<int>(tile / tiles_x);
        const auto& cand = bins[tile];
        std::vector<RasterHit> hits;
        std::vector<CompositeHit> comp;
        for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(W, (tx + 1) * ts); ++x) {
                const Ray ray{eye, camera.pixel_direction(x, y), settings.near, settings.far};
                hits.clear();
                for (std::uint32_t i : cand) {
                    PlaneIntersection pi{};
                    if (!intersect_plane(ray, geoms[i].plane, pi)) continue;
                    if (!(pi.depth >= ray.t_min && pi.depth <= ray.t_max)) continue;
                    const double w = gaussian_weight(pi.u, pi.v);
                    if (!(w >= settings.cutoff)) continue;
                    hits.push_back({i, pi.depth, pi.u, pi.v, w, 1});
                }
                std::sort(hits.begin(), hits.end(), [](const RasterHit& a, const RasterHit& b) {
                    return a.depth < b.depth || (a.depth == b.depth && a.splat < b.splat);
                });
                comp.clear();
                for (RasterHit& h : hits) {
                    const SplatGeom& g = geoms[h.splat];
                    Vec3 n = g.plane.frame.tw;
                    if (settings.flip_normals && dot(n, ray.direction) > 0.0) {
                        n = -n;
                        h.sign = -1;
                    }
                    comp.push_back({h.depth, g.opacity, h.weight, g.tint, g.color, n});
                }
                const PixelResult r = composite_pixel(comp, settings);
                const std::size_t p = static_cast<std::size_t>(y) * W + x;
                out.diffuse[p] = r.diffuse;
                out.depth[p] = r.depth;
                out.normal[p] = r.normal;
                out.alpha_spec[p] = r.alpha_spec;
                out.transmittance[p] = r.transmittance;
                out.accum[p] = r.accum;
                if (hits_out) pixel_hits[p].assign(hits.begin(), hits.begin() + static_cast<long>(r.used));
            }
        }
    });

    if (hits_out) {
        hits_out->offsets.assign(1, 0);
        hits_out->hits.clear();
        for (const auto& ph : pixel_hits) {
            hits_out->hits.insert(hits_out->hits.end(), ph.begin(), ph.end());
            hits_out->offsets.push_back(static_cast<std::uint32_t>(hits_out->hits.size()));
        }
    }
    return out;
}

RenderBuffers render(std::span<const SplatPrimitive> splats, const Camera& camera, int sh_degree,
                     const RenderSettings& settings) {
    return render(prepare_splats(splats, camera, sh_degree), camera, settings);
}

RenderBuffers oracle_render(std::span<const SplatPrimitive> splats, const Camera& camera, int sh_degree,
                            const RenderSettings& settings) {
    check_settings(settings);
    if (camera.width <= 0 || camera.height <= 0) throw std::invalid_argument("oracle_render: zero-resolution camera");
    struct Local {
        Mat4 inv;
        Vec3 normal;
        Vec3 color;
        double opacity, tint;
    };
    const Vec3 eye = camera.center();
    std::vector<Local> locals;
    for (const auto& s : splats) {
        const Mat4 h = splat_affine(s);
        Local l{};
        if (!invert(h, l.inv)) throw std::runtime_error("oracle_render: singular splat transform");
        l.normal = {h(0, 2), h(1, 2), h(2, 2)};
        l.color = eval_sh(s.sh_coeffs, normalize(s.center - eye), sh_degree);
        l.opacity = 1.0 / (1.0 + std::exp(-s.opacity_logit));
        l.tint = 1.0 / (1.0 + std::exp(-s.tint_logit));
        locals.push_back(l);
    }

    RenderBuffers out(camera.width, camera.height);
    struct Hit {
        double depth;
        std::size_t index;
        double g;
    };
    for (int y = 0; y < camera.height; ++y) {
        for (int x = 0; x < camera.width; ++x) {
            const Vec3 d = camera.pixel_direction(x, y);
            std::vector<Hit> hits;
            for (std::size_t i = 0; i < locals.size(); ++i) {
                const Vec3 ol = locals[i].inv.transform_point(eye);
                const Vec3 dl = locals[i].inv.transform_dir(d);
                if (std::abs(dot(d, locals[i].normal)) < 1e-12) continue;
                const double t = -ol.z / dl.z;
                if (!(t >= settings.near && t <= settings.far)) continue;
                const double u = ol.x + t * dl.x, v = ol.y + t * dl.y;
                const double g = std::exp(-(u * u + v * v) / 2.0);
                if (g < settings.cutoff) continue;
                hits.push_back({t, i, g});
            }
            std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
                return a.depth != b.depth ? a.depth < b.depth : a.index < b.index;
            });
            std::vector<double> alpha;
            for (const Hit& h : hits) alpha.push_back(locals[h.index].opacity * h.g);
            // Same truncation as the renderer: keep hits while the running
            // product has not yet dropped below the threshold.
            std::size_t used = 0;
            double running = 1.0;
            while (used < hits.size() && running >= settings.early_stop) running *= 1.0 - alpha[used++];

            Vec3 c, nsum;
            double spec = 0.0, dsum = 0.0, wsum = 0.0;
            for (std::size_t i = 0; i < used; ++i) {
                double Ti = 1.0;
                for (std::size_t j = 0; j < i; ++j) Ti *= 1.0 - alpha[j];
                const double w = alpha[i] * Ti;
                const Local& l = locals[hits[i].index];
                Vec3 n = l.normal;
                if (settings.flip_normals && dot(n, d) > 0.0) n = -n;
                c += w * l.color;
                spec += w * l.tint;
                dsum += w * hits[i].depth;
                nsum += w * n;
                wsum += w;
            }
            double T = 1.0;
            for (std::size_t j = 0; j < used; ++j) T *= 1.0 - alpha[j];
            const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
            out.diffuse[p] = c + T * settings.background;
            out.alpha_spec[p] = spec;
            out.transmittance[p] = T;
            out.accum[p] = 1.0 - T;
            out.depth[p] = used > 0 && wsum > 0.0 ? dsum / wsum : settings.far;
            out.normal[p] = (1.0 - T > settings.alpha_mask && norm(nsum) > 0.0) ? normalize(nsum) : Vec3{};
        }
    }
    return out;
}

PseudoNormals pseudo_normals_from_depth(std::span<const double> depth, const Camera& camera) {
    const int W = camera.width, H = camera.height;
    if (depth.size() != static_cast<std::size_t>(W) * H)
        throw std::invalid_argument("pseudo_normals_from_depth: depth size does not match camera");
    const Vec3 eye = camera.center();
    std::vector<Vec3> P(depth.size()), D(depth.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * W + x;
            D[p] = camera.pixel_direction(x, y);
            P[p] = eye + depth[p] * D[p];
        }
    auto at = [&](int x, int y) { return P[static_cast<std::size_t>(y) * W + x]; };
    PseudoNormals out{std::vector<Vec3>(depth.size()), std::vector<std::uint8_t>(depth.size(), 0)};
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            Vec3 gx, gy;
            if (W > 1) {
                if (x == 0) gx = at(1, y) - at(0, y);
                else if (x == W - 1) gx = at(x, y) - at(x - 1, y);
                else gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            }
            if (H > 1) {
                if (y == 0) gy = at(x, 1) - at(x, 0);
                else if (y == H - 1) gy = at(x, y) - at(x, y - 1);
                else gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            }
            const Vec3 c = cross(gx, gy);
            const double n = norm(c);
            const std::size_t p = static_cast<std::size_t>(y) * W + x;
            if (!(n >= 1e-9)) continue;
            Vec3 nn = c / n;
            if (dot(nn, D[p]) > 0.0) nn = -nn;
            out.normals[p] = nn;
            out.valid[p] = 1;
        }
    }
    return out;
}

}  // namespace specsplat
