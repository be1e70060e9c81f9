#include "specsplat/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "specsplat/env_tracer.hpp"
#include "specsplat/fixtures.hpp"
#include "specsplat/pipeline.hpp"
#include "specsplat/rasterizer.hpp"

namespace specsplat {

using testing::Rng;
using testing::uniform;

namespace {

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Vec3 random_unit(Rng& rng) {
    std::normal_distribution<double> g;
    Vec3 v;
    do v = {g(rng), g(rng), g(rng)};
    while (norm(v) < 1e-6);
    return normalize(v);
}

/// Camera on a sphere of radius 3 around the origin, random time.
Camera random_camera(Rng& rng, int w, int h) {
    Vec3 eye = 3.0 * random_unit(rng);
    if (std::abs(eye.y) > 2.7) eye.y = std::copysign(2.7, eye.y);
    return Camera::look_at(eye, {0.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, w, h, uniform(rng, 35.0, 60.0), uniform(rng, 0.0, 1.0));
}

std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

}  // namespace

CheckResult check_reflection(std::size_t pairs, std::uint64_t seed) {
    Stopwatch sw;
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < pairs; ++i) {
        const Vec3 d = random_unit(rng), n = random_unit(rng);
        const Vec3 r = reflect(d, n);
        const Vec3 back = reflect(r, n);
        worst = std::max({worst, std::abs(norm(r) - 1.0), std::abs(dot(r, n) + dot(d, n)), std::abs(back.x - d.x),
                          std::abs(back.y - d.y), std::abs(back.z - d.z)});
    }
    return {"reflection", worst < 1e-12, worst, 1e-12, sw.seconds(), std::to_string(pairs) + " pairs"};
}

CheckResult check_rasterizer(std::size_t scenes, int resolution, std::size_t max_splats, std::uint64_t seed) {
    Stopwatch sw;
    Rng rng(seed);
    double worst = 0.0;
    std::string where;
    RenderSettings rs;
    for (std::size_t s = 0; s < scenes; ++s) {
        const auto n = std::uniform_int_distribution<std::size_t>(1, max_splats)(rng);
        const auto splats = testing::random_main_splats(rng, n);
        const Camera cam = random_camera(rng, resolution, resolution);
        rs.background = testing::uniform_vec(rng, 0.0, 1.0);
        rs.flip_normals = s % 2 == 1;
        const RenderBuffers a = render(splats, cam, kMaxShDegree, rs);
        const RenderBuffers b = oracle_render(splats, cam, kMaxShDegree, rs);
        for (std::size_t p = 0; p < a.pixel_count(); ++p) {
            const double e = std::max({norm(a.diffuse[p] - b.diffuse[p]), std::abs(a.depth[p] - b.depth[p]),
                                       norm(a.normal[p] - b.normal[p]), std::abs(a.alpha_spec[p] - b.alpha_spec[p])});
            if (e > worst) {
                worst = e;
                where = "scene " + std::to_string(s) + " pixel " + std::to_string(p);
            }
        }
    }
    return {"rasterizer_oracle", worst < 1e-6, worst, 1e-6, sw.seconds(),
            std::to_string(scenes) + " scenes at " + std::to_string(resolution) + "px" + (where.empty() ? "" : ", worst at " + where)};
}

CheckResult check_tracer(std::size_t scenes, std::size_t rays, std::size_t max_splats, std::uint64_t seed) {
    Stopwatch sw;
    Rng rng(seed);
    double worst = 0.0;
    std::size_t mismatched = 0, total_hits = 0;
    TraceSettings ts;
    for (std::size_t s = 0; s < scenes; ++s) {
        const auto n = std::uniform_int_distribution<std::size_t>(1, max_splats)(rng);
        const auto env = testing::random_env_splats(rng, n);
        const Bvh bvh = build_bvh(env, ts.cutoff);
        std::vector<Vec3> origins(rays), dirs(rays);
        for (std::size_t r = 0; r < rays; ++r) {
            origins[r] = testing::uniform_vec(rng, -1.0, 1.0);
            dirs[r] = random_unit(rng);
        }
        const TraceResult tr = trace_specular(origins, dirs, env, bvh, kMaxShDegree, ts);
        for (std::size_t r = 0; r < rays; ++r) {
            const Ray ray{origins[r], dirs[r], 0.0, std::numeric_limits<double>::infinity()};
            const auto fast = gather_k_hits(ray, bvh, ts);
            auto slow = brute_force_hits(ray, env, ts.cutoff);
            if (slow.size() > ts.k) slow.resize(ts.k);
            total_hits += slow.size();
            bool same = fast.size() == slow.size();
            for (std::size_t i = 0; same && i < fast.size(); ++i)
                same = fast[i].index == slow[i].index && fast[i].depth == slow[i].depth;
            if (!same) ++mismatched;
            const TraceSample ref = brute_force_trace(ray, env, kMaxShDegree, ts);
            worst = std::max({worst, norm(tr.color[r] - ref.color), std::abs(tr.transmittance[r] - ref.transmittance)});
        }
    }
    const bool pass = mismatched == 0 && worst < 1e-9;
    return {"tracer_oracle", pass, worst, 1e-9, sw.seconds(),
            std::to_string(scenes * rays) + " rays, " + std::to_string(total_hits) + " hits, " +
                std::to_string(mismatched) + " rays with differing hit lists"};
}

CheckResult check_hybrid(std::size_t scenes, int resolution, std::uint64_t seed) {
    Stopwatch sw;
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t s = 0; s < scenes; ++s) {
        testing::SceneOptions o;
        o.n_main = std::uniform_int_distribution<std::size_t>(1, 120)(rng);
        o.n_env = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
        o.fields = s % 2 == 1;
        const Scene scene = testing::random_scene(rng, o);
        const Camera cam = random_camera(rng, resolution, resolution);
        RenderSettings rs;
        rs.background = testing::uniform_vec(rng, 0.0, 1.0);
        TraceSettings ts;
        ts.epsilon = reflection_epsilon(scene);
        ts.k = std::max<std::size_t>(ts.k, scene.env.size());
        const HybridRender h = render_hybrid(scene, cam, rs, ts);
        const Image ref = oracle_render_hybrid(scene, cam, rs, ts);
        for (std::size_t i = 0; i < ref.data.size(); ++i) worst = std::max(worst, std::abs(h.image.data[i] - ref.data[i]));
    }
    return {"hybrid_oracle", worst < 1e-6, worst, 1e-6, sw.seconds(),
            std::to_string(scenes) + " scenes at " + std::to_string(resolution) + "px"};
}

CheckResult check_gradients(std::size_t n_main, std::size_t n_env, int resolution, std::size_t per_group,
                            std::uint64_t seed) {
    Stopwatch sw;
    Rng rng(seed);
    const Scene scene = testing::random_scene(rng, {n_main, n_env, true});
    const Camera cam = testing::default_camera(resolution, resolution, uniform(rng, 0.0, 1.0));
    PipelineOptions opt;
    opt.phase = Phase::Joint;
    opt.trace.epsilon = reflection_epsilon(scene);
    // Targets come from an unrelated scene so every loss term is active.
    const Scene other = testing::random_scene(rng, {n_main, n_env, false});
    const HybridRender target = render_hybrid(other, cam, opt.render, opt.trace);
    NormalMap ext;
    ext.width = ext.height = resolution;
    for (const Vec3& n : target.buffers.normal) {
        ext.valid.push_back(norm(n) > 0.0);
        ext.normals.push_back(norm(n) > 0.0 ? n : Vec3{});
    }

    const ParamLayout layout = ParamLayout::of(scene);
    const std::vector<double> x0 = flatten_parameters(scene);
    std::vector<std::vector<std::size_t>> by_group(kParamGroupCount);
    for (std::size_t i = 0; i < x0.size(); ++i) by_group[static_cast<std::size_t>(layout.group(i))].push_back(i);
    std::vector<std::size_t> subset;
    for (auto& g : by_group) {
        std::shuffle(g.begin(), g.end(), rng);
        if (per_group > 0) g.resize(std::min(g.size(), per_group));
        subset.insert(subset.end(), g.begin(), g.end());
    }
    std::sort(subset.begin(), subset.end());

    const auto loss = [&](Tape& tape, std::span<const Var> p) {
        return record_frame_loss(tape, p, scene, cam, target.image, &ext, opt);
    };
    const GradReport r = grad_check(loss, x0, 1e-4, subset);

    std::array<double, kParamGroupCount> worst{};
    std::array<std::size_t, kParamGroupCount> nonzero{};
    for (std::size_t k = 0; k < r.checked.size(); ++k) {
        const auto g = static_cast<std::size_t>(layout.group(r.checked[k]));
        worst[g] = std::max(worst[g], r.rel_error[k]);
        nonzero[g] += r.analytic[k] != 0.0;
    }
    std::string detail;
    bool all_groups = true;
    for (std::size_t g = 0; g < kParamGroupCount; ++g) {
        detail += std::string(g ? "; " : "") + group_name(static_cast<ParamGroup>(g)) + " " +
                  fmt("%.2e", worst[g]) + " (" + std::to_string(nonzero[g]) + "/" + std::to_string(by_group[g].size()) + " nonzero)";
        all_groups = all_groups && nonzero[g] > 0;
    }
    CheckResult res{"gradients", r.max_rel_error < 1e-4 && all_groups, r.max_rel_error, 1e-4, sw.seconds(), detail};
    if (!all_groups) res.detail += "; a parameter group received no gradient";
    return res;
}

}  // namespace specsplat
