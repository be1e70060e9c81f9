#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "specsplat/checks.hpp"
#include "specsplat/deform.hpp"
#include "specsplat/metrics.hpp"
#include "specsplat/pipeline.hpp"
#include "specsplat/synth.hpp"
#include "specsplat/trainer.hpp"

using namespace specsplat;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string frame_stem(const Frame& f, std::size_t i) {
    if (!f.image.empty()) return fs::path(f.image).stem().string();
    char name[16];
    std::snprintf(name, sizeof name, "%03zu", i);
    return name;
}

int run_synth(const fs::path& spec_path, const fs::path& out_dir) {
    const SyntheticSpec spec = synthetic_spec_from_json(read_text(spec_path));
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = generate_synthetic(spec, out_dir);
    std::printf("%s: %zu frames at %dx%d written to %s (%.1f s)\n", synthetic_kind_name(spec.kind), ds.frames.size(),
                spec.width, spec.height, out_dir.string().c_str(), ms_since(t0) / 1000.0);
    return 0;
}

int run_train(const fs::path& config_path) {
    const std::string text = read_text(config_path);
    const std::vector<std::string> extra{"dataset", "scene"};
    TrainConfig config = train_config_from_json(text, extra);
    const json j = json::parse(text);
    if (!j.contains("dataset")) throw std::invalid_argument("train config: missing \"dataset\"");
    const fs::path base = config_path.parent_path();
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    const Dataset ds = load_dataset(resolve(j.at("dataset").get<std::string>()));
    const Scene init = j.contains("scene") ? load_scene(resolve(j.at("scene").get<std::string>()))
                                           : load_scene(ds.resolve(ds.scene));
    if (config.out_dir.empty()) config.out_dir = "train_out";
    if (config.out_dir.is_relative()) config.out_dir = base / config.out_dir;
    const TrainingData data = load_training_data(ds);

    std::printf("training %zu steps on %zu frames (%zu main, %zu env splats)\n", config.schedule.total_steps,
                data.cameras.size(), init.main.size(), init.env.size());
    const std::size_t every = std::max<std::size_t>(1, config.schedule.total_steps / 20);
    const TrainResult result = train(data, init, config, [&](const StepRecord& r, auto, auto, const auto&) {
        if (r.step % every == 0 || r.step + 1 == config.schedule.total_steps)
            std::printf("step %6zu  %-8s  loss %.5f  main %zu  %.1f ms\n", r.step, phase_name(r.phase), r.loss.total,
                        r.n_main, r.wall_ms);
    });

    RenderSettings rs = config.render;
    rs.background = data.background;
    TraceSettings ts = config.trace;
    if (ts.epsilon <= 0.0) ts.epsilon = reflection_epsilon(init);
    const auto held_out = test_frames(data.cameras.size());
    EvalReport report = evaluate_frames(result.scene, data, held_out, rs, ts, config.specular,
                                        config.out_dir / "heldout");
    std::cout << report.to_table();
    json out = json::parse(report.to_json());
    if (std::all_of(held_out.begin(), held_out.end(), [&](std::size_t f) { return data.normals[f].has_value(); }))
        out["normal_error_deg"] = normal_error_deg(result.scene, data, held_out, rs);
    write_text(config.out_dir / "eval.json", out.dump(2));
    std::printf("wrote %s\n", (config.out_dir / "final_scene.json").string().c_str());
    return 0;
}

struct RenderOptions {
    bool buffers = false;
    bool diffuse = false;
    std::size_t k = 16;
    double epsilon = 0.0;
    std::vector<double> background;
    bool flip_normals = true;
};

int run_render(const fs::path& scene_path, const fs::path& cameras_path, const fs::path& out_dir,
               const RenderOptions& o) {
    const Scene scene = load_scene(scene_path);
    const std::vector<Frame> frames = load_cameras(cameras_path);
    RenderSettings rs;
    rs.flip_normals = o.flip_normals;
    if (o.background.size() == 3) rs.background = {o.background[0], o.background[1], o.background[2]};
    TraceSettings ts;
    ts.k = o.k;
    ts.epsilon = o.epsilon > 0.0 ? o.epsilon : reflection_epsilon(scene);
    fs::create_directories(out_dir);
    double total_ms = 0.0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const HybridRender h = render_hybrid(scene, frames[i].camera, rs, ts);
        total_ms += ms_since(t0);
        const std::string stem = frame_stem(frames[i], i);
        save_image(o.diffuse ? h.buffers.diffuse_image() : h.image, out_dir / (stem + ".pfm"));
        if (o.buffers) {
            const fs::path dir = out_dir / "buffers";
            fs::create_directories(dir);
            save_image(h.buffers.diffuse_image(), dir / (stem + "_diffuse.pfm"));
            save_image(h.buffers.depth_image(), dir / (stem + "_depth.pfm"));
            save_image(h.buffers.normal_image(), dir / (stem + "_normal.pfm"));
            save_image(h.buffers.alpha_spec_image(), dir / (stem + "_alpha_spec.pfm"));
            save_image(h.specular, dir / (stem + "_specular.pfm"));
        }
    }
    std::printf("rendered %zu frames to %s (%.1f ms/frame)\n", frames.size(), out_dir.string().c_str(),
                frames.empty() ? 0.0 : total_ms / static_cast<double>(frames.size()));
    return 0;
}

int run_eval(const fs::path& renders, const fs::path& gt, const std::string& json_path) {
    const EvalReport report = evaluate_directories(renders, gt);
    std::cout << report.to_table();
    if (json_path.empty()) {
        std::cout << report.to_json() << "\n";
    } else {
        write_text(json_path, report.to_json());
        std::printf("wrote %s\n", json_path.c_str());
    }
    return 0;
}

int run_check(bool full, std::uint64_t seed) {
    std::vector<CheckResult> results;
    auto report = [&](CheckResult r) {
        std::printf("%-4s %-12s value %.3e limit %.1e  %.2f s  %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.value,
                    r.limit, r.seconds, r.detail.c_str());
        std::fflush(stdout);
        results.push_back(std::move(r));
    };
    report(check_reflection(full ? 100000 : 10000, seed));
    report(full ? check_rasterizer(50, 64, 200, seed) : check_rasterizer(10, 32, 100, seed));
    report(full ? check_tracer(50, 1000, 5000, seed) : check_tracer(5, 200, 1000, seed));
    report(check_hybrid(full ? 10 : 3, full ? 32 : 24, seed));
    report(full ? check_gradients(50, 20, 32, 0, seed) : check_gradients(12, 8, 16, 40, seed));
    const bool ok = std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.pass; });
    std::printf("%s\n", ok ? "all checks passed" : "some checks failed");
    return ok ? 0 : 1;
}

struct BenchOptions {
    std::size_t frames = 0;
    int repeats = 3;
    std::size_t k = 16;
    std::string csv;
    bool train_step = true;
};

int run_bench(const fs::path& scene_path, const fs::path& cameras_path, const BenchOptions& o) {
    const Scene scene = load_scene(scene_path);
    std::vector<Frame> frames = load_cameras(cameras_path);
    if (o.frames > 0 && frames.size() > o.frames) frames.resize(o.frames);
    if (frames.empty()) throw std::invalid_argument("bench: no cameras");
    RenderSettings rs;
    rs.flip_normals = true;
    TraceSettings ts;
    ts.k = o.k;
    ts.epsilon = reflection_epsilon(scene);

    std::vector<std::string> order{"deform", "prepare", "rasterize", "bvh", "trace", "blend"};
    std::map<std::string, double> ms;
    std::size_t rendered = 0;
    double total = 0.0;
    for (int rep = 0; rep < o.repeats; ++rep)
        for (const Frame& f : frames) {
            const Camera& cam = f.camera;
            const auto start = std::chrono::steady_clock::now();
            auto t0 = start;
            const DeformedScene d = deform_scene(scene, cam.time);
            ms["deform"] += ms_since(t0);
            t0 = std::chrono::steady_clock::now();
            const auto geoms = prepare_splats(d.main, cam, scene.sh_degree);
            ms["prepare"] += ms_since(t0);
            t0 = std::chrono::steady_clock::now();
            const RenderBuffers b = render(geoms, cam, rs);
            ms["rasterize"] += ms_since(t0);
            t0 = std::chrono::steady_clock::now();
            const Bvh bvh = build_bvh(d.env, ts.cutoff);
            ms["bvh"] += ms_since(t0);
            t0 = std::chrono::steady_clock::now();
            std::vector<std::size_t> traced;
            std::vector<Vec3> origins, dirs;
            const Vec3 eye = cam.center();
            for (int y = 0; y < cam.height; ++y)
                for (int x = 0; x < cam.width; ++x) {
                    const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
                    if (!(b.accum[p] > rs.alpha_mask)) continue;
                    const Vec3 dir = cam.pixel_direction(x, y);
                    traced.push_back(p);
                    origins.push_back(eye + b.depth[p] * dir + ts.epsilon * b.normal[p]);
                    dirs.push_back(reflect(dir, b.normal[p]));
                }
            const TraceResult tr = trace_specular(origins, dirs, d.env, bvh, scene.sh_degree, ts);
            ms["trace"] += ms_since(t0);
            t0 = std::chrono::steady_clock::now();
            Image img = b.diffuse_image();
            for (std::size_t i = 0; i < traced.size(); ++i) {
                const std::size_t p = traced[i];
                const double a = b.alpha_spec[p];
                for (std::size_t c = 0; c < 3; ++c)
                    img.data[3 * p + c] = (1.0 - a) * img.data[3 * p + c] + a * tr.color[i][c];
            }
            ms["blend"] += ms_since(t0);
            total += ms_since(start);
            ++rendered;
        }

    if (o.train_step) {
        order.insert(order.end(), {"tape_forward", "tape_backward"});
        const Camera& cam = frames.front().camera;
        const Image gt = render_hybrid(scene, cam, rs, ts).image;
        PipelineOptions po;
        po.render = rs;
        po.trace = ts;
        const std::vector<double> x = flatten_parameters(scene);
        Tape tape;
        for (int rep = 0; rep < o.repeats; ++rep) {
            auto t0 = std::chrono::steady_clock::now();
            tape.clear();
            tape.branches().disable();
            std::vector<Var> params;
            params.reserve(x.size());
            for (double v : x) params.push_back(tape.variable(v));
            const Var loss = record_frame_loss(tape, params, scene, cam, gt, nullptr, po);
            ms["tape_forward"] += ms_since(t0);
            t0 = std::chrono::steady_clock::now();
            const Gradients g = tape.backward(loss);
            ms["tape_backward"] += ms_since(t0);
        }
    }

    std::ostringstream csv;
    csv << "stage,ms\n";
    for (const std::string& s : order) {
        const double n = s.starts_with("tape_") ? o.repeats : static_cast<double>(rendered);
        csv << s << "," << ms[s] / n << "\n";
    }
    const double per_frame = total / static_cast<double>(rendered);
    csv << "frame," << per_frame << "\n";
    std::cout << csv.str();
    std::printf("%.2f frames/s (%dx%d, %zu main, %zu env splats)\n", 1000.0 / per_frame, frames.front().camera.width,
                frames.front().camera.height, scene.main.size(), scene.env.size());
    if (!o.csv.empty()) write_text(o.csv, csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deformable splat scenes with traced specular reflections"};
    app.require_subcommand(1);

    fs::path spec_path, out_dir;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset from a spec file");
    synth->add_option("spec", spec_path, "Synthetic spec JSON")->required()->check(CLI::ExistingFile);
    synth->add_option("out_dir", out_dir, "Output directory")->required();

    fs::path config_path;
    auto* train_cmd = app.add_subcommand("train", "Train a scene and evaluate held-out frames");
    train_cmd->add_option("config", config_path, "Training config JSON")->required()->check(CLI::ExistingFile);

    fs::path scene_path, cameras_path, render_out;
    RenderOptions ro;
    auto* render_cmd = app.add_subcommand("render", "Render a scene for every camera in a camera file");
    render_cmd->add_option("scene", scene_path, "Scene JSON")->required()->check(CLI::ExistingFile);
    render_cmd->add_option("cameras", cameras_path, "Camera JSON")->required()->check(CLI::ExistingFile);
    render_cmd->add_option("out_dir", render_out, "Output directory")->required();
    render_cmd->add_flag("--buffers", ro.buffers, "Also write diffuse, depth, normal, alpha_spec and specular buffers");
    render_cmd->add_flag("--diffuse", ro.diffuse, "Write the diffuse buffer as the main image");
    render_cmd->add_option("--k", ro.k, "Hits per reflection ray")->check(CLI::PositiveNumber);
    render_cmd->add_option("--epsilon", ro.epsilon, "Reflection origin offset; 0 derives it from the scene");
    render_cmd->add_option("--background", ro.background, "Background rgb")->expected(3);
    render_cmd->add_flag("!--no-flip-normals", ro.flip_normals, "Keep splat normals as stored");

    fs::path renders_dir, gt_dir;
    std::string eval_json;
    auto* eval_cmd = app.add_subcommand("eval", "Score renders against ground truth (PSNR, SSIM)");
    eval_cmd->add_option("renders", renders_dir, "Directory of rendered images")->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("gt", gt_dir, "Directory of ground-truth images")->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--json", eval_json, "Write the JSON report here instead of stdout");

    bool full = false;
    std::uint64_t seed = 1;
    auto* check_cmd = app.add_subcommand("check", "Compare fast paths against reference implementations");
    check_cmd->add_flag("--full", full, "Use acceptance-sized workloads");
    check_cmd->add_option("--seed", seed, "Random seed");

    BenchOptions bo;
    fs::path bench_scene, bench_cameras;
    auto* bench_cmd = app.add_subcommand("bench", "Time each render stage and one training step");
    bench_cmd->add_option("scene", bench_scene, "Scene JSON")->required()->check(CLI::ExistingFile);
    bench_cmd->add_option("cameras", bench_cameras, "Camera JSON")->required()->check(CLI::ExistingFile);
    bench_cmd->add_option("--frames", bo.frames, "Limit the number of cameras");
    bench_cmd->add_option("--repeats", bo.repeats, "Passes over the cameras")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--k", bo.k, "Hits per reflection ray")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--csv", bo.csv, "Also write the stage table to this file");
    bench_cmd->add_flag("!--no-train", bo.train_step, "Skip timing the tape step");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*synth) return run_synth(spec_path, out_dir);
        if (*train_cmd) return run_train(config_path);
        if (*render_cmd) return run_render(scene_path, cameras_path, render_out, ro);
        if (*eval_cmd) return run_eval(renders_dir, gt_dir, eval_json);
        if (*check_cmd) return run_check(full, seed);
        if (*bench_cmd) return run_bench(bench_scene, bench_cameras, bo);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
