#include "specsplat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace specsplat {

void PhaseSchedule::validate() const {
    if (!(diffuse_end > 0.0 && diffuse_end < specular_end && specular_end < 1.0))
        throw std::invalid_argument("PhaseSchedule: need 0 < diffuse_end < specular_end < 1");
}

namespace {

std::size_t boundary(std::size_t total, double fraction) {
    // The tolerance keeps decimal fractions like 0.1 from rounding up past an exact product.
    const double x = static_cast<double>(total) * fraction;
    return static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
}

}  // namespace

std::size_t PhaseSchedule::diffuse_boundary() const { return boundary(total_steps, diffuse_end); }
std::size_t PhaseSchedule::specular_boundary() const { return boundary(total_steps, specular_end); }

Phase phase_of(std::size_t step, const PhaseSchedule& schedule) {
    if (step < schedule.diffuse_boundary()) return Phase::Diffuse;
    if (step < schedule.specular_boundary()) return Phase::Specular;
    return Phase::Joint;
}

GroupMask trainable_groups(Phase phase, bool tint_in_diffuse) {
    GroupMask m{};
    auto set = [&](ParamGroup g) { m[static_cast<std::size_t>(g)] = true; };
    switch (phase) {
        case Phase::Diffuse:
            for (auto g : {ParamGroup::MainPosition, ParamGroup::MainRotation, ParamGroup::MainScale,
                           ParamGroup::MainOpacity, ParamGroup::MainSh, ParamGroup::MainField})
                set(g);
            if (tint_in_diffuse) set(ParamGroup::MainTint);
            break;
        case Phase::Specular:
            for (auto g : {ParamGroup::EnvSplats, ParamGroup::EnvField, ParamGroup::MainTint}) set(g);
            break;
        case Phase::Joint: m.fill(true); break;
    }
    return m;
}

double LearningRates::of(ParamGroup g) const {
    switch (g) {
        case ParamGroup::MainPosition: return position;
        case ParamGroup::MainRotation: return rotation;
        case ParamGroup::MainScale: return scale;
        case ParamGroup::MainOpacity: return opacity;
        case ParamGroup::MainSh: return sh;
        case ParamGroup::MainTint: return tint;
        case ParamGroup::EnvSplats: return env;
        case ParamGroup::MainField:
        case ParamGroup::EnvField: return field;
    }
    return 0.0;
}

void LearningRates::validate() const {
    for (double r : {position, rotation, scale, opacity, sh, tint, env, field})
        if (!(r > 0.0)) throw std::invalid_argument("LearningRates: every rate must be positive");
}

void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const LearningRates& rates, const AdamConfig& adam, const GroupMask& mask,
                    const ParamLayout& layout) {
    const std::size_t n = params.size();
    if (grads.size() != n || n != layout.total()) throw std::invalid_argument("optimizer_step: size mismatch");
    state.resize(n);
    std::array<double, kParamGroupCount> lr{}, c1{}, c2{};
    for (std::size_t g = 0; g < kParamGroupCount; ++g) {
        if (!mask[g]) continue;
        const std::uint64_t t = ++state.steps[g];
        lr[g] = rates.of(static_cast<ParamGroup>(g));
        c1[g] = 1.0 - std::pow(adam.beta1, static_cast<double>(t));
        c2[g] = 1.0 - std::pow(adam.beta2, static_cast<double>(t));
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto g = static_cast<std::size_t>(layout.group(i));
        if (!mask[g]) continue;
        const double gr = grads[i];
        state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * gr;
        state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * gr * gr;
        const double mh = state.m[i] / c1[g], vh = state.v[i] / c2[g];
        params[i] -= lr[g] * mh / (std::sqrt(vh) + adam.eps);
    }
    for (std::size_t q : layout.quaternion_offsets()) {
        if (!mask[static_cast<std::size_t>(layout.group(q))]) continue;
        double n2 = 0.0;
        for (std::size_t k = 0; k < 4; ++k) n2 += params[q + k] * params[q + k];
        const double nn = std::sqrt(n2);
        if (nn < 1e-12) {
            params[q] = 1.0;
            params[q + 1] = params[q + 2] = params[q + 3] = 0.0;
            continue;
        }
        for (std::size_t k = 0; k < 4; ++k) params[q + k] /= nn;
    }
}

namespace {

/// Indices to keep: drops those below threshold, lowest first, until `min_count` remain.
template <class S>
std::vector<std::size_t> survivors(const std::vector<S>& splats, double threshold, std::size_t min_count) {
    std::vector<std::size_t> order(splats.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return splats[a].opacity_logit < splats[b].opacity_logit; });
    std::vector<std::uint8_t> keep(splats.size(), 1);
    std::size_t remaining = splats.size();
    for (std::size_t i : order) {
        if (remaining <= min_count || !(sigmoid(splats[i].opacity_logit) < threshold)) break;
        keep[i] = 0;
        --remaining;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splats.size(); ++i)
        if (keep[i]) out.push_back(i);
    return out;
}

}  // namespace

PruneResult prune(Scene& scene, double threshold, std::size_t min_count, OptimizerState* state) {
    const ParamLayout before = ParamLayout::of(scene);
    const auto keep_main = survivors(scene.main, threshold, min_count);
    const auto keep_env = survivors(scene.env, threshold, min_count);
    PruneResult r{scene.main.size() - keep_main.size(), scene.env.size() - keep_env.size()};
    if (r.removed_main == 0 && r.removed_env == 0) return r;

    if (state) {
        state->resize(before.total());
        OptimizerState next;
        next.steps = state->steps;
        auto copy_rows = [&](std::size_t from, std::size_t stride) {
            for (std::size_t k = 0; k < stride; ++k) {
                next.m.push_back(state->m[from + k]);
                next.v.push_back(state->v[from + k]);
            }
        };
        for (std::size_t i : keep_main) copy_rows(i * kMainStride, kMainStride);
        for (std::size_t i : keep_env) copy_rows(before.env_offset() + i * kEnvStride, kEnvStride);
        copy_rows(before.main_field_offset(), before.main_field + before.env_field);
        *state = std::move(next);
    }
    std::vector<SplatPrimitive> main;
    for (std::size_t i : keep_main) main.push_back(scene.main[i]);
    std::vector<EnvSplat> env;
    for (std::size_t i : keep_env) env.push_back(scene.env[i]);
    scene.main = std::move(main);
    scene.env = std::move(env);
    return r;
}

void TrainConfig::validate() const {
    schedule.validate();
    rates.validate();
    if (!(prune_threshold >= 0.0 && prune_threshold < 1.0)) throw std::invalid_argument("TrainConfig: prune_threshold must be in [0, 1)");
    if (trace.k < 1) throw std::invalid_argument("TrainConfig: k must be at least 1");
    if (patch != 0 && patch < kSsimWindow) throw std::invalid_argument("TrainConfig: patch must be 0 or at least 11");
    for (double w : {weights.lambda_ssim, weights.lambda_norm, weights.lambda_tc})
        if (!(w >= 0.0)) throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
}

TrainingData load_training_data(const Dataset& dataset) {
    TrainingData d;
    d.background = dataset.background;
    for (const Frame& f : dataset.frames) {
        d.cameras.push_back(f.camera);
        d.images.push_back(load_image(dataset.resolve(f.image), f.camera.width, f.camera.height));
        if (f.normal_map) {
            NormalMap n = load_normal_map(dataset.resolve(*f.normal_map));
            if (n.width != f.camera.width || n.height != f.camera.height)
                throw ValidationError("normal map " + *f.normal_map + " does not match the camera resolution");
            d.normals.push_back(std::move(n));
        } else {
            d.normals.push_back(std::nullopt);
        }
    }
    return d;
}

std::string csv_header() { return "step,phase,total,photometric,ssim_term,l_norm,l_tcnorm,n_main,n_env,wall_ms"; }

std::string csv_row(const StepRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.10g,%.10g,%.10g,%zu,%zu,%.3f", r.step, phase_name(r.phase),
                  r.loss.total, r.loss.photometric, r.loss.ssim_term, r.loss.l_norm, r.loss.l_tcnorm, r.n_main,
                  r.n_env, r.wall_ms);
    return buf;
}

std::uint64_t parameter_checksum(std::span<const double> x) {
    std::uint64_t h = 1469598103934665603ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(x.data());
    for (std::size_t i = 0; i < x.size_bytes(); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

Camera crop_camera(const Camera& c, int x0, int y0, int size) {
    Camera out = c;
    out.width = size;
    out.height = size;
    out.cx = c.cx - x0;
    out.cy = c.cy - y0;
    return out;
}

Image crop_image(const Image& img, int x0, int y0, int size) {
    Image out(size, size, img.channels);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int ch = 0; ch < img.channels; ++ch) out.at(x, y, ch) = img.at(x0 + x, y0 + y, ch);
    return out;
}

NormalMap crop_normals(const NormalMap& n, int x0, int y0, int size) {
    NormalMap out;
    out.width = out.height = size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const std::size_t p = static_cast<std::size_t>(y0 + y) * n.width + (x0 + x);
            out.normals.push_back(n.normals[p]);
            out.valid.push_back(n.valid[p]);
        }
    return out;
}

const char* first_bad_term(const LossReport& r) {
    if (!std::isfinite(r.photometric)) return "photometric";
    if (!std::isfinite(r.ssim_term)) return "ssim_term";
    if (!std::isfinite(r.l_norm)) return "l_norm";
    if (!std::isfinite(r.l_tcnorm)) return "l_tcnorm";
    return "total";
}

}  // namespace

TrainResult train(const TrainingData& data, Scene scene, const TrainConfig& config, const StepObserver& observer) {
    config.validate();
    validate_scene(scene);
    const std::size_t n_frames = data.cameras.size();
    if (data.images.size() != n_frames || data.normals.size() != n_frames)
        throw std::invalid_argument("train: inconsistent training data");
    std::vector<std::size_t> frames = config.frames.empty() ? train_frames(n_frames) : config.frames;
    for (std::size_t f : frames)
        if (f >= n_frames) throw std::invalid_argument("train: frame index out of range");
    if (frames.empty() && config.schedule.total_steps > 0) throw std::invalid_argument("train: no training frames");

    PipelineOptions opt;
    opt.render = config.render;
    opt.render.background = data.background;
    opt.trace = config.trace;
    if (!(opt.trace.epsilon > 0.0)) opt.trace.epsilon = reflection_epsilon(scene);
    opt.weights = config.weights;
    opt.specular = config.specular;

    std::ofstream csv;
    if (!config.out_dir.empty()) {
        std::filesystem::create_directories(config.out_dir);
        csv.open(config.out_dir / "train_log.csv");
        if (!csv) throw std::runtime_error("train: cannot write " + (config.out_dir / "train_log.csv").string());
        csv << csv_header() << "\n";
    }

    std::mt19937_64 rng(config.seed);
    OptimizerState state;
    TrainResult result;
    Tape tape;
    std::vector<double> x = flatten_parameters(scene);
    std::vector<double> before;
    std::vector<Var> params;
    std::vector<double> grads;

    for (std::size_t step = 0; step < config.schedule.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const Phase phase = phase_of(step, config.schedule);
        opt.phase = phase;
        const std::size_t frame = frames[std::uniform_int_distribution<std::size_t>(0, frames.size() - 1)(rng)];
        Camera cam = data.cameras[frame];
        const Image* gt = &data.images[frame];
        const NormalMap* ext = data.normals[frame] ? &*data.normals[frame] : nullptr;
        Image gt_crop;
        NormalMap ext_crop;
        if (config.patch > 0 && (config.patch < cam.width || config.patch < cam.height)) {
            const int size = std::min({config.patch, cam.width, cam.height});
            const int x0 = std::uniform_int_distribution<int>(0, cam.width - size)(rng);
            const int y0 = std::uniform_int_distribution<int>(0, cam.height - size)(rng);
            gt_crop = crop_image(*gt, x0, y0, size);
            gt = &gt_crop;
            if (ext) {
                ext_crop = crop_normals(*ext, x0, y0, size);
                ext = &ext_crop;
            }
            cam = crop_camera(cam, x0, y0, size);
        }

        const ParamLayout layout = ParamLayout::of(scene);
        tape.clear();
        tape.branches().disable();
        params.clear();
        for (double v : x) params.push_back(tape.variable(v));
        StepRecord rec;
        rec.step = step;
        rec.phase = phase;
        rec.frame = frame;
        const Var loss = record_frame_loss(tape, params, scene, cam, *gt, ext, opt, &rec.loss);
        if (!std::isfinite(rec.loss.total))
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + ", frame " +
                                     std::to_string(frame) + ", term " + first_bad_term(rec.loss));
        const Gradients g = tape.backward(loss);
        grads.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) grads[i] = g[params[i]];
        if (observer) before = x;
        optimizer_step(x, grads, state, config.rates, config.adam, trainable_groups(phase, config.tint_in_diffuse),
                       layout);
        unflatten_parameters(x, scene);

        rec.n_main = scene.main.size();
        rec.n_env = scene.env.size();
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (observer) observer(rec, before, x, layout);

        if (config.prune_interval > 0 && (step + 1) % config.prune_interval == 0 && step + 1 < config.schedule.total_steps) {
            const PruneResult pr = prune(scene, config.prune_threshold, config.prune_min_count, &state);
            if (pr.removed_main + pr.removed_env > 0) x = flatten_parameters(scene);
            rec.n_main = scene.main.size();
            rec.n_env = scene.env.size();
        }
        if (csv) csv << csv_row(rec) << "\n";
        if (config.checkpoint_interval > 0 && !config.out_dir.empty() && (step + 1) % config.checkpoint_interval == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint_%06zu.json", step + 1);
            save_scene(scene, config.out_dir / name);
        }
        result.log.push_back(rec);
    }
    if (!config.out_dir.empty()) save_scene(scene, config.out_dir / "final_scene.json");
    result.scene = std::move(scene);
    return result;
}

std::vector<std::size_t> test_frames(std::size_t frame_count) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < frame_count; ++i)
        if (frame_count < 2 || i % 8 == 0) out.push_back(i);
    return out;
}

std::vector<std::size_t> train_frames(std::size_t frame_count) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < frame_count; ++i)
        if (frame_count < 2 || i % 8 != 0) out.push_back(i);
    return out;
}

EvalReport evaluate_frames(const Scene& scene, const TrainingData& data, std::span<const std::size_t> frames,
                           const RenderSettings& rs, const TraceSettings& ts, bool specular,
                           const std::filesystem::path& out_dir) {
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    EvalReport report;
    for (std::size_t f : frames) {
        if (f >= data.cameras.size()) throw std::invalid_argument("evaluate_frames: frame index out of range");
        const auto t0 = std::chrono::steady_clock::now();
        const HybridRender h = render_hybrid(scene, data.cameras[f], rs, ts);
        const Image img = specular ? h.image : h.buffers.diffuse_image();
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        char name[32];
        std::snprintf(name, sizeof name, "%03zu.pfm", f);
        if (!out_dir.empty()) save_image(img, out_dir / name);
        report.frames.push_back({name, psnr(img, data.images[f]), ssim(img, data.images[f]), ms});
    }
    report.finalize();
    return report;
}

double normal_error_deg(const Scene& scene, const TrainingData& data, std::span<const std::size_t> frames,
                        const RenderSettings& rs) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t f : frames) {
        if (!data.normals.at(f)) throw std::invalid_argument("normal_error_deg: frame has no normal map");
        const NormalMap& gt = *data.normals[f];
        const DeformedScene d = deform_scene(scene, data.cameras[f].time);
        const RenderBuffers b = render(d.main, data.cameras[f], scene.sh_degree, rs);
        const std::size_t n = static_cast<std::size_t>(std::count(gt.valid.begin(), gt.valid.end(), 1));
        sum += mean_angular_error_deg(b.normal, gt.normals, gt.valid) * static_cast<double>(n);
        count += n;
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

namespace {

using json = nlohmann::json;

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text, std::span<const std::string> extra_keys) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("train config: ") + e.what(), 0, e.byte);
    }
    if (!j.is_object()) throw ParseError("train config: expected an object");
    static const std::set<std::string> known{
        "steps", "diffuse_end", "specular_end", "lr", "adam", "prune_threshold", "prune_interval",
        "prune_min_count", "seed", "checkpoint_interval", "out_dir", "lambda_ssim", "lambda_norm", "lambda_tc",
        "k", "epsilon", "early_stop", "specular", "tint_in_diffuse", "patch", "frames", "workers", "flip_normals"};
    for (const auto& [key, value] : j.items())
        if (!known.contains(key) && std::find(extra_keys.begin(), extra_keys.end(), key) == extra_keys.end())
            throw ParseError("train config: unknown key '" + key + "'");
    TrainConfig c;
    try {
        take(j, "steps", c.schedule.total_steps);
        take(j, "diffuse_end", c.schedule.diffuse_end);
        take(j, "specular_end", c.schedule.specular_end);
        if (j.contains("lr")) {
            const json& lr = j.at("lr");
            take(lr, "position", c.rates.position);
            take(lr, "rotation", c.rates.rotation);
            take(lr, "scale", c.rates.scale);
            take(lr, "opacity", c.rates.opacity);
            take(lr, "sh", c.rates.sh);
            take(lr, "tint", c.rates.tint);
            take(lr, "env", c.rates.env);
            take(lr, "field", c.rates.field);
        }
        if (j.contains("adam")) {
            take(j.at("adam"), "beta1", c.adam.beta1);
            take(j.at("adam"), "beta2", c.adam.beta2);
            take(j.at("adam"), "eps", c.adam.eps);
        }
        take(j, "prune_threshold", c.prune_threshold);
        take(j, "prune_interval", c.prune_interval);
        take(j, "prune_min_count", c.prune_min_count);
        take(j, "seed", c.seed);
        take(j, "checkpoint_interval", c.checkpoint_interval);
        if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
        take(j, "lambda_ssim", c.weights.lambda_ssim);
        take(j, "lambda_norm", c.weights.lambda_norm);
        take(j, "lambda_tc", c.weights.lambda_tc);
        take(j, "k", c.trace.k);
        take(j, "epsilon", c.trace.epsilon);
        if (j.contains("early_stop")) {
            c.render.early_stop = j.at("early_stop").get<double>();
            c.trace.early_stop = c.render.early_stop;
        }
        take(j, "specular", c.specular);
        take(j, "tint_in_diffuse", c.tint_in_diffuse);
        take(j, "patch", c.patch);
        take(j, "flip_normals", c.render.flip_normals);
        take(j, "frames", c.frames);
        if (j.contains("workers")) c.render.workers = c.trace.workers = j.at("workers").get<unsigned>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace specsplat
