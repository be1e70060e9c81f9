// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; the exit code is nonzero if any run fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <set>
#include <string>

#include "specsplat/checks.hpp"
#include "specsplat/fixtures.hpp"
#include "specsplat/metrics.hpp"
#include "specsplat/synth.hpp"
#include "specsplat/trainer.hpp"

using namespace specsplat;
using namespace specsplat::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& what, double seconds, double budget) {
    const bool in_time = seconds < budget;
    const bool ok = pass && in_time;
    if (!ok) ++failures;
    std::printf("[%s] criterion %d: %s (%.1f s, budget %.0f s%s)\n", ok ? "PASS" : "FAIL", id, what.c_str(), seconds,
                budget, in_time ? "" : ", over budget");
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

void run_check(int id, const CheckResult& r, double budget) {
    report(id, r.pass, r.name + " max error " + fmt("%.3e", r.value) + " < " + fmt("%.0e", r.limit) + "; " + r.detail,
           r.seconds, budget);
}

// ---- independent metric implementations -------------------------------------

double naive_psnr(const Image& a, const Image& b) {
    long double se = 0.0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x)
            for (int c = 0; c < a.channels; ++c) {
                const long double d = static_cast<long double>(a.at(x, y, c)) - b.at(x, y, c);
                se += d * d;
            }
    const long double m = se / (static_cast<long double>(a.width) * a.height * a.channels);
    if (m == 0.0L) return kPsnrCap;
    return std::min(kPsnrCap, static_cast<double>(-10.0L * std::log10(m)));
}

double naive_ssim(const Image& a, const Image& b) {
    constexpr int n = 11;
    constexpr double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
    double w[n][n];
    double wsum = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) wsum += w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
    double total = 0.0;
    int windows = 0;
    for (int c = 0; c < a.channels; ++c)
        for (int y0 = 0; y0 + n <= a.height; ++y0)
            for (int x0 = 0; x0 + n <= a.width; ++x0) {
                double ma = 0, mb = 0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        ma += w[i][j] / wsum * a.at(x0 + j, y0 + i, c);
                        mb += w[i][j] / wsum * b.at(x0 + j, y0 + i, c);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double da = a.at(x0 + j, y0 + i, c) - ma, db = b.at(x0 + j, y0 + i, c) - mb;
                        va += w[i][j] / wsum * da * da;
                        vb += w[i][j] / wsum * db * db;
                        cov += w[i][j] / wsum * da * db;
                    }
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++windows;
            }
    return total / windows;
}

void criterion_metrics() {
    const auto t0 = Clock::now();
    Rng rng(91);
    double worst_psnr = 0.0, worst_ssim = 0.0;
    bool identity = true;
    for (int k = 0; k < 100; ++k) {
        const int w = 11 + static_cast<int>(uniform(rng, 0, 30)), h = 11 + static_cast<int>(uniform(rng, 0, 30));
        Image a(w, h, 3), b(w, h, 3);
        const double noise = uniform(rng, 0.001, 0.3);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            a.data[i] = uniform(rng, 0, 1);
            b.data[i] = std::clamp(a.data[i] + uniform(rng, -noise, noise), 0.0, 1.0);
        }
        worst_psnr = std::max(worst_psnr, std::abs(psnr(a, b) - naive_psnr(a, b)));
        worst_ssim = std::max(worst_ssim, std::abs(ssim(a, b) - naive_ssim(a, b)));
        identity = identity && psnr(a, a) == kPsnrCap && ssim(a, a) == 1.0;
    }
    report(9, identity && worst_psnr < 1e-9 && worst_ssim < 1e-9,
           "psnr(x,x) = cap and ssim(x,x) = 1 " + std::string(identity ? "exactly" : "VIOLATED") +
               "; max |psnr - naive| " + fmt("%.2e", worst_psnr) + ", max |ssim - naive| " + fmt("%.2e", worst_ssim),
           seconds_since(t0), 60.0);
}

// ---- schedule and freezing ----------------------------------------------------

void criterion_schedule() {
    const auto t0 = Clock::now();
    const PhaseSchedule full_size;
    const bool bounds = full_size.total_steps == 60000 && full_size.diffuse_boundary() == 9000 &&
                        full_size.specular_boundary() == 15000 && phase_of(8999, full_size) == Phase::Diffuse &&
                        phase_of(9000, full_size) == Phase::Specular && phase_of(14999, full_size) == Phase::Specular &&
                        phase_of(15000, full_size) == Phase::Joint;

    SyntheticSpec spec;
    spec.frames = 8;
    spec.width = spec.height = 32;
    spec.env_count = 80;
    spec.seed = 5;
    const fs::path dir = fs::temp_directory_path() / "specsplat_acceptance_smoke";
    fs::remove_all(dir);
    const Dataset ds = generate_synthetic(spec, dir);
    TrainConfig config;
    config.schedule.total_steps = 300;
    config.prune_interval = 100;
    config.seed = 3;
    std::size_t steps = 0, violations = 0, phases_seen = 0;
    Phase last = Phase::Joint;
    train(load_training_data(ds), load_scene(ds.resolve(ds.scene)), config,
          [&](const StepRecord& r, std::span<const double> before, std::span<const double> after,
              const ParamLayout& layout) {
              ++steps;
              if (steps == 1 || r.phase != last) ++phases_seen;
              last = r.phase;
              const GroupMask mask = trainable_groups(r.phase);
              for (std::size_t i = 0; i < before.size(); ++i)
                  if (!mask[static_cast<std::size_t>(layout.group(i))] &&
                      std::memcmp(&before[i], &after[i], sizeof(double)) != 0)
                      ++violations;
          });
    fs::remove_all(dir);
    report(6, bounds && steps == 300 && violations == 0 && phases_seen == 3,
           std::string("60k steps -> boundaries ") + std::to_string(full_size.diffuse_boundary()) + "/" +
               std::to_string(full_size.specular_boundary()) + "; 300-step run, " + std::to_string(violations) +
               " frozen-parameter changes",
           seconds_since(t0), 600.0);
}

// ---- end-to-end training ----------------------------------------------------

struct Run {
    double psnr = 0.0;
    double normal_error = 0.0;
    double seconds = 0.0;
};

struct MirrorData {
    TrainingData data;
    Scene init;
    double seconds = 0.0;
};

MirrorData mirror_data() {
    const auto t0 = Clock::now();
    SyntheticSpec spec;
    spec.kind = SyntheticKind::MovingMirror;
    spec.frames = 32;
    spec.width = spec.height = 96;
    spec.motion_cycles = 3.0;
    const fs::path dir = fs::temp_directory_path() / "specsplat_acceptance_mirror";
    fs::remove_all(dir);
    const Dataset ds = generate_synthetic(spec, dir);
    MirrorData m{load_training_data(ds), load_scene(ds.resolve(ds.scene)), 0.0};
    fs::remove_all(dir);
    m.seconds = seconds_since(t0);
    return m;
}

TrainConfig mirror_config() {
    TrainConfig c;
    c.schedule.total_steps = 6000;
    c.patch = 48;
    c.seed = 1;
    return c;
}

Run train_and_score(const MirrorData& m, const TrainConfig& c) {
    const auto t0 = Clock::now();
    const TrainResult r = train(m.data, m.init, c);
    RenderSettings rs = c.render;
    rs.background = m.data.background;
    TraceSettings ts = c.trace;
    ts.epsilon = reflection_epsilon(m.init);
    const auto frames = test_frames(m.data.cameras.size());
    Run run;
    run.psnr = evaluate_frames(r.scene, m.data, frames, rs, ts, c.specular).mean_psnr;
    run.normal_error = normal_error_deg(r.scene, m.data, frames, rs);
    run.seconds = seconds_since(t0);
    std::printf("  %s: held-out psnr %.3f dB, normal error %.2f deg (%.1f s)\n",
                !c.specular ? "diffuse-only" : (c.weights.lambda_norm == 0.0 ? "no normal losses" : "full"), run.psnr,
                run.normal_error, run.seconds);
    std::fflush(stdout);
    return run;
}

void criteria_training(bool want7, bool want8) {
    const MirrorData m = mirror_data();
    const Run full = train_and_score(m, mirror_config());
    if (want7) {
        TrainConfig c = mirror_config();
        c.specular = false;
        const Run diffuse = train_and_score(m, c);
        const double gap = full.psnr - diffuse.psnr;
        report(7, gap >= 2.0,
               "moving_mirror held-out psnr " + fmt("%.2f", full.psnr) + " dB vs diffuse-only " +
                   fmt("%.2f", diffuse.psnr) + " dB, gap " + fmt("%.2f", gap) + " dB >= 2",
               m.seconds + full.seconds + diffuse.seconds, 1200.0);
    }
    if (want8) {
        TrainConfig c = mirror_config();
        c.weights.lambda_norm = 0.0;
        c.weights.lambda_tc = 0.0;
        const Run plain = train_and_score(m, c);
        const double reduction = 1.0 - full.normal_error / plain.normal_error;
        report(8, reduction >= 0.2,
               "normal angular error " + fmt("%.2f", full.normal_error) + " deg with normal losses vs " +
                   fmt("%.2f", plain.normal_error) + " deg without, reduction " + fmt("%.1f%%", 100.0 * reduction) +
                   " >= 20%",
               m.seconds + full.seconds + plain.seconds, 1500.0);
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
    auto want = [&](int id) { return only.empty() || only.count(id) > 0; };
    try {
        if (want(1))
            std::printf("[NOTE] criterion 1: full-size real datasets and 60k-step schedules are out of reach here; "
                        "criteria 7 and 8 use a small synthetic scene instead\n");
        if (want(2)) run_check(2, check_reflection(100000, 2), 1.0);
        if (want(3)) run_check(3, check_rasterizer(50, 64, 200, 3), 120.0);
        if (want(4)) run_check(4, check_tracer(50, 1000, 5000, 4), 120.0);
        if (want(5)) run_check(5, check_gradients(50, 20, 32, 0, 5), 600.0);
        if (want(6)) criterion_schedule();
        if (want(7) || want(8)) criteria_training(want(7), want(8));
        if (want(9)) criterion_metrics();
    } catch (const std::exception& e) {
        std::printf("[FAIL] aborted: %s\n", e.what());
        return 2;
    }
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
