#include "specsplat/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "specsplat/losses.hpp"

namespace specsplat {

namespace {

void check_same_shape(const Image& a, const Image& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels || a.data.size() != b.data.size())
        throw std::invalid_argument(std::string(what) + ": image shapes differ");
    if (a.data.empty()) throw std::invalid_argument(std::string(what) + ": empty image");
}

}  // namespace

double mse(const Image& a, const Image& b) {
    check_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double mean_angular_error_deg(std::span<const Vec3> a, std::span<const Vec3> b, std::span<const std::uint8_t> mask) {
    if (a.size() != b.size() || a.size() != mask.size()) throw std::invalid_argument("mean_angular_error_deg: size mismatch");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!mask[i]) continue;
        s += std::acos(std::clamp(dot(a[i], b[i]), -1.0, 1.0)) * 180.0 / std::numbers::pi;
        ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

void EvalReport::finalize() {
    mean_psnr = mean_ssim = ms_per_frame = 0.0;
    if (frames.empty()) return;
    for (const FrameEval& f : frames) {
        mean_psnr += f.psnr;
        mean_ssim += f.ssim;
        ms_per_frame += f.ms;
    }
    const double n = static_cast<double>(frames.size());
    mean_psnr /= n;
    mean_ssim /= n;
    ms_per_frame /= n;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["frames"] = nlohmann::ordered_json::array();
    for (const FrameEval& f : frames)
        j["frames"].push_back({{"name", f.name}, {"psnr", f.psnr}, {"ssim", f.ssim}, {"ms", f.ms}});
    j["mean_psnr"] = mean_psnr;
    j["mean_ssim"] = mean_ssim;
    j["ms_per_frame"] = ms_per_frame;
    return j.dump(1);
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-28s %10s %10s %10s\n", "frame", "psnr_db", "ssim", "ms");
    os << line;
    for (const FrameEval& f : frames) {
        std::snprintf(line, sizeof line, "%-28s %10.4f %10.6f %10.2f\n", f.name.c_str(), f.psnr, f.ssim, f.ms);
        os << line;
    }
    std::snprintf(line, sizeof line, "%-28s %10.4f %10.6f %10.2f\n", "mean", mean_psnr, mean_ssim, ms_per_frame);
    os << line;
    return os.str();
}

EvalReport evaluate_images(const std::vector<std::pair<std::string, std::pair<Image, Image>>>& pairs) {
    EvalReport r;
    for (const auto& [name, p] : pairs) {
        const auto t0 = std::chrono::steady_clock::now();
        FrameEval f;
        f.name = name;
        f.psnr = psnr(p.first, p.second);
        f.ssim = ssim(p.first, p.second);
        f.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        r.frames.push_back(f);
    }
    r.finalize();
    return r;
}

EvalReport evaluate_directories(const std::filesystem::path& renders, const std::filesystem::path& gt) {
    namespace fs = std::filesystem;
    for (const auto& d : {renders, gt})
        if (!fs::is_directory(d)) throw std::invalid_argument("evaluate_directories: not a directory: " + d.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(renders)) {
        const auto ext = e.path().extension();
        if (e.is_regular_file() && (ext == ".ppm" || ext == ".pfm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::invalid_argument("evaluate_directories: no images in " + renders.string());
    std::vector<std::pair<std::string, std::pair<Image, Image>>> pairs;
    for (const auto& f : files) {
        const fs::path g = gt / f.filename();
        if (!fs::exists(g)) throw std::invalid_argument("evaluate_directories: no ground truth for " + f.filename().string());
        Image a = load_image(f);
        Image b = load_image(g, a.width, a.height);
        pairs.push_back({f.filename().string(), {std::move(a), std::move(b)}});
    }
    return evaluate_images(pairs);
}

}  // namespace specsplat
