#pragma once

// Image quality metrics and directory-level evaluation reports.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "specsplat/scene.hpp"

namespace specsplat {

/// Reported for identical images instead of infinity.
inline constexpr double kPsnrCap = 99.0;

/// Mean squared error over pixels and channels. Throws on shape mismatch.
double mse(const Image& a, const Image& b);
/// 10 log10(1 / mse) for [0, 1] images, capped at kPsnrCap.
double psnr(const Image& a, const Image& b);

/// Mean angle in degrees between unit normals over masked pixels.
double mean_angular_error_deg(std::span<const Vec3> a, std::span<const Vec3> b, std::span<const std::uint8_t> mask);

struct FrameEval {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
    double ms = 0.0;
};

struct EvalReport {
    std::vector<FrameEval> frames;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double ms_per_frame = 0.0;

    /// Recomputes the means from `frames`.
    void finalize();
    std::string to_json() const;
    std::string to_table() const;
};

EvalReport evaluate_images(const std::vector<std::pair<std::string, std::pair<Image, Image>>>& pairs);

/// Pairs image files (.ppm / .pfm) by file name across the two directories.
/// Throws if a rendered file has no ground-truth counterpart or none match.
EvalReport evaluate_directories(const std::filesystem::path& renders, const std::filesystem::path& gt);

}  // namespace specsplat
