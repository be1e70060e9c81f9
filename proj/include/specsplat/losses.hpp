#pragma once

// Training objectives over plain buffers and, for training, over tape
// variables. Both forms share masks and reduction order so they agree to
// rounding.

#include <cstdint>
#include <span>
#include <vector>

#include "specsplat/autodiff.hpp"
#include "specsplat/rasterizer.hpp"
#include "specsplat/scene.hpp"

namespace specsplat {

enum class Phase { Diffuse, Specular, Joint };

const char* phase_name(Phase p);

struct LossWeights {
    double lambda_ssim = 0.2;
    double lambda_norm = 0.05;
    double lambda_tc = 0.05;
};

struct LossReport {
    double total = 0.0;
    double photometric = 0.0;
    /// (1 - ssim) / 2
    double ssim_term = 0.0;
    double l_norm = 0.0;
    double l_tcnorm = 0.0;
    std::size_t photometric_count = 0;
    std::size_t norm_count = 0;
    std::size_t tc_count = 0;
};

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
/// Normal losses only see pixels whose accumulated alpha exceeds this.
inline constexpr double kNormalLossAlpha = 0.5;

/// Mean absolute error over pixels and channels.
double photometric(const Image& pred, const Image& gt);

/// Normalized 11x11 Gaussian window, row-major.
const std::array<double, kSsimWindow * kSsimWindow>& ssim_window();

/// Mean SSIM over every full window position and channel. Images must be at
/// least 11x11.
double ssim(const Image& a, const Image& b);

/// Mean of 1 - n.t over masked pixels; 0 when the mask is empty.
double normal_consistency(std::span<const Vec3> n, std::span<const Vec3> target, std::span<const std::uint8_t> mask);
double tc_normal(std::span<const Vec3> n, std::span<const Vec3> external, std::span<const std::uint8_t> mask);

/// Pixels where accumulated alpha exceeds the normal-loss threshold at the
/// pixel and at every depth neighbor its pseudo normal reads, and the pseudo
/// normal is defined.
std::vector<std::uint8_t> pseudo_normal_mask(std::span<const double> accum, std::span<const std::uint8_t> pseudo_valid,
                                             int width, int height);
/// Pixels with enough alpha and a valid external normal.
std::vector<std::uint8_t> external_normal_mask(std::span<const double> accum, const NormalMap& external);

/// Phase-gated objective. The supervised image is the diffuse buffer in the
/// diffuse phase and `hybrid` otherwise.
LossReport total_loss(const RenderBuffers& buffers, const Image* hybrid, const Camera& camera, const Image& gt,
                      const NormalMap* external, const LossWeights& weights, Phase phase);

// ---- tape forms ----------------------------------------------------------------

/// `pred` is interleaved rgb, row-major.
Var photometric(Tape& tape, std::span<const Var> pred, const Image& gt);
/// One fused op over the whole image.
Var ssim(Tape& tape, std::span<const Var> pred, const Image& gt);
Var normal_consistency(Tape& tape, std::span<const Var3> n, std::span<const Var3> target,
                       std::span<const std::uint8_t> mask);
Var tc_normal(Tape& tape, std::span<const Var3> n, std::span<const Vec3> external, std::span<const std::uint8_t> mask);

/// Back-projected pseudo normals from a depth map on the tape. Only pixels
/// set in `want` are produced; the rest are zero constants.
std::vector<Var3> pseudo_normals_from_depth(Tape& tape, std::span<const Var> depth, const Camera& camera,
                                            std::span<const std::uint8_t> want);

}  // namespace specsplat
