#pragma once

// The hybrid renderer (rasterized diffuse + traced specular) in two forms:
// plain doubles for inference and reference checks, and on the autodiff tape
// for training. Also the flat parameter layout shared by the optimizer.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "specsplat/autodiff.hpp"
#include "specsplat/env_tracer.hpp"
#include "specsplat/losses.hpp"
#include "specsplat/rasterizer.hpp"
#include "specsplat/scene.hpp"

namespace specsplat {

/// center 3, rotation 4, log_scale 2, opacity 1, tint 1, sh 27
inline constexpr std::size_t kMainStride = 38;
/// center 3, rotation 4, log_scale 2, opacity 1, sh 27
inline constexpr std::size_t kEnvStride = 37;

enum class ParamGroup : std::uint8_t {
    MainPosition,
    MainRotation,
    MainScale,
    MainOpacity,
    MainSh,
    MainTint,
    EnvSplats,
    MainField,
    EnvField,
};
inline constexpr std::size_t kParamGroupCount = 9;
const char* group_name(ParamGroup g);

struct ParamLayout {
    std::size_t n_main = 0, n_env = 0;
    std::size_t main_field = 0, env_field = 0;

    static ParamLayout of(const Scene& scene);
    std::size_t env_offset() const { return n_main * kMainStride; }
    std::size_t main_field_offset() const { return env_offset() + n_env * kEnvStride; }
    std::size_t env_field_offset() const { return main_field_offset() + main_field; }
    std::size_t total() const { return env_field_offset() + env_field; }
    ParamGroup group(std::size_t index) const;
    /// Index ranges [first, last) of every rotation quaternion.
    std::vector<std::size_t> quaternion_offsets() const;
};

std::vector<double> flatten_parameters(const Scene& scene);
/// Writes `x` back into a scene with the same layout.
void unflatten_parameters(std::span<const double> x, Scene& scene);

/// 1e-3 times the diagonal of the canonical main splat centers' bounding box.
double reflection_epsilon(const Scene& scene);

struct HybridRender {
    Image image;
    Image specular;
    RenderBuffers buffers;
};

/// Deforms to camera.time, rasterizes, traces reflections for pixels above
/// the alpha mask and blends by alpha_spec.
HybridRender render_hybrid(const Scene& scene, const Camera& camera, const RenderSettings& rs,
                           const TraceSettings& ts);

/// Reference: oracle rasterizer, exhaustive tracing with k = env count.
Image oracle_render_hybrid(const Scene& scene, const Camera& camera, const RenderSettings& rs,
                           const TraceSettings& ts);

struct PipelineOptions {
    RenderSettings render;
    TraceSettings trace;
    LossWeights weights;
    Phase phase = Phase::Joint;
    /// false renders the diffuse image in every phase (ablation).
    bool specular = true;
};

/// Frame outputs recorded on the tape.
struct TapeFrame {
    /// Supervised image, interleaved rgb.
    std::vector<Var> image;
    std::vector<Var> depth;
    std::vector<Var3> normal;
    std::vector<Var> alpha_spec;
    std::vector<double> accum;
};

/// Records the phase's supervised image and buffers for one camera.
TapeFrame record_frame(Tape& tape, std::span<const Var> params, const Scene& structure, const Camera& camera,
                       const PipelineOptions& options);

/// Records the phase-gated total loss for one frame. Fills `report` with the
/// forward values of each term.
Var record_frame_loss(Tape& tape, std::span<const Var> params, const Scene& structure, const Camera& camera,
                      const Image& gt, const NormalMap* external, const PipelineOptions& options,
                      LossReport* report = nullptr);

}  // namespace specsplat
