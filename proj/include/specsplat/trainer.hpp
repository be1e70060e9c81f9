#pragma once

// Coarse-to-fine optimization: phase schedule, per-group freezing, Adam,
// opacity pruning, checkpoints and the CSV training log.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "specsplat/losses.hpp"
#include "specsplat/metrics.hpp"
#include "specsplat/pipeline.hpp"

namespace specsplat {

struct PhaseSchedule {
    std::size_t total_steps = 60000;
    double diffuse_end = 0.15;
    double specular_end = 0.25;

    /// Throws std::invalid_argument unless 0 < diffuse_end < specular_end < 1.
    void validate() const;
    /// First step of the specular phase: ceil(total * diffuse_end).
    std::size_t diffuse_boundary() const;
    /// First step of the joint phase: ceil(total * specular_end).
    std::size_t specular_boundary() const;
};

Phase phase_of(std::size_t step, const PhaseSchedule& schedule);

using GroupMask = std::array<bool, kParamGroupCount>;
/// Diffuse: main splats except tint, main field. Specular: env splats, env
/// field, tint. Joint: everything. `tint_in_diffuse` moves tint into the
/// diffuse phase as well.
GroupMask trainable_groups(Phase phase, bool tint_in_diffuse = false);

struct LearningRates {
    double position = 1e-3;
    double rotation = 2e-3;
    double scale = 5e-3;
    double opacity = 2.5e-2;
    double sh = 5e-3;
    double tint = 1e-2;
    double env = 5e-3;
    double field = 5e-4;

    double of(ParamGroup g) const;
    void validate() const;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

struct OptimizerState {
    std::vector<double> m, v;
    /// Update count per group, used for bias correction.
    std::array<std::uint64_t, kParamGroupCount> steps{};

    void resize(std::size_t n) {
        m.resize(n, 0.0);
        v.resize(n, 0.0);
    }
};

/// Adam on every parameter whose group is enabled in `mask`; others are left
/// untouched. Updated quaternions are renormalized.
void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const LearningRates& rates, const AdamConfig& adam, const GroupMask& mask,
                    const ParamLayout& layout);

struct PruneResult {
    std::size_t removed_main = 0;
    std::size_t removed_env = 0;
};

/// Drops splats with sigmoid(opacity_logit) < threshold, lowest opacity first,
/// never going below `min_count` per set. Optimizer rows are dropped to match
/// when `state` is given.
PruneResult prune(Scene& scene, double threshold, std::size_t min_count, OptimizerState* state = nullptr);

struct TrainConfig {
    PhaseSchedule schedule;
    LearningRates rates;
    AdamConfig adam;
    double prune_threshold = 0.005;
    /// 0 disables pruning.
    std::size_t prune_interval = 1000;
    std::size_t prune_min_count = 16;
    std::uint64_t seed = 0;
    /// 0 disables checkpoints.
    std::size_t checkpoint_interval = 0;
    /// Receives checkpoints and train_log.csv when non-empty.
    std::filesystem::path out_dir;
    LossWeights weights;
    /// Rendered normals face the camera during training so normal losses
    /// compare like with like.
    RenderSettings render = [] {
        RenderSettings r;
        r.flip_normals = true;
        return r;
    }();
    /// epsilon <= 0 selects reflection_epsilon of the initial scene.
    TraceSettings trace = [] {
        TraceSettings t;
        t.epsilon = 0.0;
        return t;
    }();
    /// false trains the diffuse branch only in every phase (ablation).
    bool specular = true;
    bool tint_in_diffuse = false;
    /// Side of the random square crop rendered per step; 0 renders full frames.
    int patch = 0;
    /// Frames sampled for training; empty selects every non-test frame.
    std::vector<std::size_t> frames;

    void validate() const;
};

struct StepRecord {
    std::size_t step = 0;
    Phase phase = Phase::Diffuse;
    std::size_t frame = 0;
    LossReport loss;
    std::size_t n_main = 0, n_env = 0;
    double wall_ms = 0.0;
};

/// Called after each optimizer update (before pruning) with the flattened
/// parameters before and after the update.
using StepObserver = std::function<void(const StepRecord& record, std::span<const double> before,
                                        std::span<const double> after, const ParamLayout& layout)>;

struct TrainResult {
    Scene scene;
    std::vector<StepRecord> log;
};

/// Images and normal maps of a dataset, loaded once.
struct TrainingData {
    std::vector<Camera> cameras;
    std::vector<Image> images;
    std::vector<std::optional<NormalMap>> normals;
    /// Overrides the render settings' background during training.
    Vec3 background;
};
TrainingData load_training_data(const Dataset& dataset);

TrainResult train(const TrainingData& data, Scene scene, const TrainConfig& config, const StepObserver& observer = {});

/// Parses a training config. Keys other than the config's own and `extra_keys`
/// are rejected.
TrainConfig train_config_from_json(const std::string& text, std::span<const std::string> extra_keys = {});

std::string csv_header();
std::string csv_row(const StepRecord& r);

/// Indices i with i % 8 == 0, or every frame when there are fewer than two.
std::vector<std::size_t> test_frames(std::size_t frame_count);
/// The complement of test_frames.
std::vector<std::size_t> train_frames(std::size_t frame_count);

/// Renders the given frames (hybrid, or the diffuse buffer when `specular` is
/// false) and scores them against the training images. Writes NNN.pfm under
/// `out_dir` when non-empty.
EvalReport evaluate_frames(const Scene& scene, const TrainingData& data, std::span<const std::size_t> frames,
                           const RenderSettings& rs, const TraceSettings& ts, bool specular,
                           const std::filesystem::path& out_dir = {});

/// Mean angle in degrees between rendered normals and the dataset normal maps
/// over valid pixels. Pixels the render leaves without a normal count as 90.
double normal_error_deg(const Scene& scene, const TrainingData& data, std::span<const std::size_t> frames,
                        const RenderSettings& rs);

/// Stable FNV-1a hash of a parameter vector's bytes.
std::uint64_t parameter_checksum(std::span<const double> x);

}  // namespace specsplat
