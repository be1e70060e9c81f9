#pragma once

// Time-conditioned residual networks. One field warps the main splats, a
// second, independent field warps the environment splats. Both take the
// canonical center and the normalized time, positionally encoded, and emit
// additive residuals in raw parameter space.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "specsplat/autodiff.hpp"
#include "specsplat/vec.hpp"

namespace specsplat {

struct SplatPrimitive;
struct EnvSplat;
struct Scene;

enum class SplatKind { Main, Env };

/// Residual widths: dp 3, ds 2, dr 4, do 1 (+ dtint 1 for main splats).
constexpr std::size_t residual_width(SplatKind kind) { return kind == SplatKind::Main ? 11 : 10; }

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weight;  // out x in, row-major
    std::vector<double> bias;    // out

    std::size_t parameter_count() const { return weight.size() + bias.size(); }
    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct FieldConfig {
    int l_pos = 6;
    int l_time = 4;
    std::vector<std::size_t> hidden{64, 64, 64, 64};
};

/// MLP: relu after every layer except the last (the residual head).
struct DeformationField {
    int l_pos = 6;
    int l_time = 4;
    std::vector<DenseLayer> layers;

    std::size_t input_width() const { return static_cast<std::size_t>(3 * (2 * l_pos + 1) + (2 * l_time + 1)); }
    std::size_t output_width() const { return layers.empty() ? 0 : layers.back().out; }
    std::size_t parameter_count() const;

    /// Flattened parameters: per layer, weights then biases.
    std::vector<double> parameters() const;
    void set_parameters(std::span<const double> p);

    /// Hidden layers get He-uniform weights and zero biases from `seed`; the
    /// head is exactly zero so the field starts as the identity deformation.
    static DeformationField create(SplatKind kind, const FieldConfig& config, std::uint64_t seed);

    friend bool operator==(const DeformationField&, const DeformationField&) = default;
};

struct ResidualTuple {
    Vec3 dp;
    Vec2 ds;
    Quat dr{0.0, 0.0, 0.0, 0.0};
    double d_opacity = 0.0;
    std::optional<double> d_tint;
};

/// x followed by sin(2^l pi x), cos(2^l pi x) for l = 0..L-1 (grouped per frequency).
std::vector<double> positional_encode(std::span<const double> x, int frequencies);

/// Throws std::invalid_argument for t outside [0, 1].
ResidualTuple eval_deform(const DeformationField& field, const Vec3& p, double t);

/// Raw MLP output (no splitting into a tuple).
std::vector<double> eval_field_raw(const DeformationField& field, const Vec3& p, double t);

/// Adds a residual in raw parameter space. The quaternion is renormalized;
/// if q + dr is (near) zero the canonical rotation is kept.
SplatPrimitive apply_residuals(const SplatPrimitive& canonical, const ResidualTuple& r);
EnvSplat apply_residuals(const EnvSplat& canonical, const ResidualTuple& r);

struct DeformedScene {
    std::vector<SplatPrimitive> main;
    std::vector<EnvSplat> env;
};

/// Every splat of each set warped by its own field at time t.
DeformedScene deform_scene(const Scene& scene, double t);

// ---- differentiable forms --------------------------------------------------

/// Encodes on the tape; time is treated as a constant.
std::vector<Var> positional_encode(Tape& tape, std::span<const Var> x, int frequencies);

/// Evaluates the field for a batch of canonical centers in one fused op per
/// layer. `params` holds the field's flattened parameters. Returns one row of
/// `output_width()` variables per center.
std::vector<std::vector<Var>> eval_deform_batch(Tape& tape, const DeformationField& field,
                                                std::span<const Var> params, std::span<const Var3> centers,
                                                double t);

}  // namespace specsplat
