#pragma once

// Randomized scenes and cameras for self-checks, tests and benchmarks.

#include <cstdint>
#include <random>

#include "specsplat/scene.hpp"

namespace specsplat::testing {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi);
Vec3 uniform_vec(Rng& rng, double lo, double hi);
Quat random_rotation(Rng& rng);

/// Main splats scattered in a box in front of `default_camera`.
std::vector<SplatPrimitive> random_main_splats(Rng& rng, std::size_t n);
/// Environment splats on a jittered sphere around the origin with random SH.
std::vector<EnvSplat> random_env_splats(Rng& rng, std::size_t n, double radius = 4.0);

struct SceneOptions {
    std::size_t n_main = 50;
    std::size_t n_env = 20;
    /// Adds small random deformation fields to both splat sets.
    bool fields = false;
};
Scene random_scene(Rng& rng, const SceneOptions& options);

/// Looks from (0, 0, -3) at the origin.
Camera default_camera(int width, int height, double time = 0.0);

}  // namespace specsplat::testing
