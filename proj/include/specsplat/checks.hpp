#pragma once

// Self-check suites comparing the fast paths against their references:
// reflection identities, rasterizer and tracer oracles, the hybrid oracle and
// finite-difference gradients. Used by the CLI `check` command and the
// acceptance suite with different sizes.

#include <cstdint>
#include <string>

namespace specsplat {

struct CheckResult {
    std::string name;
    bool pass = false;
    /// Measured worst-case quantity and the bound it is compared against.
    double value = 0.0;
    double limit = 0.0;
    double seconds = 0.0;
    std::string detail;
};

/// max of ||d_out| - 1|, |d_out.n + d_in.n| and |reflect(reflect(d)) - d|.
CheckResult check_reflection(std::size_t pairs, std::uint64_t seed);

/// render vs oracle_render on random scenes; max abs over diffuse, depth,
/// normal and alpha_spec.
CheckResult check_rasterizer(std::size_t scenes, int resolution, std::size_t max_splats, std::uint64_t seed);

/// BVH gather vs brute force (identical indices and order) and traced color
/// vs brute_force_trace.
CheckResult check_tracer(std::size_t scenes, std::size_t rays, std::size_t max_splats, std::uint64_t seed);

/// render_hybrid vs oracle_render_hybrid, including deformation fields.
CheckResult check_hybrid(std::size_t scenes, int resolution, std::uint64_t seed);

/// Joint-phase total loss gradients vs fourth-order finite differences,
/// `per_group` random parameters from each group, or all of them when 0.
CheckResult check_gradients(std::size_t n_main, std::size_t n_env, int resolution, std::size_t per_group,
                            std::uint64_t seed);

}  // namespace specsplat
