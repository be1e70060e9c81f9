#pragma once

// Reverse-mode automatic differentiation on a flat, append-only tape.
//
// Every scalar node stores its forward value and a list of (parent, local
// partial) pairs. Fused operations (dense layers, the rasterizer, the tracer,
// SSIM) record many outputs at once together with a backward callback.
//
// Branch decisions taken while recording (relu signs, clamps, hit sets and
// sort orders) can be logged and replayed so that finite-difference probes
// evaluate the same piecewise-smooth branch the analytic gradient follows.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "specsplat/vec.hpp"

namespace specsplat {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    double value() const;
};

using Var3 = std::array<Var, 3>;

class BranchLog {
public:
    enum class Mode { Free, Record, Replay };

    Mode mode() const { return mode_; }
    void start_recording();
    void start_replay();
    void disable() { mode_ = Mode::Free; }

    /// Single integer decision. Free/Record return `natural`, Replay the logged value.
    int decide(int natural);
    bool decide(bool natural) { return decide(static_cast<int>(natural)) != 0; }

    /// Reserves `n` consecutive decision streams (e.g. one per pixel). In Record
    /// mode the returned streams are empty and must be filled by the caller; in
    /// Replay mode they hold the recorded decisions. In Free mode returns an
    /// empty span and callers decide naturally.
    std::span<std::vector<std::int32_t>> streams(std::size_t n);

    std::size_t stream_count() const { return streams_.size(); }

private:
    Mode mode_ = Mode::Free;
    std::vector<std::int32_t> scalars_;
    std::vector<std::vector<std::int32_t>> streams_;
    std::size_t scalar_cursor_ = 0;
    std::size_t stream_cursor_ = 0;
};

class Gradients {
public:
    Gradients() = default;
    explicit Gradients(std::vector<double> adj) : adj_(std::move(adj)) {}
    double operator[](Var v) const { return adj_[v.id]; }
    double at(std::uint32_t id) const { return adj_[id]; }
    std::span<const double> all() const { return adj_; }

private:
    std::vector<double> adj_;
};

class Tape {
public:
    /// Receives the adjoints of the op's outputs and the full adjoint array to
    /// accumulate into (indexed by node id).
    using Backward = std::function<void(std::span<const double> out_adj, std::span<double> adj)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var variable(double value);
    Var constant(double value) { return variable(value); }

    double value(Var v) const { return values_[v.id]; }
    double value(std::uint32_t id) const { return values_[id]; }
    std::size_t size() const { return values_.size(); }
    std::size_t edge_count() const { return parents_.size(); }

    Var record(double value, std::span<const std::uint32_t> parents, std::span<const double> partials);
    Var record1(double value, Var a, double da);
    Var record2(double value, Var a, double da, Var b, double db);

    /// Appends `values.size()` output nodes owned by a fused op. Returns the id
    /// of the first output; outputs are consecutive.
    std::uint32_t record_fused(std::span<const double> values, Backward backward);

    Var at(std::uint32_t id) { return Var{this, id}; }

    Gradients backward(Var output) const;

    BranchLog& branches() { return branches_; }
    const BranchLog& branches() const { return branches_; }

    void clear();

private:
    struct FusedOp {
        std::uint32_t first;
        std::uint32_t count;
        Backward backward;
    };

    std::vector<double> values_;
    std::vector<std::uint32_t> begin_{0};
    std::vector<std::uint32_t> parents_;
    std::vector<double> partials_;
    std::vector<FusedOp> fused_;
    BranchLog branches_;
};

inline double Var::value() const { return tape->value(id); }

// ---- scalar primitives -----------------------------------------------------

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
/// Denominators smaller than 1e-12 in magnitude are floored (and then carry
/// no gradient).
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);
Var operator/(double a, Var b);

Var exp(Var a);
/// Throws std::domain_error for non-positive input.
Var log(Var a);
/// Throws std::domain_error for non-positive input.
Var sqrt(Var a);
Var pow(Var a, double p);
Var sigmoid(Var a);
Var sin(Var a);
Var cos(Var a);
Var relu(Var a);
Var abs(Var a);
/// Forward value clamped to [lo, hi]; gradient passes through unchanged.
Var clamp_st(Var a, double lo, double hi);
/// max(a, 0) with the branch logged (zero gradient when clamped).
Var clamp_min0(Var a);

Var sum(std::span<const Var> xs);
Var mean(std::span<const Var> xs);
/// sum_i w_i x_i + c for constant weights.
Var linear(std::span<const Var> xs, std::span<const double> w, double c = 0.0);
Var dot(std::span<const Var> a, std::span<const Var> b);
Var dot(const Var3& a, const Var3& b);
Var dot(const Var3& a, const Vec3& b);
Var3 cross(const Var3& a, const Var3& b);
/// Row-major rows x cols matrix of variables times a vector.
std::vector<Var> matvec(std::span<const Var> m, std::size_t rows, std::span<const Var> x);
/// x / |x| with the full Jacobian (I - n n^T) / |x|.
std::vector<Var> normalize(std::span<const Var> x);
Var3 normalize(const Var3& x);

Var3 operator+(const Var3& a, const Var3& b);
Var3 operator-(const Var3& a, const Var3& b);
Var3 operator*(const Var3& a, Var s);
Var3 operator*(const Var3& a, double s);
Var3 operator+(const Var3& a, const Vec3& b);
Var3 constant3(Tape& t, const Vec3& v);
Vec3 value3(const Var3& v);

// ---- gradient checking -----------------------------------------------------

struct GradReport {
    std::vector<std::size_t> checked;
    std::vector<double> analytic;
    std::vector<double> numeric;
    std::vector<double> rel_error;
    double max_rel_error = 0.0;
    /// Position of the largest error within `checked`.
    std::size_t worst = 0;
    bool empty() const { return checked.empty(); }
};

/// Records a scalar function of the given parameters on the tape.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Relative error with denominator max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

/// Fourth-order central differences at h, h/10, h/100 and h/1000 with
/// h = step * max(1, |x|); the coarser estimate of the adjacent pair that
/// agrees best is used. Finer rungs whose differences span fewer than 1000
/// ulps of f are skipped. The analytic pass records its branch decisions and
/// every probe replays them. When `subset` is empty all parameters are checked.
GradReport grad_check(const ScalarFunction& f, std::span<const double> x0, double step = 1e-4,
                      std::span<const std::size_t> subset = {});

}  // namespace specsplat
