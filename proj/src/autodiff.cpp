#include "specsplat/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace specsplat {

// ---- BranchLog ---------------------------------------------------------------

void BranchLog::start_recording() {
    mode_ = Mode::Record;
    scalars_.clear();
    streams_.clear();
    scalar_cursor_ = 0;
    stream_cursor_ = 0;
}

void BranchLog::start_replay() {
    mode_ = Mode::Replay;
    scalar_cursor_ = 0;
    stream_cursor_ = 0;
}

int BranchLog::decide(int natural) {
    switch (mode_) {
        case Mode::Free:
            return natural;
        case Mode::Record:
            scalars_.push_back(natural);
            return natural;
        case Mode::Replay:
            if (scalar_cursor_ >= scalars_.size()) throw std::logic_error("branch replay: decision log exhausted");
            return scalars_[scalar_cursor_++];
    }
    return natural;
}

std::span<std::vector<std::int32_t>> BranchLog::streams(std::size_t n) {
    switch (mode_) {
        case Mode::Free:
            return {};
        case Mode::Record: {
            const std::size_t first = streams_.size();
            streams_.resize(first + n);
            return std::span(streams_).subspan(first, n);
        }
        case Mode::Replay: {
            if (stream_cursor_ + n > streams_.size()) throw std::logic_error("branch replay: stream log exhausted");
            auto s = std::span(streams_).subspan(stream_cursor_, n);
            stream_cursor_ += n;
            return s;
        }
    }
    return {};
}

// ---- Tape --------------------------------------------------------------------

Var Tape::variable(double value) {
    values_.push_back(value);
    begin_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return Var{this, static_cast<std::uint32_t>(values_.size() - 1)};
}

Var Tape::record(double value, std::span<const std::uint32_t> parents, std::span<const double> partials) {
    parents_.insert(parents_.end(), parents.begin(), parents.end());
    partials_.insert(partials_.end(), partials.begin(), partials.end());
    values_.push_back(value);
    begin_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return Var{this, static_cast<std::uint32_t>(values_.size() - 1)};
}

Var Tape::record1(double value, Var a, double da) {
    parents_.push_back(a.id);
    partials_.push_back(da);
    values_.push_back(value);
    begin_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return Var{this, static_cast<std::uint32_t>(values_.size() - 1)};
}

Var Tape::record2(double value, Var a, double da, Var b, double db) {
    parents_.push_back(a.id);
    partials_.push_back(da);
    parents_.push_back(b.id);
    partials_.push_back(db);
    values_.push_back(value);
    begin_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return Var{this, static_cast<std::uint32_t>(values_.size() - 1)};
}

std::uint32_t Tape::record_fused(std::span<const double> values, Backward backward) {
    const auto first = static_cast<std::uint32_t>(values_.size());
    for (double v : values) {
        values_.push_back(v);
        begin_.push_back(static_cast<std::uint32_t>(parents_.size()));
    }
    if (!values.empty())
        fused_.push_back({first, static_cast<std::uint32_t>(values.size()), std::move(backward)});
    return first;
}

Gradients Tape::backward(Var output) const {
    std::vector<double> adj(values_.size(), 0.0);
    adj[output.id] = 1.0;
    auto op = fused_.rbegin();
    while (op != fused_.rend() && op->first > output.id) ++op;
    for (std::int64_t i = output.id; i >= 0; --i) {
        const auto n = static_cast<std::size_t>(i);
        const double a = adj[n];
        if (a != 0.0) {
            for (std::uint32_t e = begin_[n]; e < begin_[n + 1]; ++e) adj[parents_[e]] += a * partials_[e];
        }
        if (op != fused_.rend() && op->first == n) {
            op->backward(std::span<const double>(adj).subspan(op->first, op->count), std::span<double>(adj));
            ++op;
        }
    }
    return Gradients(std::move(adj));
}

void Tape::clear() {
    values_.clear();
    begin_.assign(1, 0);
    parents_.clear();
    partials_.clear();
    fused_.clear();
}

// ---- primitives ----------------------------------------------------------------

namespace {

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw std::logic_error("autodiff: operands recorded on different tapes");
    return *a.tape;
}

void require_finite(double v, const char* op) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("autodiff: non-finite operand in ") + op);
}

}  // namespace

Var operator+(Var a, Var b) { return tape_of(a, b).record2(a.value() + b.value(), a, 1.0, b, 1.0); }
Var operator-(Var a, Var b) { return tape_of(a, b).record2(a.value() - b.value(), a, 1.0, b, -1.0); }
Var operator*(Var a, Var b) {
    return tape_of(a, b).record2(a.value() * b.value(), a, b.value(), b, a.value());
}
Var operator/(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const double bv = b.value();
    if (std::abs(bv) < 1e-12) {
        const double floor = std::copysign(1e-12, bv);
        return t.record2(a.value() / floor, a, 1.0 / floor, b, 0.0);
    }
    const double q = a.value() / bv;
    return t.record2(q, a, 1.0 / bv, b, -q / bv);
}
Var operator-(Var a) { return a.tape->record1(-a.value(), a, -1.0); }
Var operator+(Var a, double b) { return a.tape->record1(a.value() + b, a, 1.0); }
Var operator+(double a, Var b) { return b + a; }
Var operator-(Var a, double b) { return a.tape->record1(a.value() - b, a, 1.0); }
Var operator-(double a, Var b) { return b.tape->record1(a - b.value(), b, -1.0); }
Var operator*(Var a, double b) { return a.tape->record1(a.value() * b, a, b); }
Var operator*(double a, Var b) { return b * a; }
Var operator/(Var a, double b) {
    const double d = std::abs(b) < 1e-12 ? std::copysign(1e-12, b) : b;
    return a.tape->record1(a.value() / d, a, 1.0 / d);
}
Var operator/(double a, Var b) {
    const double bv = b.value();
    if (std::abs(bv) < 1e-12) return b.tape->record1(a / std::copysign(1e-12, bv), b, 0.0);
    const double q = a / bv;
    return b.tape->record1(q, b, -q / bv);
}

Var exp(Var a) {
    require_finite(a.value(), "exp");
    const double e = std::exp(a.value());
    return a.tape->record1(e, a, e);
}

Var log(Var a) {
    if (!(a.value() > 0.0)) throw std::domain_error("autodiff: log of non-positive value");
    return a.tape->record1(std::log(a.value()), a, 1.0 / a.value());
}

Var sqrt(Var a) {
    if (!(a.value() > 0.0)) throw std::domain_error("autodiff: sqrt of non-positive value");
    const double s = std::sqrt(a.value());
    return a.tape->record1(s, a, 0.5 / s);
}

Var pow(Var a, double p) {
    const double x = a.value();
    return a.tape->record1(std::pow(x, p), a, p * std::pow(x, p - 1.0));
}

Var sigmoid(Var a) {
    const double s = 1.0 / (1.0 + std::exp(-a.value()));
    return a.tape->record1(s, a, s * (1.0 - s));
}

Var sin(Var a) { return a.tape->record1(std::sin(a.value()), a, std::cos(a.value())); }
Var cos(Var a) { return a.tape->record1(std::cos(a.value()), a, -std::sin(a.value())); }

Var relu(Var a) {
    const bool on = a.tape->branches().decide(a.value() > 0.0);
    return on ? a.tape->record1(a.value(), a, 1.0) : a.tape->record1(0.0, a, 0.0);
}

Var abs(Var a) {
    const bool neg = a.tape->branches().decide(a.value() < 0.0);
    return neg ? a.tape->record1(-a.value(), a, -1.0) : a.tape->record1(a.value(), a, 1.0);
}

Var clamp_st(Var a, double lo, double hi) { return a.tape->record1(std::clamp(a.value(), lo, hi), a, 1.0); }

Var clamp_min0(Var a) { return relu(a); }

Var sum(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("autodiff: sum of empty list");
    std::vector<std::uint32_t> ids(xs.size());
    std::vector<double> d(xs.size(), 1.0);
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        ids[i] = xs[i].id;
        s += xs[i].value();
    }
    return xs[0].tape->record(s, ids, d);
}

Var mean(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("autodiff: mean of empty list");
    const double inv = 1.0 / static_cast<double>(xs.size());
    std::vector<std::uint32_t> ids(xs.size());
    std::vector<double> d(xs.size(), inv);
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        ids[i] = xs[i].id;
        s += xs[i].value();
    }
    return xs[0].tape->record(s * inv, ids, d);
}

Var linear(std::span<const Var> xs, std::span<const double> w, double c) {
    if (xs.empty() || xs.size() != w.size()) throw std::invalid_argument("autodiff: linear size mismatch");
    std::vector<std::uint32_t> ids(xs.size());
    double s = c;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        ids[i] = xs[i].id;
        s += w[i] * xs[i].value();
    }
    return xs[0].tape->record(s, ids, w);
}

Var dot(std::span<const Var> a, std::span<const Var> b) {
    if (a.empty() || a.size() != b.size()) throw std::invalid_argument("autodiff: dot size mismatch");
    const std::size_t n = a.size();
    std::vector<std::uint32_t> ids(2 * n);
    std::vector<double> d(2 * n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = a[i].id;
        d[i] = b[i].value();
        ids[n + i] = b[i].id;
        d[n + i] = a[i].value();
        s += a[i].value() * b[i].value();
    }
    return a[0].tape->record(s, ids, d);
}

Var dot(const Var3& a, const Var3& b) { return dot(std::span<const Var>(a), std::span<const Var>(b)); }

Var dot(const Var3& a, const Vec3& b) {
    const std::array<double, 3> w{b.x, b.y, b.z};
    return linear(a, w);
}

Var3 cross(const Var3& a, const Var3& b) {
    Tape& t = *a[0].tape;
    const Vec3 av = value3(a), bv = value3(b);
    const Vec3 c = specsplat::cross(av, bv);
    // c_x = a_y b_z - a_z b_y, etc.
    const std::array<std::uint32_t, 4> px{a[1].id, b[2].id, a[2].id, b[1].id};
    const std::array<double, 4> dx{bv.z, av.y, -bv.y, -av.z};
    const std::array<std::uint32_t, 4> py{a[2].id, b[0].id, a[0].id, b[2].id};
    const std::array<double, 4> dy{bv.x, av.z, -bv.z, -av.x};
    const std::array<std::uint32_t, 4> pz{a[0].id, b[1].id, a[1].id, b[0].id};
    const std::array<double, 4> dz{bv.y, av.x, -bv.x, -av.y};
    return {t.record(c.x, px, dx), t.record(c.y, py, dy), t.record(c.z, pz, dz)};
}

std::vector<Var> matvec(std::span<const Var> m, std::size_t rows, std::span<const Var> x) {
    const std::size_t cols = x.size();
    if (rows == 0 || m.size() != rows * cols) throw std::invalid_argument("autodiff: matvec shape mismatch");
    std::vector<Var> out;
    out.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r) out.push_back(dot(m.subspan(r * cols, cols), x));
    return out;
}

std::vector<Var> normalize(std::span<const Var> x) {
    if (x.empty()) throw std::invalid_argument("autodiff: normalize of empty vector");
    Tape& t = *x[0].tape;
    const std::size_t n = x.size();
    double sq = 0.0;
    for (const Var& v : x) sq += v.value() * v.value();
    const double len = std::sqrt(sq);
    if (!(len > 0.0)) throw std::domain_error("autodiff: normalize of zero vector");
    std::vector<double> unit(n);
    for (std::size_t i = 0; i < n; ++i) unit[i] = x[i].value() / len;
    std::vector<std::uint32_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = x[i].id;
    std::vector<Var> out;
    out.reserve(n);
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) row[j] = ((i == j ? 1.0 : 0.0) - unit[i] * unit[j]) / len;
        out.push_back(t.record(unit[i], ids, row));
    }
    return out;
}

Var3 normalize(const Var3& x) {
    const auto v = normalize(std::span<const Var>(x));
    return {v[0], v[1], v[2]};
}

Var3 operator+(const Var3& a, const Var3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Var3 operator-(const Var3& a, const Var3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Var3 operator*(const Var3& a, Var s) { return {a[0] * s, a[1] * s, a[2] * s}; }
Var3 operator*(const Var3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
Var3 operator+(const Var3& a, const Vec3& b) { return {a[0] + b.x, a[1] + b.y, a[2] + b.z}; }
Var3 constant3(Tape& t, const Vec3& v) { return {t.constant(v.x), t.constant(v.y), t.constant(v.z)}; }
Vec3 value3(const Var3& v) { return {v[0].value(), v[1].value(), v[2].value()}; }

// ---- gradient checking ---------------------------------------------------------

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

GradReport grad_check(const ScalarFunction& f, std::span<const double> x0, double step,
                      std::span<const std::size_t> subset) {
    GradReport report;
    if (x0.empty()) return report;

    Tape tape;
    tape.branches().start_recording();
    std::vector<Var> params;
    params.reserve(x0.size());
    for (double x : x0) params.push_back(tape.variable(x));
    const Var out = f(tape, params);
    const Gradients g = tape.backward(out);
    const double f0 = out.value();

    std::vector<std::size_t> which;
    if (subset.empty()) {
        which.resize(x0.size());
        for (std::size_t i = 0; i < which.size(); ++i) which[i] = i;
    } else {
        which.assign(subset.begin(), subset.end());
    }

    Tape probe;
    probe.branches() = tape.branches();
    std::vector<double> x(x0.begin(), x0.end());
    auto evaluate = [&](std::size_t i, double xi) {
        probe.clear();
        probe.branches().start_replay();
        std::vector<Var> p;
        p.reserve(x.size());
        for (std::size_t k = 0; k < x.size(); ++k) p.push_back(probe.variable(k == i ? xi : x[k]));
        return f(probe, p).value();
    };

    for (std::size_t i : which) {
        const double h0 = step * std::max(1.0, std::abs(x0[i]));
        // A rung whose central difference spans only a few ulps of f is quantization noise.
        const double min_span = 1e3 * std::numeric_limits<double>::epsilon() * std::abs(f0);
        std::array<double, 4> d{};
        std::array<bool, 4> usable{};
        for (std::size_t k = 0; k < d.size(); ++k) {
            const double h = h0 * std::pow(0.1, static_cast<double>(k));
            const double f1 = evaluate(i, x0[i] + h), f_1 = evaluate(i, x0[i] - h);
            const double f2 = evaluate(i, x0[i] + 2.0 * h), f_2 = evaluate(i, x0[i] - 2.0 * h);
            d[k] = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
            usable[k] = k == 0 || std::abs(f1 - f_1) > min_span;
        }
        // Step ladder: keep the coarser estimate of the most self-consistent adjacent usable pair.
        std::size_t best = 0;
        double best_gap = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k + 1 < d.size() && usable[k + 1]; ++k)
            if (const double gap = std::abs(d[k] - d[k + 1]); gap < best_gap) {
                best_gap = gap;
                best = k;
            }
        const double numeric = d[best];
        const double analytic = g[params[i]];
        const double err = relative_error(analytic, numeric);
        report.checked.push_back(i);
        report.analytic.push_back(analytic);
        report.numeric.push_back(numeric);
        report.rel_error.push_back(err);
        if (report.checked.size() == 1 || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = report.checked.size() - 1;
        }
    }
    return report;
}

}  // namespace specsplat
