#include "specsplat/deform.hpp"

#include "specsplat/scene.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>

namespace specsplat {

std::size_t DeformationField::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
}

std::vector<double> DeformationField::parameters() const {
    std::vector<double> p;
    p.reserve(parameter_count());
    for (const auto& l : layers) {
        p.insert(p.end(), l.weight.begin(), l.weight.end());
        p.insert(p.end(), l.bias.begin(), l.bias.end());
    }
    return p;
}

void DeformationField::set_parameters(std::span<const double> p) {
    if (p.size() != parameter_count()) throw std::invalid_argument("DeformationField: parameter count mismatch");
    std::size_t k = 0;
    for (auto& l : layers) {
        std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(k), l.weight.size(), l.weight.begin());
        k += l.weight.size();
        std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(k), l.bias.size(), l.bias.begin());
        k += l.bias.size();
    }
}

DeformationField DeformationField::create(SplatKind kind, const FieldConfig& config, std::uint64_t seed) {
    DeformationField f;
    f.l_pos = config.l_pos;
    f.l_time = config.l_time;
    std::mt19937_64 rng(seed);
    std::size_t in = f.input_width();
    for (std::size_t width : config.hidden) {
        DenseLayer l{in, width, std::vector<double>(width * in), std::vector<double>(width, 0.0)};
        const double bound = std::sqrt(6.0 / static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& w : l.weight) w = dist(rng);
        f.layers.push_back(std::move(l));
        in = width;
    }
    const std::size_t out = residual_width(kind);
    f.layers.push_back({in, out, std::vector<double>(out * in, 0.0), std::vector<double>(out, 0.0)});
    return f;
}

std::vector<double> positional_encode(std::span<const double> x, int frequencies) {
    std::vector<double> out(x.begin(), x.end());
    out.reserve(x.size() * static_cast<std::size_t>(2 * frequencies + 1));
    for (int l = 0; l < frequencies; ++l) {
        const double f = std::ldexp(std::numbers::pi, l);
        for (double v : x) out.push_back(std::sin(f * v));
        for (double v : x) out.push_back(std::cos(f * v));
    }
    return out;
}

namespace {

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("deformation time must lie in [0, 1]");
}

std::vector<double> field_input(const DeformationField& field, const Vec3& p, double t) {
    const std::array<double, 3> pa{p.x, p.y, p.z};
    const std::array<double, 1> ta{t};
    auto in = positional_encode(pa, field.l_pos);
    const auto te = positional_encode(ta, field.l_time);
    in.insert(in.end(), te.begin(), te.end());
    return in;
}

}  // namespace

std::vector<double> eval_field_raw(const DeformationField& field, const Vec3& p, double t) {
    check_time(t);
    std::vector<double> x = field_input(field, p, t);
    for (std::size_t li = 0; li < field.layers.size(); ++li) {
        const DenseLayer& l = field.layers[li];
        if (x.size() != l.in) throw std::logic_error("DeformationField: layer shapes do not chain");
        std::vector<double> y(l.out);
        for (std::size_t o = 0; o < l.out; ++o) {
            double s = l.bias[o];
            const double* w = l.weight.data() + o * l.in;
            for (std::size_t i = 0; i < l.in; ++i) s += w[i] * x[i];
            y[o] = (li + 1 < field.layers.size()) ? std::max(s, 0.0) : s;
        }
        x = std::move(y);
    }
    return x;
}

ResidualTuple eval_deform(const DeformationField& field, const Vec3& p, double t) {
    const auto y = eval_field_raw(field, p, t);
    if (y.size() < 10) throw std::logic_error("DeformationField: head narrower than a residual tuple");
    ResidualTuple r;
    r.dp = {y[0], y[1], y[2]};
    r.ds = {y[3], y[4]};
    r.dr = {y[5], y[6], y[7], y[8]};
    r.d_opacity = y[9];
    if (y.size() >= 11) r.d_tint = y[10];
    return r;
}

namespace {

Quat add_rotation(const Quat& q, const Quat& dr) {
    const Quat s{q.w + dr.w, q.x + dr.x, q.y + dr.y, q.z + dr.z};
    const double n = s.norm();
    if (!(n >= 1e-9) || !std::isfinite(n)) return q;
    return s.normalized();
}

template <class S>
void apply_common(S& s, const ResidualTuple& r) {
    s.center += r.dp;
    s.log_scale.x += r.ds.x;
    s.log_scale.y += r.ds.y;
    // Exact zero keeps the canonical rotation bit-identical.
    if (r.dr.w != 0.0 || r.dr.x != 0.0 || r.dr.y != 0.0 || r.dr.z != 0.0) s.rotation = add_rotation(s.rotation, r.dr);
    s.opacity_logit += r.d_opacity;
}

}  // namespace

SplatPrimitive apply_residuals(const SplatPrimitive& canonical, const ResidualTuple& r) {
    SplatPrimitive s = canonical;
    apply_common(s, r);
    if (r.d_tint) s.tint_logit += *r.d_tint;
    return s;
}

EnvSplat apply_residuals(const EnvSplat& canonical, const ResidualTuple& r) {
    EnvSplat s = canonical;
    apply_common(s, r);
    return s;
}

DeformedScene deform_scene(const Scene& scene, double t) {
    check_time(t);
    DeformedScene out;
    out.main.reserve(scene.main.size());
    out.env.reserve(scene.env.size());
    for (const auto& s : scene.main)
        out.main.push_back(scene.main_field.layers.empty() ? s
                                                           : apply_residuals(s, eval_deform(scene.main_field, s.center, t)));
    for (const auto& s : scene.env)
        out.env.push_back(scene.env_field.layers.empty() ? s
                                                         : apply_residuals(s, eval_deform(scene.env_field, s.center, t)));
    return out;
}

std::vector<Var> positional_encode(Tape& tape, std::span<const Var> x, int frequencies) {
    (void)tape;
    std::vector<Var> out(x.begin(), x.end());
    for (int l = 0; l < frequencies; ++l) {
        const double f = std::ldexp(std::numbers::pi, l);
        for (const Var& v : x) out.push_back(sin(v * f));
        for (const Var& v : x) out.push_back(cos(v * f));
    }
    return out;
}

namespace {

/// Records Z = act(X W^T + b) for a batch as one fused op. X holds n rows of
/// `in` variable ids.
std::vector<std::uint32_t> record_dense(Tape& tape, const DenseLayer& layer, std::span<const Var> params,
                                        std::size_t param_offset, std::vector<std::uint32_t> x_ids, std::size_t n,
                                        bool relu_act) {
    const std::size_t in = layer.in, out = layer.out;
    std::vector<double> x(n * in);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = tape.value(x_ids[k]);
    std::vector<double> w(out * in), b(out);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = params[param_offset + k].value();
    for (std::size_t k = 0; k < out; ++k) b[k] = params[param_offset + w.size() + k].value();

    std::vector<double> z(n * out);
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wo = w.data() + o * in;
            double s = b[o];
            for (std::size_t i = 0; i < in; ++i) s += wo[i] * xr[i];
            z[r * out + o] = s;
        }
    }

    std::vector<std::uint8_t> active;
    if (relu_act) {
        active.resize(z.size());
        auto log = tape.branches().streams(1);
        if (tape.branches().mode() == BranchLog::Mode::Replay) {
            for (std::size_t k = 0; k < z.size(); ++k) active[k] = static_cast<std::uint8_t>(log[0][k]);
        } else {
            for (std::size_t k = 0; k < z.size(); ++k) active[k] = z[k] > 0.0 ? 1 : 0;
            if (!log.empty()) log[0].assign(active.begin(), active.end());
        }
        for (std::size_t k = 0; k < z.size(); ++k)
            if (!active[k]) z[k] = 0.0;
    }

    std::vector<std::uint32_t> param_ids(w.size() + out);
    for (std::size_t k = 0; k < param_ids.size(); ++k) param_ids[k] = params[param_offset + k].id;

    auto saved = std::make_shared<std::tuple<std::vector<double>, std::vector<double>, std::vector<std::uint32_t>,
                                             std::vector<std::uint32_t>, std::vector<std::uint8_t>>>(
        std::move(x), std::move(w), std::move(x_ids), std::move(param_ids), std::move(active));

    const std::uint32_t first =
        tape.record_fused(z, [saved, n, in, out](std::span<const double> gz, std::span<double> adj) {
            const auto& [xs, ws, xid, pid, act] = *saved;
            std::vector<double> g(gz.begin(), gz.end());
            if (!act.empty())
                for (std::size_t k = 0; k < g.size(); ++k)
                    if (!act[k]) g[k] = 0.0;
            std::vector<double> gw(out * in, 0.0), gb(out, 0.0);
            for (std::size_t r = 0; r < n; ++r) {
                const double* xr = xs.data() + r * in;
                const double* gr = g.data() + r * out;
                for (std::size_t o = 0; o < out; ++o) {
                    const double go = gr[o];
                    if (go == 0.0) continue;
                    gb[o] += go;
                    double* gwo = gw.data() + o * in;
                    const double* wo = ws.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) {
                        gwo[i] += go * xr[i];
                        adj[xid[r * in + i]] += go * wo[i];
                    }
                }
            }
            for (std::size_t k = 0; k < gw.size(); ++k) adj[pid[k]] += gw[k];
            for (std::size_t k = 0; k < out; ++k) adj[pid[gw.size() + k]] += gb[k];
        });

    std::vector<std::uint32_t> ids(n * out);
    for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = first + static_cast<std::uint32_t>(k);
    return ids;
}

}  // namespace

std::vector<std::vector<Var>> eval_deform_batch(Tape& tape, const DeformationField& field,
                                                std::span<const Var> params, std::span<const Var3> centers,
                                                double t) {
    check_time(t);
    if (params.size() != field.parameter_count())
        throw std::invalid_argument("eval_deform_batch: parameter count mismatch");
    const std::size_t n = centers.size();
    std::vector<std::vector<Var>> rows(n);
    if (n == 0) return rows;

    const std::array<double, 1> ta{t};
    const auto time_features = positional_encode(ta, field.l_time);
    std::vector<Var> time_vars;
    for (double f : time_features) time_vars.push_back(tape.constant(f));

    std::vector<std::uint32_t> x_ids;
    x_ids.reserve(n * field.input_width());
    for (const Var3& c : centers) {
        for (const Var& v : positional_encode(tape, c, field.l_pos)) x_ids.push_back(v.id);
        for (const Var& v : time_vars) x_ids.push_back(v.id);
    }

    std::size_t offset = 0;
    for (std::size_t li = 0; li < field.layers.size(); ++li) {
        const DenseLayer& l = field.layers[li];
        x_ids = record_dense(tape, l, params, offset, std::move(x_ids), n, li + 1 < field.layers.size());
        offset += l.parameter_count();
    }
    const std::size_t out = field.output_width();
    for (std::size_t r = 0; r < n; ++r) {
        rows[r].reserve(out);
        for (std::size_t o = 0; o < out; ++o) rows[r].push_back(tape.at(x_ids[r * out + o]));
    }
    return rows;
}

}  // namespace specsplat
