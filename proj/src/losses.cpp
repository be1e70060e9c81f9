#include "specsplat/losses.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace specsplat {

const char* phase_name(Phase p) {
    switch (p) {
        case Phase::Diffuse: return "diffuse";
        case Phase::Specular: return "specular";
        case Phase::Joint: return "joint";
    }
    return "?";
}

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw std::invalid_argument(std::string(what) + ": image shapes differ");
}

/// Window statistics in a fixed summation order shared by every SSIM path.
struct WindowStats {
    double ma, mb, saa, sbb, sab;
};

WindowStats window_stats(const double* a, const double* b, int width, int channels, int x0, int y0, int c) {
    const auto& w = ssim_window();
    double ma = 0, mb = 0, ea = 0, eb = 0, eab = 0;
    for (int j = 0; j < kSsimWindow; ++j) {
        for (int i = 0; i < kSsimWindow; ++i) {
            const double wi = w[static_cast<std::size_t>(j * kSsimWindow + i)];
            const std::size_t p = (static_cast<std::size_t>(y0 + j) * width + (x0 + i)) * channels + c;
            const double va = a[p], vb = b[p];
            ma += wi * va;
            mb += wi * vb;
            ea += wi * (va * va);
            eb += wi * (vb * vb);
            eab += wi * (va * vb);
        }
    }
    return {ma, mb, ea - ma * ma, eb - mb * mb, eab - ma * mb};
}

double window_ssim(const WindowStats& s) {
    const double a1 = 2.0 * s.ma * s.mb + kSsimC1, a2 = 2.0 * s.sab + kSsimC2;
    const double b1 = s.ma * s.ma + s.mb * s.mb + kSsimC1, b2 = s.saa + s.sbb + kSsimC2;
    return (a1 * a2) / (b1 * b2);
}

void check_ssim_size(int w, int h) {
    if (w < kSsimWindow || h < kSsimWindow) throw std::invalid_argument("ssim: images must be at least 11x11");
}

}  // namespace

double photometric(const Image& pred, const Image& gt) {
    require_same_shape(pred, gt, "photometric");
    if (pred.data.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) s += std::abs(pred.data[i] - gt.data[i]);
    return s / static_cast<double>(pred.data.size());
}

const std::array<double, kSsimWindow * kSsimWindow>& ssim_window() {
    static const auto w = [] {
        std::array<double, kSsimWindow> g{};
        double sum = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            g[static_cast<std::size_t>(i)] = std::exp(-(d * d) / (2.0 * kSsimSigma * kSsimSigma));
            sum += g[static_cast<std::size_t>(i)];
        }
        for (double& v : g) v /= sum;
        std::array<double, kSsimWindow * kSsimWindow> out{};
        for (int j = 0; j < kSsimWindow; ++j)
            for (int i = 0; i < kSsimWindow; ++i)
                out[static_cast<std::size_t>(j * kSsimWindow + i)] = g[static_cast<std::size_t>(j)] * g[static_cast<std::size_t>(i)];
        return out;
    }();
    return w;
}

double ssim(const Image& a, const Image& b) {
    require_same_shape(a, b, "ssim");
    check_ssim_size(a.width, a.height);
    const int nx = a.width - kSsimWindow + 1, ny = a.height - kSsimWindow + 1;
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                total += window_ssim(window_stats(a.data.data(), b.data.data(), a.width, a.channels, x, y, c));
    return total / (static_cast<double>(nx) * ny * a.channels);
}

namespace {

double masked_mean_dot(std::span<const Vec3> n, std::span<const Vec3> t, std::span<const std::uint8_t> mask) {
    if (n.size() != t.size() || n.size() != mask.size()) throw std::invalid_argument("normal loss: size mismatch");
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
        if (!mask[i]) continue;
        s += 1.0 - dot(n[i], t[i]);
        ++count;
    }
    return count ? s / static_cast<double>(count) : 0.0;
}

std::size_t count_set(std::span<const std::uint8_t> m) {
    std::size_t c = 0;
    for (auto v : m) c += v ? 1 : 0;
    return c;
}

}  // namespace

double normal_consistency(std::span<const Vec3> n, std::span<const Vec3> target, std::span<const std::uint8_t> mask) {
    return masked_mean_dot(n, target, mask);
}

double tc_normal(std::span<const Vec3> n, std::span<const Vec3> external, std::span<const std::uint8_t> mask) {
    return masked_mean_dot(n, external, mask);
}

std::vector<std::uint8_t> pseudo_normal_mask(std::span<const double> accum, std::span<const std::uint8_t> pseudo_valid,
                                             int width, int height) {
    std::vector<std::uint8_t> m(accum.size(), 0);
    auto ok = [&](int x, int y) { return accum[static_cast<std::size_t>(y) * width + x] > kNormalLossAlpha; };
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * width + x;
            if (!pseudo_valid[p] || !ok(x, y)) continue;
            const int xl = std::max(0, x - 1), xr = std::min(width - 1, x + 1);
            const int yl = std::max(0, y - 1), yr = std::min(height - 1, y + 1);
            m[p] = ok(xl, y) && ok(xr, y) && ok(x, yl) && ok(x, yr);
        }
    }
    return m;
}

std::vector<std::uint8_t> external_normal_mask(std::span<const double> accum, const NormalMap& external) {
    if (external.normals.size() != accum.size()) throw std::invalid_argument("normal map resolution mismatch");
    std::vector<std::uint8_t> m(accum.size(), 0);
    for (std::size_t p = 0; p < accum.size(); ++p)
        m[p] = accum[p] > kNormalLossAlpha && (external.valid.empty() || external.valid[p]);
    return m;
}

LossReport total_loss(const RenderBuffers& buffers, const Image* hybrid, const Camera& camera, const Image& gt,
                      const NormalMap* external, const LossWeights& weights, Phase phase) {
    if (gt.width != buffers.width || gt.height != buffers.height || camera.width != buffers.width ||
        camera.height != buffers.height)
        throw std::invalid_argument("total_loss: resolution mismatch");
    Image diffuse;
    const Image* pred = hybrid;
    if (phase == Phase::Diffuse) {
        diffuse = buffers.diffuse_image();
        pred = &diffuse;
    }
    if (!pred) throw std::invalid_argument("total_loss: hybrid image required outside the diffuse phase");
    LossReport r;
    r.photometric = photometric(*pred, gt);
    r.photometric_count = pred->data.size();
    if (weights.lambda_ssim != 0.0) r.ssim_term = 0.5 * (1.0 - ssim(*pred, gt));
    if (weights.lambda_norm != 0.0) {
        const PseudoNormals pn = pseudo_normals_from_depth(buffers.depth, camera);
        const auto mask = pseudo_normal_mask(buffers.accum, pn.valid, buffers.width, buffers.height);
        r.l_norm = normal_consistency(buffers.normal, pn.normals, mask);
        r.norm_count = count_set(mask);
    }
    if (weights.lambda_tc != 0.0 && external) {
        const auto mask = external_normal_mask(buffers.accum, *external);
        r.l_tcnorm = tc_normal(buffers.normal, external->normals, mask);
        r.tc_count = count_set(mask);
    }
    r.total = r.photometric + weights.lambda_ssim * r.ssim_term + weights.lambda_norm * r.l_norm +
              weights.lambda_tc * r.l_tcnorm;
    return r;
}

// ---- tape forms ----------------------------------------------------------------

Var photometric(Tape& tape, std::span<const Var> pred, const Image& gt) {
    if (pred.size() != gt.data.size()) throw std::invalid_argument("photometric: size mismatch");
    if (pred.empty()) return tape.constant(0.0);
    std::vector<Var> terms;
    terms.reserve(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) terms.push_back(abs(pred[i] - gt.data[i]));
    return mean(terms);
}

Var ssim(Tape& tape, std::span<const Var> pred, const Image& gt) {
    if (pred.size() != gt.data.size()) throw std::invalid_argument("ssim: size mismatch");
    check_ssim_size(gt.width, gt.height);
    const int W = gt.width, H = gt.height, C = gt.channels;
    const int nx = W - kSsimWindow + 1, ny = H - kSsimWindow + 1;
    auto a = std::make_shared<std::vector<double>>(pred.size());
    auto ids = std::make_shared<std::vector<std::uint32_t>>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        (*a)[i] = pred[i].value();
        (*ids)[i] = pred[i].id;
    }
    auto b = std::make_shared<std::vector<double>>(gt.data);
    double total = 0.0;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) total += window_ssim(window_stats(a->data(), b->data(), W, C, x, y, c));
    const double count = static_cast<double>(nx) * ny * C;
    const double value = total / count;
    const std::array<double, 1> out{value};
    const std::uint32_t id = tape.record_fused(out, [a, b, ids, W, C, nx, ny, count](std::span<const double> g,
                                                                                     std::span<double> adj) {
        const double scale = g[0] / count;
        if (scale == 0.0) return;
        const auto& w = ssim_window();
        std::vector<double> ga(a->size(), 0.0);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < ny; ++y)
                for (int x = 0; x < nx; ++x) {
                    const WindowStats s = window_stats(a->data(), b->data(), W, C, x, y, c);
                    const double a1 = 2.0 * s.ma * s.mb + kSsimC1, a2 = 2.0 * s.sab + kSsimC2;
                    const double b1 = s.ma * s.ma + s.mb * s.mb + kSsimC1, b2 = s.saa + s.sbb + kSsimC2;
                    const double S = (a1 * a2) / (b1 * b2);
                    // Partials with respect to E[a], E[a^2] and E[ab].
                    const double g_mu = S * (2.0 * s.mb / a1 - 2.0 * s.mb / a2 - 2.0 * s.ma / b1 + 2.0 * s.ma / b2);
                    const double g_e2 = -S / b2;
                    const double g_eab = 2.0 * S / a2;
                    for (int j = 0; j < kSsimWindow; ++j)
                        for (int i = 0; i < kSsimWindow; ++i) {
                            const std::size_t p = (static_cast<std::size_t>(y + j) * W + (x + i)) * C + c;
                            const double wi = w[static_cast<std::size_t>(j * kSsimWindow + i)];
                            ga[p] += wi * (g_mu + 2.0 * (*a)[p] * g_e2 + (*b)[p] * g_eab);
                        }
                }
        for (std::size_t p = 0; p < ga.size(); ++p) adj[(*ids)[p]] += scale * ga[p];
    });
    return tape.at(id);
}

namespace {

template <class Target>
Var masked_mean_dot(Tape& tape, std::span<const Var3> n, std::span<const Target> t, std::span<const std::uint8_t> mask) {
    if (n.size() != t.size() || n.size() != mask.size()) throw std::invalid_argument("normal loss: size mismatch");
    std::vector<Var> terms;
    for (std::size_t i = 0; i < n.size(); ++i)
        if (mask[i]) terms.push_back(1.0 - dot(n[i], t[i]));
    return terms.empty() ? tape.constant(0.0) : mean(terms);
}

}  // namespace

Var normal_consistency(Tape& tape, std::span<const Var3> n, std::span<const Var3> target,
                       std::span<const std::uint8_t> mask) {
    return masked_mean_dot(tape, n, target, mask);
}

Var tc_normal(Tape& tape, std::span<const Var3> n, std::span<const Vec3> external, std::span<const std::uint8_t> mask) {
    return masked_mean_dot(tape, n, external, mask);
}

std::vector<Var3> pseudo_normals_from_depth(Tape& tape, std::span<const Var> depth, const Camera& camera,
                                            std::span<const std::uint8_t> want) {
    const int W = camera.width, H = camera.height;
    const std::size_t n = static_cast<std::size_t>(W) * H;
    if (depth.size() != n || want.size() != n) throw std::invalid_argument("pseudo normals: size mismatch");
    const Vec3 eye = camera.center();
    const Var zero = tape.constant(0.0);
    std::vector<Var3> out(n, Var3{zero, zero, zero});
    std::vector<Var3> P(n);
    std::vector<std::uint8_t> made(n, 0);
    auto point = [&](int x, int y) -> const Var3& {
        const std::size_t p = static_cast<std::size_t>(y) * W + x;
        if (!made[p]) {
            const Vec3 d = camera.pixel_direction(x, y);
            P[p] = Var3{depth[p] * d.x + eye.x, depth[p] * d.y + eye.y, depth[p] * d.z + eye.z};
            made[p] = 1;
        }
        return P[p];
    };
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * W + x;
            if (!want[p]) continue;
            if (W < 2 || H < 2) throw std::logic_error("pseudo normals: image too small");
            Var3 gx, gy;
            if (x == 0) gx = point(1, y) - point(0, y);
            else if (x == W - 1) gx = point(x, y) - point(x - 1, y);
            else gx = (point(x + 1, y) - point(x - 1, y)) * 0.5;
            if (y == 0) gy = point(x, 1) - point(x, 0);
            else if (y == H - 1) gy = point(x, y) - point(x, y - 1);
            else gy = (point(x, y + 1) - point(x, y - 1)) * 0.5;
            Var3 nn = normalize(cross(gx, gy));
            const Vec3 d = camera.pixel_direction(x, y);
            const bool flip = tape.branches().decide(dot(value3(nn), d) > 0.0);
            out[p] = flip ? nn * -1.0 : nn;
        }
    }
    return out;
}

}  // namespace specsplat
