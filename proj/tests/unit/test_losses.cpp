#include <gtest/gtest.h>

#include "specsplat/fixtures.hpp"
#include "specsplat/losses.hpp"
#include "specsplat/pipeline.hpp"

using namespace specsplat;
using namespace specsplat::testing;

namespace {

Image random_image(Rng& rng, int w, int h) {
    Image img(w, h, 3);
    for (double& v : img.data) v = uniform(rng, 0.0, 1.0);
    return img;
}

std::vector<Var> as_vars(Tape& t, const Image& img) {
    std::vector<Var> v;
    for (double x : img.data) v.push_back(t.variable(x));
    return v;
}

}  // namespace

TEST(Losses, PhotometricIsMeanAbsoluteError) {
    Image a(2, 1, 3), b(2, 1, 3);
    a.data = {0, 0, 0, 1, 1, 1};
    b.data = {0.5, 0, 0, 1, 1, 0.25};
    EXPECT_DOUBLE_EQ(photometric(a, b), (0.5 + 0.75) / 6.0);
}

TEST(Losses, SsimWindowIsNormalizedGaussian) {
    const auto& w = ssim_window();
    double s = 0.0;
    for (double v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-15);
    EXPECT_NEAR(w[5 * kSsimWindow + 5] / w[5 * kSsimWindow + 6], std::exp(0.5 / (kSsimSigma * kSsimSigma)), 1e-12);
    EXPECT_EQ(w[0], w[kSsimWindow * kSsimWindow - 1]);
}

TEST(Losses, SsimIdentityAndSymmetry) {
    Rng rng(1);
    const Image a = random_image(rng, 20, 16), b = random_image(rng, 20, 16);
    EXPECT_EQ(ssim(a, a), 1.0);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
    EXPECT_LT(ssim(a, b), 0.5);
    EXPECT_THROW(ssim(Image(10, 20, 3), Image(10, 20, 3)), std::invalid_argument);
}

TEST(Losses, TapeFormsMatchPlainForms) {
    Rng rng(2);
    const Image a = random_image(rng, 14, 12), b = random_image(rng, 14, 12);
    Tape t;
    const auto v = as_vars(t, a);
    EXPECT_NEAR(photometric(t, v, b).value(), photometric(a, b), 1e-15);
    EXPECT_NEAR(ssim(t, v, b).value(), ssim(a, b), 1e-13);
}

TEST(Losses, SsimTapeGradient) {
    Rng rng(3);
    const Image gt = random_image(rng, 13, 12);
    const Image pred = random_image(rng, 13, 12);
    const ScalarFunction f = [&](Tape& t, std::span<const Var> p) { return ssim(t, p, gt); };
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < pred.data.size(); i += 5) subset.push_back(i);
    const GradReport r = grad_check(f, pred.data, 1e-4, subset);
    // Some window-edge gradients are ~1e-8, where difference noise is ~1e-12.
    for (std::size_t k = 0; k < r.checked.size(); ++k)
        EXPECT_NEAR(r.analytic[k], r.numeric[k], 1e-6 * std::abs(r.numeric[k]) + 1e-10) << r.checked[k];
}

TEST(Losses, NormalTermsByHand) {
    const std::vector<Vec3> n{{0, 0, 1}, {1, 0, 0}, {0, 1, 0}};
    const std::vector<Vec3> target{{0, 0, 1}, {0, 1, 0}, {0, -1, 0}};
    const std::vector<std::uint8_t> mask{1, 1, 0};
    EXPECT_DOUBLE_EQ(normal_consistency(n, target, mask), 0.5);
    EXPECT_DOUBLE_EQ(tc_normal(n, target, mask), 0.5);
    EXPECT_EQ(normal_consistency(n, target, std::vector<std::uint8_t>(3, 0)), 0.0);
}

TEST(Losses, PseudoNormalMaskNeedsAlphaAround) {
    // 3x3: only the center and its four neighbours are opaque.
    const std::vector<double> accum{0.0, 0.9, 0.0, 0.9, 0.9, 0.9, 0.0, 0.9, 0.0};
    const std::vector<std::uint8_t> valid(9, 1);
    const auto m = pseudo_normal_mask(accum, valid, 3, 3);
    EXPECT_EQ(m, (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 0, 0, 0, 0}));
    NormalMap ext;
    ext.width = ext.height = 3;
    ext.normals.assign(9, {0, 0, 1});
    ext.valid = {1, 1, 1, 1, 0, 1, 1, 1, 1};
    EXPECT_EQ(external_normal_mask(accum, ext), (std::vector<std::uint8_t>{0, 1, 0, 1, 0, 1, 0, 1, 0}));
}

TEST(Losses, PhaseGating) {
    Rng rng(4);
    const Scene s = random_scene(rng, {40, 10, false});
    const Camera cam = default_camera(16, 16);
    RenderSettings rs;
    TraceSettings ts;
    ts.epsilon = reflection_epsilon(s);
    const HybridRender h = render_hybrid(s, cam, rs, ts);
    const Image gt = random_image(rng, 16, 16);
    LossWeights w;
    const LossReport d = total_loss(h.buffers, &h.image, cam, gt, nullptr, w, Phase::Diffuse);
    const LossReport j = total_loss(h.buffers, &h.image, cam, gt, nullptr, w, Phase::Joint);
    EXPECT_DOUBLE_EQ(d.photometric, photometric(h.buffers.diffuse_image(), gt));
    EXPECT_DOUBLE_EQ(j.photometric, photometric(h.image, gt));
    EXPECT_NEAR(j.total, j.photometric + w.lambda_ssim * j.ssim_term + w.lambda_norm * j.l_norm, 1e-15);
    EXPECT_EQ(j.tc_count, 0u);
    EXPECT_THROW(total_loss(h.buffers, nullptr, cam, gt, nullptr, w, Phase::Joint), std::invalid_argument);
}

TEST(Losses, TapeLossMatchesPlainLoss) {
    Rng rng(5);
    const Scene s = random_scene(rng, {40, 15, true});
    const Camera cam = default_camera(16, 16, 0.5);
    PipelineOptions o;
    o.trace.epsilon = reflection_epsilon(s);
    const HybridRender h = render_hybrid(s, cam, o.render, o.trace);
    const Image gt = random_image(rng, 16, 16);
    NormalMap ext;
    ext.width = ext.height = 16;
    for (std::size_t p = 0; p < 256; ++p) {
        ext.normals.push_back(normalize(uniform_vec(rng, -1, 1)));
        ext.valid.push_back(p % 3 != 0);
    }
    for (Phase ph : {Phase::Diffuse, Phase::Specular, Phase::Joint}) {
        o.phase = ph;
        const LossReport plain = total_loss(h.buffers, &h.image, cam, gt, &ext, o.weights, ph);
        Tape t;
        std::vector<Var> params;
        for (double v : flatten_parameters(s)) params.push_back(t.variable(v));
        LossReport rep;
        const Var l = record_frame_loss(t, params, s, cam, gt, &ext, o, &rep);
        EXPECT_NEAR(l.value(), plain.total, 1e-10) << phase_name(ph);
        EXPECT_NEAR(rep.l_tcnorm, plain.l_tcnorm, 1e-10);
        EXPECT_EQ(rep.norm_count, plain.norm_count);
    }
}
