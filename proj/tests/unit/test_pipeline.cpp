#include <gtest/gtest.h>

#include "specsplat/fixtures.hpp"
#include "specsplat/pipeline.hpp"

using namespace specsplat;
using namespace specsplat::testing;

namespace {

PipelineOptions options_for(const Scene& s) {
    PipelineOptions o;
    o.trace.epsilon = reflection_epsilon(s);
    return o;
}

}  // namespace

TEST(Pipeline, FlattenRoundTrip) {
    Rng rng(1);
    Scene s = random_scene(rng, {5, 4, true});
    const auto x = flatten_parameters(s);
    const ParamLayout L = ParamLayout::of(s);
    ASSERT_EQ(x.size(), L.total());
    Scene t = s;
    for (auto& m : t.main) m.center = {};
    unflatten_parameters(x, t);
    EXPECT_EQ(flatten_parameters(t), x);
    EXPECT_EQ(L.group(0), ParamGroup::MainPosition);
    EXPECT_EQ(L.group(3), ParamGroup::MainRotation);
    EXPECT_EQ(L.group(7), ParamGroup::MainScale);
    EXPECT_EQ(L.group(9), ParamGroup::MainOpacity);
    EXPECT_EQ(L.group(10), ParamGroup::MainTint);
    EXPECT_EQ(L.group(11), ParamGroup::MainSh);
    EXPECT_EQ(L.group(L.env_offset()), ParamGroup::EnvSplats);
    EXPECT_EQ(L.group(L.main_field_offset()), ParamGroup::MainField);
    EXPECT_EQ(L.group(L.total() - 1), ParamGroup::EnvField);
    EXPECT_THROW(L.group(L.total()), std::out_of_range);
}

TEST(Pipeline, TapeForwardMatchesPlainRender) {
    for (bool fields : {false, true}) {
        Rng rng(7);
        Scene s = random_scene(rng, {40, 30, fields});
        const Camera cam = default_camera(24, 20, 0.3);
        const PipelineOptions o = options_for(s);
        const HybridRender h = render_hybrid(s, cam, o.render, o.trace);
        Tape tape;
        const auto x = flatten_parameters(s);
        std::vector<Var> params;
        for (double v : x) params.push_back(tape.variable(v));
        const TapeFrame f = record_frame(tape, params, s, cam, o);
        double worst = 0.0;
        for (std::size_t i = 0; i < f.image.size(); ++i)
            worst = std::max(worst, std::abs(f.image[i].value() - h.image.data[i]));
        for (std::size_t p = 0; p < f.depth.size(); ++p) {
            worst = std::max(worst, std::abs(f.depth[p].value() - h.buffers.depth[p]));
            worst = std::max(worst, std::abs(f.alpha_spec[p].value() - h.buffers.alpha_spec[p]));
            worst = std::max(worst, norm(value3(f.normal[p]) - h.buffers.normal[p]));
        }
        EXPECT_LT(worst, 1e-9) << "fields=" << fields;
    }
}

TEST(Pipeline, GradientsMatchFiniteDifferences) {
    Rng rng(11);
    Scene s = random_scene(rng, {12, 10, true});
    const Camera cam = default_camera(16, 16, 0.4);
    PipelineOptions o = options_for(s);
    const HybridRender target = render_hybrid(random_scene(rng, {12, 10, false}), cam, o.render, o.trace);
    NormalMap ext;
    ext.width = 16;
    ext.height = 16;
    ext.normals.assign(256, Vec3{0, 0, -1});
    ext.valid.assign(256, 1);
    const auto x0 = flatten_parameters(s);
    const ParamLayout L = ParamLayout::of(s);
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < x0.size(); i += 7) subset.push_back(i);
    const auto f = [&](Tape& tape, std::span<const Var> p) {
        return record_frame_loss(tape, p, s, cam, target.image, &ext, o);
    };
    const GradReport r = grad_check(f, x0, 1e-4, subset);
    EXPECT_LT(r.max_rel_error, 1e-4) << "worst " << r.checked[r.worst] << " group "
                                     << group_name(L.group(r.checked[r.worst])) << " a=" << r.analytic[r.worst]
                                     << " n=" << r.numeric[r.worst];
}
