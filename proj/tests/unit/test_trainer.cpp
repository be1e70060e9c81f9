#include <gtest/gtest.h>

#include "specsplat/fixtures.hpp"
#include "specsplat/synth.hpp"
#include "specsplat/trainer.hpp"

using namespace specsplat;
using namespace specsplat::testing;
namespace fs = std::filesystem;

namespace {

struct SmallData {
    TrainingData data;
    Scene init;
};

const SmallData& small_data() {
    static const SmallData d = [] {
        SyntheticSpec spec;
        spec.frames = 4;
        spec.width = spec.height = 20;
        spec.env_count = 40;
        spec.seed = 3;
        const fs::path dir = fs::temp_directory_path() / "specsplat_test_train";
        fs::remove_all(dir);
        const Dataset ds = generate_synthetic(spec, dir);
        return SmallData{load_training_data(ds), load_scene(ds.resolve(ds.scene))};
    }();
    return d;
}

TrainConfig small_config(std::size_t steps) {
    TrainConfig c;
    c.schedule.total_steps = steps;
    c.prune_interval = 0;
    c.seed = 11;
    return c;
}

}  // namespace

TEST(Trainer, PhaseBoundaries) {
    const PhaseSchedule full_size;
    EXPECT_EQ(full_size.total_steps, 60000u);
    EXPECT_EQ(full_size.diffuse_boundary(), 9000u);
    EXPECT_EQ(full_size.specular_boundary(), 15000u);
    EXPECT_EQ(phase_of(8999, full_size), Phase::Diffuse);
    EXPECT_EQ(phase_of(9000, full_size), Phase::Specular);
    EXPECT_EQ(phase_of(14999, full_size), Phase::Specular);
    EXPECT_EQ(phase_of(15000, full_size), Phase::Joint);
    PhaseSchedule s{300, 0.15, 0.25};
    EXPECT_EQ(s.diffuse_boundary(), 45u);
    EXPECT_EQ(s.specular_boundary(), 75u);
    s.total_steps = 7;
    EXPECT_EQ(s.diffuse_boundary(), 2u);
    EXPECT_EQ(s.specular_boundary(), 2u);
    EXPECT_THROW((PhaseSchedule{100, 0.3, 0.2}.validate()), std::invalid_argument);
}

TEST(Trainer, TrainableGroupsPerPhase) {
    using G = ParamGroup;
    auto on = [](const GroupMask& m, G g) { return m[static_cast<std::size_t>(g)]; };
    const GroupMask d = trainable_groups(Phase::Diffuse);
    EXPECT_TRUE(on(d, G::MainPosition) && on(d, G::MainSh) && on(d, G::MainField));
    EXPECT_FALSE(on(d, G::MainTint) || on(d, G::EnvSplats) || on(d, G::EnvField));
    const GroupMask s = trainable_groups(Phase::Specular);
    EXPECT_TRUE(on(s, G::MainTint) && on(s, G::EnvSplats) && on(s, G::EnvField));
    EXPECT_FALSE(on(s, G::MainPosition) || on(s, G::MainSh) || on(s, G::MainField));
    const GroupMask j = trainable_groups(Phase::Joint);
    EXPECT_TRUE(std::all_of(j.begin(), j.end(), [](bool b) { return b; }));
    EXPECT_TRUE(on(trainable_groups(Phase::Diffuse, true), G::MainTint));
}

TEST(Trainer, AdamMatchesHandComputation) {
    Rng rng(1);
    Scene s = random_scene(rng, {2, 1, false});
    const ParamLayout L = ParamLayout::of(s);
    std::vector<double> x = flatten_parameters(s);
    const std::vector<double> x0 = x;
    std::vector<double> g(x.size());
    for (double& v : g) v = uniform(rng, -1, 1);
    OptimizerState st;
    LearningRates lr;
    AdamConfig adam;
    GroupMask mask{};
    mask[static_cast<std::size_t>(ParamGroup::MainPosition)] = true;
    optimizer_step(x, g, st, lr, adam, mask, L);
    // First step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
    EXPECT_NEAR(x[0], x0[0] - lr.position * g[0] / (std::abs(g[0]) + adam.eps), 1e-15);
    EXPECT_EQ(x[3], x0[3]);
    EXPECT_EQ(x[L.env_offset()], x0[L.env_offset()]);

    // Second step against a direct transcription of the update rule.
    const double g1 = g[1];
    const double m1 = (1 - adam.beta1) * g1, v1 = (1 - adam.beta2) * g1 * g1;
    const double g2 = 0.3;
    const double m2 = adam.beta1 * m1 + (1 - adam.beta1) * g2;
    const double v2 = adam.beta2 * v1 + (1 - adam.beta2) * g2 * g2;
    const double mh = m2 / (1 - adam.beta1 * adam.beta1), vh = v2 / (1 - adam.beta2 * adam.beta2);
    const double before = x[1];
    g[1] = g2;
    optimizer_step(x, g, st, lr, adam, mask, L);
    EXPECT_NEAR(x[1], before - lr.position * mh / (std::sqrt(vh) + adam.eps), 1e-15);
    EXPECT_EQ(st.steps[static_cast<std::size_t>(ParamGroup::MainPosition)], 2u);
    EXPECT_EQ(st.steps[static_cast<std::size_t>(ParamGroup::MainSh)], 0u);
}

TEST(Trainer, OptimizerRenormalizesQuaternions) {
    Rng rng(2);
    Scene s = random_scene(rng, {3, 2, false});
    const ParamLayout L = ParamLayout::of(s);
    std::vector<double> x = flatten_parameters(s);
    std::vector<double> g(x.size(), 1.0);
    OptimizerState st;
    LearningRates lr;
    lr.rotation = 0.3;
    optimizer_step(x, g, st, lr, {}, trainable_groups(Phase::Joint), L);
    for (std::size_t off : L.quaternion_offsets()) {
        const double n = std::sqrt(x[off] * x[off] + x[off + 1] * x[off + 1] + x[off + 2] * x[off + 2] +
                                   x[off + 3] * x[off + 3]);
        EXPECT_NEAR(n, 1.0, 1e-15);
    }
}

TEST(Trainer, PruneDropsFaintSplatsAndKeepsState) {
    Rng rng(3);
    Scene s = random_scene(rng, {6, 4, false});
    s.main[1].opacity_logit = logit(0.001);
    s.main[4].opacity_logit = logit(0.002);
    s.env[2].opacity_logit = logit(0.001);
    const std::vector<double> keep_center{s.main[2].center.x, s.main[5].center.x};
    OptimizerState st;
    st.resize(ParamLayout::of(s).total());
    for (std::size_t i = 0; i < st.m.size(); ++i) st.m[i] = static_cast<double>(i);
    const PruneResult r = prune(s, 0.005, 5, &st);
    // min_count 5 stops main pruning after one removal (the faintest).
    EXPECT_EQ(r.removed_main, 1u);
    EXPECT_EQ(r.removed_env, 0u);
    ASSERT_EQ(s.main.size(), 5u);
    EXPECT_EQ(s.main[1].center.x, keep_center[0]);
    EXPECT_EQ(st.m.size(), ParamLayout::of(s).total());
    EXPECT_EQ(st.m[kMainStride], static_cast<double>(2 * kMainStride));
    const PruneResult r2 = prune(s, 0.005, 0, &st);
    EXPECT_EQ(r2.removed_main, 1u);
    EXPECT_EQ(r2.removed_env, 1u);
    EXPECT_EQ(s.main[3].center.x, keep_center[1]);
}

TEST(Trainer, ConfigParsing) {
    const TrainConfig c = train_config_from_json(
        R"({"steps": 500, "diffuse_end": 0.1, "lr": {"sh": 0.01}, "lambda_norm": 0.2, "k": 8, "patch": 32,
            "frames": [1, 2], "flip_normals": false})");
    EXPECT_EQ(c.schedule.total_steps, 500u);
    EXPECT_EQ(c.schedule.diffuse_end, 0.1);
    EXPECT_EQ(c.rates.sh, 0.01);
    EXPECT_EQ(c.weights.lambda_norm, 0.2);
    EXPECT_EQ(c.trace.k, 8u);
    EXPECT_EQ(c.patch, 32);
    EXPECT_EQ(c.frames, (std::vector<std::size_t>{1, 2}));
    EXPECT_FALSE(c.render.flip_normals);
    EXPECT_TRUE(TrainConfig{}.render.flip_normals);
    EXPECT_THROW(train_config_from_json(R"({"stpes": 5})"), ParseError);
    const std::vector<std::string> extra{"dataset"};
    EXPECT_NO_THROW(train_config_from_json(R"({"dataset": "x"})", extra));
    EXPECT_THROW(train_config_from_json(R"({"patch": 5})"), std::invalid_argument);
}

TEST(Trainer, HeldOutSplit) {
    EXPECT_EQ(test_frames(17), (std::vector<std::size_t>{0, 8, 16}));
    EXPECT_EQ(train_frames(10).size(), 8u);
    EXPECT_EQ(test_frames(1), (std::vector<std::size_t>{0}));
}

TEST(Trainer, FrozenGroupsStayBitIdentical) {
    const SmallData& d = small_data();
    TrainConfig c = small_config(40);
    std::size_t violations = 0, steps = 0;
    train(d.data, d.init, c, [&](const StepRecord& r, std::span<const double> before, std::span<const double> after,
                                 const ParamLayout& layout) {
        ++steps;
        const GroupMask mask = trainable_groups(r.phase);
        for (std::size_t i = 0; i < before.size(); ++i)
            if (!mask[static_cast<std::size_t>(layout.group(i))] && before[i] != after[i]) ++violations;
    });
    EXPECT_EQ(steps, 40u);
    EXPECT_EQ(violations, 0u);
}

TEST(Trainer, DeterministicForAFixedSeed) {
    const SmallData& d = small_data();
    TrainConfig c = small_config(12);
    c.patch = 16;
    const auto a = train(d.data, d.init, c);
    const auto b = train(d.data, d.init, c);
    EXPECT_EQ(parameter_checksum(flatten_parameters(a.scene)), parameter_checksum(flatten_parameters(b.scene)));
    ASSERT_EQ(a.log.size(), 12u);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        EXPECT_EQ(a.log[i].frame, b.log[i].frame);
        EXPECT_EQ(a.log[i].loss.total, b.log[i].loss.total);
    }
    c.seed = 12;
    const auto e = train(d.data, d.init, c);
    EXPECT_NE(parameter_checksum(flatten_parameters(a.scene)), parameter_checksum(flatten_parameters(e.scene)));
}

TEST(Trainer, LossDecreasesAndOutputsAreWritten) {
    const SmallData& d = small_data();
    TrainConfig c = small_config(60);
    c.out_dir = fs::temp_directory_path() / "specsplat_test_train_out";
    c.checkpoint_interval = 30;
    fs::remove_all(c.out_dir);
    const auto r = train(d.data, d.init, c);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 5; ++i) first += r.log[i].loss.photometric;
    for (std::size_t i = r.log.size() - 5; i < r.log.size(); ++i) last += r.log[i].loss.photometric;
    EXPECT_LT(last, first);
    EXPECT_TRUE(fs::exists(c.out_dir / "train_log.csv"));
    EXPECT_TRUE(fs::exists(c.out_dir / "checkpoint_000030.json"));
    EXPECT_TRUE(fs::exists(c.out_dir / "final_scene.json"));
    EXPECT_EQ(flatten_parameters(load_scene(c.out_dir / "final_scene.json")), flatten_parameters(r.scene));
}

TEST(Trainer, EvaluationHelpers) {
    const SmallData& d = small_data();
    RenderSettings rs;
    rs.flip_normals = true;
    rs.background = d.data.background;
    TraceSettings ts;
    ts.epsilon = reflection_epsilon(d.init);
    const auto frames = test_frames(d.data.cameras.size());
    const EvalReport rep = evaluate_frames(d.init, d.data, frames, rs, ts, true);
    ASSERT_EQ(rep.frames.size(), frames.size());
    EXPECT_GT(rep.mean_psnr, 5.0);
    const double err = normal_error_deg(d.init, d.data, frames, rs);
    EXPECT_GE(err, 0.0);
    EXPECT_LE(err, 180.0);
}
