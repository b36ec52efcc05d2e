#include <cmath>

#include <gtest/gtest.h>

#include "proreflow/flowcore.hpp"
#include "proreflow/metrics.hpp"

using namespace proreflow;

namespace {

struct ConstantField {
    double c0, c1;
    Tensor2 operator()(const Tensor2& z, std::span<const double>) const {
        Tensor2 v(z.rows(), z.cols());
        for (std::size_t r = 0; r < z.rows(); ++r) v(r, 0) = c0, v(r, 1) = c1;
        return v;
    }
};

TrainingSetup gauss8_setup(std::uint64_t seed) {
    TrainingSetup s;
    s.dataset = DatasetSpec{DatasetName::gauss8, 2, 4.0, seed};
    return s;
}

StagePlan small_plan(std::vector<std::size_t> windows, std::size_t iters, std::size_t batch = 64) {
    StagePlan p;
    p.window_counts = std::move(windows);
    p.iterations_per_stage = iters;
    p.batch_size = batch;
    return p;
}

double max_abs_diff(const VelocityModel& a, const VelocityModel& b) {
    double d = 0.0;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        for (std::size_t i = 0; i < a.layers[l].weight.size(); ++i)
            d = std::max(d, std::abs(a.layers[l].weight.flat()[i] - b.layers[l].weight.flat()[i]));
        for (std::size_t i = 0; i < a.layers[l].bias.size(); ++i)
            d = std::max(d, std::abs(a.layers[l].bias[i] - b.layers[l].bias[i]));
    }
    return d;
}

double mean_loss(const std::vector<LossRecord>& trace, std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += trace[i].loss;
    return s / double(to - from);
}

// Small teacher shared by the slower tests.
const VelocityModel& small_teacher() {
    static const VelocityModel m = [] {
        const ModelArch arch{2, 8, {32, 32}};
        return train_flow_matching(VelocityModel::random(arch, 1), 1500, 128, gauss8_setup(2), 3).model;
    }();
    return m;
}

} // namespace

TEST(TrainStage, StudentAtOptimumStaysPut) {
    // A constant teacher makes every window chord equal to c, so a student
    // whose output bias is c (and every weight zero) is already optimal.
    const ConstantField teacher{1.25, -0.5};
    auto student = VelocityModel::zeros(ModelArch{});
    student.layers.back().bias = {1.25, -0.5};
    const auto plan = small_plan({4}, 200);
    const auto r = train_stage(student, teacher, WindowSchedule::uniform(4), plan, LossConfig{}, gauss8_setup(1), 7);
    // The first batch sits at the rounding floor. After that Adam divides
    // rounding-sized gradients by sqrt(v) + eps, so the output jitters at
    // learning-rate scale (loss ~ lr^2) without walking away.
    EXPECT_LT(r.trace[0].loss, 1e-28);
    for (const auto& rec : r.trace) EXPECT_LT(rec.loss, 1e-5);
    EXPECT_LT(max_abs_diff(r.model, student), 1e-3);
}

TEST(TrainStage, LossDecreasesOnGauss8) {
    const auto plan = small_plan({4}, 1500);
    const auto r = train_stage(small_teacher(), small_teacher(), WindowSchedule::uniform(4), plan, LossConfig{},
                               gauss8_setup(4), 5);
    ASSERT_EQ(r.trace.size(), 1500u);
    EXPECT_LT(mean_loss(r.trace, 1000, 1500), mean_loss(r.trace, 0, 500));
}

TEST(TrainStage, AlphaChangesOnlyTheLoss) {
    const auto plan = small_plan({4}, 3);
    const auto setup = gauss8_setup(6);
    const auto a = train_stage(small_teacher(), small_teacher(), WindowSchedule::uniform(4), plan, LossConfig{0.0},
                               setup, 9);
    const auto b = train_stage(small_teacher(), small_teacher(), WindowSchedule::uniform(4), plan, LossConfig{0.1},
                               setup, 9);
    // Same student, same couplings: the first batch sees identical terms.
    EXPECT_EQ(a.trace[0].mse_term, b.trace[0].mse_term);
    EXPECT_EQ(a.trace[0].cos_term, b.trace[0].cos_term);
    EXPECT_NE(a.trace[0].loss, b.trace[0].loss);
    const auto s = WindowSchedule::uniform(4);
    for (std::size_t it = 0; it < 3; ++it) {
        const auto x = stage_batch(small_teacher(), s, 8, 64, setup.dataset, 9, it);
        const auto y = stage_batch(small_teacher(), s, 8, 64, setup.dataset, 9, it);
        EXPECT_EQ(x.z_t, y.z_t);
        EXPECT_EQ(x.target, y.target);
    }
}

TEST(TrainStage, DivergenceAbortsWithStageContext) {
    const ConstantField huge{1e4, 0.0};
    try {
        train_stage(VelocityModel::zeros(ModelArch{}), huge, WindowSchedule::uniform(2), small_plan({2}, 5),
                    LossConfig{}, gauss8_setup(1), 1);
        FAIL();
    } catch (const TrainingDiverged& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("K=2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("iteration 0"), std::string::npos) << msg;
    }
}

TEST(TrainStage, BatchTimesInsideWindows) {
    const auto s = WindowSchedule::uniform(8);
    const auto b = stage_batch(small_teacher(), s, 4, 256, gauss8_setup(1).dataset, 3, 0);
    for (std::size_t i = 0; i < b.t.size(); ++i) {
        EXPECT_GE(b.t[i], b.coupling.t_start[i]);
        EXPECT_LE(b.t[i], b.coupling.t_end[i]);
    }
    std::vector<int> seen(8, 0);
    for (auto k : b.coupling.window_index) seen[k] = 1;
    for (int v : seen) EXPECT_EQ(v, 1);
}

TEST(Progressive, OneCheckpointPerStage) {
    std::vector<std::size_t> reported;
    const auto out = progressive_train(small_teacher(), small_plan({8, 4, 2}, 20), LossConfig{}, gauss8_setup(1), 2,
                                       [&](const StageCheckpoint& c) { reported.push_back(c.windows); });
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0].windows, 8u);
    EXPECT_EQ(out[1].windows, 4u);
    EXPECT_EQ(out[2].windows, 2u);
    EXPECT_EQ(reported, (std::vector<std::size_t>{8, 4, 2}));
    for (const auto& c : out) EXPECT_EQ(c.trace.size(), 20u);

    const auto single = progressive_train(small_teacher(), small_plan({1}, 5), LossConfig{}, gauss8_setup(1), 2);
    ASSERT_EQ(single.size(), 1u);
    EXPECT_EQ(single[0].windows, 1u);
    EXPECT_THROW(progressive_train(small_teacher(), small_plan({8, 2}, 5), LossConfig{}, gauss8_setup(1), 2), Error);
}

TEST(Progressive, MergedWindowEndpointsFollowPreviousStudent) {
    const auto stage1 =
        progressive_train(small_teacher(), small_plan({8}, 30), LossConfig{}, gauss8_setup(1), 4)[0].model;
    const auto data = sample_data(gauss8_setup(5).dataset, 128);
    const auto noise = sample_noise(128, 2, 6);
    const auto b = build_window_targets(stage1, WindowSchedule::uniform(4), data, noise, 32 / 4, 7);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.window_index[i] != 0) continue;
        const auto z = gather_rows(b.z_start, std::vector<std::size_t>{i});
        const auto two = teacher_solve(stage1, teacher_solve(stage1, z, 0.0, 0.125, 4), 0.125, 0.25, 4);
        EXPECT_EQ(two.flat()[0], b.z_end(i, 0));
        EXPECT_EQ(two.flat()[1], b.z_end(i, 1));
        ++checked;
    }
    EXPECT_GT(checked, 0u);
}

TEST(Progressive, ReproducibleAndPrefixStable) {
    const auto run = [](std::vector<std::size_t> w) {
        return progressive_train(small_teacher(), small_plan(std::move(w), 15), LossConfig{}, gauss8_setup(3), 8);
    };
    const auto a = run({8, 4, 2});
    const auto b = run({8, 4, 2});
    const auto prefix = run({8, 4});
    for (std::size_t s = 0; s < 3; ++s) {
        EXPECT_EQ(a[s].model, b[s].model);
        EXPECT_EQ(a[s].trace, b[s].trace);
    }
    for (std::size_t s = 0; s < 2; ++s) EXPECT_EQ(a[s].model, prefix[s].model);
}

TEST(FlowMatching, LossDecreasesAndIsReproducible) {
    const ModelArch arch{2, 8, {32, 32}};
    const auto r = train_flow_matching(VelocityModel::random(arch, 1), 1500, 128, gauss8_setup(2), 3);
    EXPECT_EQ(r.model, small_teacher());
    EXPECT_LT(mean_loss(r.trace, 1000, 1500), mean_loss(r.trace, 0, 500));
    for (const auto& rec : r.trace) EXPECT_EQ(rec.cos_term, rec.cos_term); // recorded, never NaN
    EXPECT_THROW(train_flow_matching(VelocityModel::random(arch, 1), 0, 128, gauss8_setup(2), 3), Error);
}

TEST(Straightening, ReflowStageStraightensSmallTeacher) {
    const auto stages =
        progressive_train(small_teacher(), small_plan({2}, 800, 128), LossConfig{}, gauss8_setup(1), 5);
    EXPECT_LT(straightness(stages[0].model, 2, 512, 8, 1), straightness(small_teacher(), 2, 512, 8, 1));
}
