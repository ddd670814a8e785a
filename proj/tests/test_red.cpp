#include "helpers.hpp"

#include "red/inference.hpp"
#include "red/red.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace red;
using red::testing::rel_err;
using red::testing::tiny_arch;

namespace {

const Dataset& small_data()
{
    static const Dataset ds = synth_dataset(3, 4, 20, 5);
    return ds;
}

// Two classes whose signs differ only in the background color that gets learned.
Dataset twin_dataset(int n, std::uint64_t seed)
{
    auto t0 = make_template(0, 30, Silhouette::circle, 50);
    auto t1 = make_template(1, 30, Silhouette::circle, 50);
    return render_dataset({t0, t1}, n, seed);
}

RedConfig tiny_config(int epochs)
{
    RedConfig cfg;
    cfg.arch = tiny_arch(20, 3);
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg.train.seed = 3;
    return cfg;
}

} // namespace

TEST(RedLoss, UniformLogitsGiveLogK)
{
    const auto& ds = small_data();
    const Classifier f(tiny_arch(20, 3), 1);
    const Classifier zero = Classifier::from_params(f.arch(), std::vector<double>(f.param_count(), 0.0));
    Rng rng(1);
    const auto set = PatternSet::random(3, 3, rng);
    const auto masks = tile_keep_masks(20, 20, 10);
    const std::vector<LabeledExample> one{ds.examples[0]};
    EXPECT_NEAR(red_loss(zero, set, one, {Mask(20, 20, true)}, ds.templates, ds.conditions), std::log(3.0), 1e-12);
    EXPECT_NEAR(red_loss(zero, set, ds.examples, masks, ds.templates, ds.conditions),
                static_cast<double>(ds.size() * masks.size()) * std::log(3.0), 1e-9);
}

TEST(RedLoss, PatternGradientMatchesFiniteDifferences)
{
    const auto& ds = small_data();
    const Classifier f(tiny_arch(20, 3), 2);
    Rng rng(2);
    auto set = PatternSet::random(3, 3, rng);
    const auto masks = tile_keep_masks(20, 20, 10);
    const std::vector<LabeledExample> batch{ds.examples[0], ds.examples[5], ds.examples[9]};
    const auto g = red_loss_grad(f, set, batch, masks, ds.templates, ds.conditions, ClipGradient::exact);
    EXPECT_NEAR(g.loss, red_loss(f, set, batch, masks, ds.templates, ds.conditions), 1e-10);
    for (int k = 0; k < 3; ++k) {
        std::vector<double> numeric(set.grids[k].params.size());
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            const double orig = set.grids[k].params[i];
            set.grids[k].params[i] = orig + 1e-6;
            const double lp = red_loss(f, set, batch, masks, ds.templates, ds.conditions);
            set.grids[k].params[i] = orig - 1e-6;
            const double lm = red_loss(f, set, batch, masks, ds.templates, ds.conditions);
            set.grids[k].params[i] = orig;
            numeric[i] = (lp - lm) / 2e-6;
        }
        EXPECT_LT(rel_err(g.patterns[k], numeric), 1e-3) << "class " << k;
    }
}

TEST(RedLoss, AbsentClassHasZeroGradient)
{
    const auto& ds = small_data();
    const Classifier f(tiny_arch(20, 3), 3);
    Rng rng(3);
    const auto set = PatternSet::random(3, 5, rng);
    std::vector<LabeledExample> batch;
    for (const auto& ex : ds.examples) {
        if (ex.label != 1) {
            batch.push_back(ex);
        }
    }
    const auto g = red_loss_grad(f, set, batch, tile_keep_masks(20, 20, 10), ds.templates, ds.conditions);
    for (double v : g.patterns[1]) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(RedLoss, BatchIsSumOfSingletons)
{
    const auto& ds = small_data();
    const Classifier f(tiny_arch(20, 3), 4);
    Rng rng(4);
    const auto set = PatternSet::random(3, 3, rng);
    const auto masks = tile_keep_masks(20, 20, 10);
    const auto whole = red_loss_grad(f, set, ds.examples, masks, ds.templates, ds.conditions);
    double loss = 0.0;
    std::vector<double> model(f.param_count(), 0.0);
    std::vector<std::vector<double>> pats(3, std::vector<double>(27, 0.0));
    for (const auto& ex : ds.examples) {
        const auto g = red_loss_grad(f, set, {ex}, masks, ds.templates, ds.conditions);
        loss += g.loss;
        for (std::size_t i = 0; i < model.size(); ++i) {
            model[i] += g.model[i];
        }
        for (int k = 0; k < 3; ++k) {
            for (std::size_t i = 0; i < 27; ++i) {
                pats[k][i] += g.patterns[k][i];
            }
        }
    }
    EXPECT_NEAR(whole.loss, loss, 1e-9);
    EXPECT_LT(rel_err(whole.model, model), 1e-12);
    for (int k = 0; k < 3; ++k) {
        EXPECT_LT(rel_err(whole.patterns[k], pats[k]), 1e-12);
    }
}

TEST(Schedule, WarmupAndPeriod)
{
    RedSchedule s{2, 3, 10};
    std::vector<int> updated;
    for (int e = 0; e < 10; ++e) {
        if (s.update_model(e)) {
            updated.push_back(e);
        }
    }
    EXPECT_EQ(updated, (std::vector<int>{0, 1, 3, 6, 9}));
    EXPECT_THROW((RedSchedule{5, 1, 3}.validate()), ValidationError);
    EXPECT_THROW((RedSchedule{0, 0, 3}.validate()), ValidationError);
}

TEST(Optimize, FullWarmupEqualsJointSchedule)
{
    const auto cfg = tiny_config(3);
    const auto a = optimize_red(small_data(), {AblationKind::tile, 10, 1, 0}, {3, 1, 3}, cfg);
    const auto b = optimize_red(small_data(), {AblationKind::tile, 10, 1, 0}, {0, 1, 3}, cfg);
    EXPECT_EQ(a.patterns, b.patterns);
    EXPECT_EQ(a.model, b.model);
}

TEST(Optimize, FrozenModelAfterWarmupKeepsParameters)
{
    // period larger than the run: f only changes during warmup
    const auto cfg = tiny_config(3);
    const auto warm = optimize_red(small_data(), {AblationKind::tile, 10, 1, 0}, {1, 100, 1}, cfg);
    const auto longer = optimize_red(small_data(), {AblationKind::tile, 10, 1, 0}, {1, 100, 3}, cfg);
    EXPECT_EQ(warm.model, longer.model);
    EXPECT_FALSE(warm.patterns == longer.patterns);
}

TEST(Optimize, Deterministic)
{
    const auto cfg = tiny_config(2);
    const auto a = optimize_red(small_data(), {AblationKind::tile, 10, 1, 0}, {1, 1, 2}, cfg);
    const auto b = optimize_red(small_data(), {AblationKind::tile, 10, 1, 0}, {1, 1, 2}, cfg);
    EXPECT_EQ(a.patterns, b.patterns);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(Optimize, AttackerAwareWithZeroBudgetMatchesWeightedRed)
{
    auto cfg = tiny_config(2);
    AttackSpec attack;
    attack.eps = 0.0;
    attack.iterations = 2;
    const AblationSpec g{AblationKind::tile, 10, 1, 0};
    const RedSchedule s{1, 1, 2};
    auto red_cfg = cfg;
    red_cfg.loss_weight = 2.0;
    const auto aa = optimize_aa_red(small_data(), g, attack, s, cfg);
    const auto plain = optimize_red(small_data(), g, s, red_cfg);
    EXPECT_EQ(aa.patterns, plain.patterns);
    EXPECT_EQ(aa.model, plain.model);
    EXPECT_EQ(aa.loss_trace, plain.loss_trace);

    cfg.clean_weight = 0.5;
    cfg.adv_weight = 0.5;
    const auto half = optimize_aa_red(small_data(), g, attack, s, cfg);
    const auto unit = optimize_red(small_data(), g, s, tiny_config(2));
    EXPECT_EQ(half.patterns, unit.patterns);
    EXPECT_EQ(half.model, unit.model);
}

TEST(Optimize, LearnsPatternsThatSeparateIdenticalSigns)
{
    const Dataset train = twin_dataset(40, 1);
    const Dataset test = twin_dataset(25, 2);
    RedConfig cfg;
    cfg.arch = red::testing::small_arch(30, 2);
    cfg.train.epochs = 12;
    cfg.train.seed = 7;
    const AblationSpec g{AblationKind::tile, 10, 1, 0};
    const auto res = optimize_red(train, g, {3, 1, 12}, cfg);
    EXPECT_LT(res.loss_trace.back(), res.loss_trace.front());
    const Dataset styled = restyle(test, res.patterns);
    EXPECT_GE(vote_accuracy(res.model, styled.examples, tile_keep_masks(30, 30, 10)), 0.95);
    // with native backgrounds the same shot of either class is the same image
    const auto native = native_patterns(test.templates);
    const Capture& cap = *test.examples[0].capture;
    EXPECT_EQ(capture_image(native.at(0), test.templates[0], cap, test.conditions),
              capture_image(native.at(1), test.templates[1], cap, test.conditions));
}

TEST(Optimize, RejectsUnrenderableData)
{
    Dataset ds = small_data();
    ds.templates.clear();
    EXPECT_THROW(optimize_red(ds, {AblationKind::tile, 10, 1, 0}, {0, 1, 1}, tiny_config(1)), ValidationError);
}
