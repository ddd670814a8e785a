#include "helpers.hpp"

#include "red/compositing.hpp"
#include "red/dataio.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace red;
using red::testing::rel_err;

namespace {

ColorModel identity_color()
{
    // 3 -> 6 -> 6 -> 3 with ReLU passing [0,1] inputs through unchanged
    ColorModel m;
    m.condition = "identity";
    DenseLayer l1{3, 6, std::vector<double>(18, 0.0), std::vector<double>(6, 0.0)};
    DenseLayer l2{6, 6, std::vector<double>(36, 0.0), std::vector<double>(6, 0.0)};
    DenseLayer l3{6, 3, std::vector<double>(18, 0.0), std::vector<double>(3, 0.0)};
    for (int c = 0; c < 3; ++c) {
        l1.weight[c * 3 + c] = 1.0;
        l2.weight[c * 6 + c] = 1.0;
        l3.weight[c * 6 + c] = 1.0;
    }
    m.layers = {l1, l2, l3};
    return m;
}

} // namespace

TEST(Pattern, CellBoundsSplitRemainderFirst)
{
    EXPECT_EQ(cell_bounds(30, 3), (std::vector<int>{0, 10, 20, 30}));
    EXPECT_EQ(cell_bounds(32, 3), (std::vector<int>{0, 11, 22, 32}));
    EXPECT_EQ(cell_bounds(30, 1), (std::vector<int>{0, 30}));
}

TEST(Pattern, FlatGridRendersConstant)
{
    const auto grid = PatternGrid::flat({0.2, 0.5, 0.9});
    const Image img = render_pattern(grid, 30);
    for (int y = 0; y < 30; ++y) {
        for (int x = 0; x < 30; ++x) {
            EXPECT_NEAR(img.at(0, y, x), 0.2, 1e-5);
            EXPECT_NEAR(img.at(2, y, x), 0.9, 1e-5);
        }
    }
}

TEST(Pattern, Grid3HasNineConstantBlocks)
{
    Rng rng(1);
    const auto set = PatternSet::random(1, 3, rng);
    const Image img = render_pattern(set.at(0), 30);
    for (int y = 0; y < 30; ++y) {
        for (int x = 0; x < 30; ++x) {
            const Rgb want = set.at(0).color(y / 10, x / 10);
            for (int c = 0; c < 3; ++c) {
                EXPECT_DOUBLE_EQ(img.at(c, y, x), want[c]);
            }
        }
    }
}

TEST(Pattern, PerturbingOneCellOnlyChangesItsBlock)
{
    Rng rng(2);
    auto grid = PatternSet::random(1, 5, rng).at(0);
    const Image before = render_pattern(grid, 30);
    grid.param(2, 3, 1) += 1e-3;
    const Image after = render_pattern(grid, 30);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 30; ++y) {
            for (int x = 0; x < 30; ++x) {
                const bool inside = y >= 12 && y < 18 && x >= 18 && x < 24 && c == 1;
                if (inside) {
                    EXPECT_NE(before.at(c, y, x), after.at(c, y, x));
                } else {
                    EXPECT_EQ(before.at(c, y, x), after.at(c, y, x));
                }
            }
        }
    }
}

TEST(Pattern, UnsupportedGridSizeThrows)
{
    EXPECT_THROW(PatternGrid(4), ValidationError);
    EXPECT_NO_THROW(PatternGrid(10));
}

TEST(Warp, IdentityIsBitExact)
{
    const Image img = red::testing::random_image(30, 30, 3);
    EXPECT_EQ(warp(img, Homography::identity()), img);
}

TEST(Warp, IntegerTranslationShiftsColumns)
{
    const Image img = red::testing::random_image(12, 12, 4);
    const Image out = warp(img, Homography::translation(2, 0));
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 12; ++y) {
            EXPECT_EQ(out.at(c, y, 0), 0.0);
            EXPECT_EQ(out.at(c, y, 1), 0.0);
            for (int x = 2; x < 12; ++x) {
                EXPECT_DOUBLE_EQ(out.at(c, y, x), img.at(c, y, x - 2));
            }
        }
    }
}

TEST(Warp, RoundTripIsCloseOnInterior)
{
    // smooth image so bilinear resampling is nearly lossless
    Image img(30, 30);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 30; ++y) {
            for (int x = 0; x < 30; ++x) {
                img.at(c, y, x) = 0.5 + 0.4 * std::sin(0.2 * x + 0.1 * c) * std::cos(0.15 * y);
            }
        }
    }
    const Homography h = Homography::from({0.95, 0.05, 1.0, -0.04, 0.97, 0.5, 0.001, -0.001, 1.0});
    const Image back = warp(warp(img, h), h.inverse());
    double worst = 0.0;
    for (int c = 0; c < 3; ++c) {
        for (int y = 5; y < 25; ++y) {
            for (int x = 5; x < 25; ++x) {
                worst = std::max(worst, std::abs(back.at(c, y, x) - img.at(c, y, x)));
            }
        }
    }
    EXPECT_LT(worst, 0.05);
}

TEST(Warp, SingularHomographyThrows)
{
    EXPECT_THROW(Homography::from({1, 2, 0, 2, 4, 0, 0, 0, 1}), ValidationError);
    EXPECT_THROW(Homography::from({1, 0, 0, 0, 1, 0, 0, 0, 0}), ValidationError);
}

TEST(Warp, BackwardIsTranspose)
{
    const Homography h = Homography::from({0.9, 0.1, 1.2, -0.1, 0.92, 0.3, 0.002, 0.001, 1.0});
    const auto plan = make_warp_plan(h, 16, 16, 16, 16);
    const Image u = red::testing::random_image(16, 16, 5);
    const Image v = red::testing::random_image(16, 16, 6);
    const Image wu = warp(plan, u);
    const Image wtv = warp_backward(plan, v);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        lhs += wu.data[i] * v.data[i];
        rhs += u.data[i] * wtv.data[i];
    }
    EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Composite, IdentityTransformsReproduceSign)
{
    const auto tmpl = make_template(0, 30, Silhouette::circle, 12);
    const auto grid = PatternGrid::flat({0.3, 0.6, 0.1});
    const Image out = composite(grid, tmpl, Homography::identity(), identity_color());
    const Image expect = compose_sign(render_pattern(grid, 30), tmpl);
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_NEAR(out.data[i], expect.data[i], 1e-12);
    }
}

TEST(Composite, NoBackgroundMeansZeroPatternGradient)
{
    auto tmpl = make_template(0, 20, Silhouette::octagon, 12);
    tmpl.foreground |= tmpl.background;
    tmpl.background = Mask(20, 20);
    const auto grid = PatternGrid::flat({0.3, 0.6, 0.1});
    CompositeCache cache;
    const auto color = identity_color();
    const Image out = composite(grid, tmpl, Homography::identity(), color, &cache);
    const Image g(20, 20, 1.0);
    for (double v : composite_backward(cache, grid, tmpl, color, g)) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(Composite, GradientMatchesFiniteDifferences)
{
    const auto& conds = default_conditions();
    const auto tmpl = make_template(1, 20, Silhouette::diamond, 34);
    for (int trial = 0; trial < 5; ++trial) {
        Rng rng(100 + trial);
        auto grid = PatternSet::random(1, 3, rng).at(0);
        const Capture cap = random_capture(rng, 20, static_cast<int>(conds.size()));
        const Image w = red::testing::random_image(20, 20, 200 + trial);
        auto objective = [&](const PatternGrid& gr) {
            const Image out = capture_image(gr, tmpl, cap, conds);
            double s = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) {
                s += w.data[i] * out.data[i];
            }
            return s;
        };
        CompositeCache cache;
        (void)capture_image(grid, tmpl, cap, conds, &cache);
        const auto analytic = composite_backward(cache, grid, tmpl, conds[cap.condition], w, ClipGradient::exact);
        std::vector<double> numeric(grid.params.size());
        const double h = 1e-6;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            auto p = grid, m = grid;
            p.params[i] += h;
            m.params[i] -= h;
            numeric[i] = (objective(p) - objective(m)) / (2 * h);
        }
        EXPECT_LT(rel_err(analytic, numeric), 1e-3) << "trial " << trial;
    }
}

TEST(Composite, OutputInUnitRange)
{
    const auto& conds = default_conditions();
    const auto tmpls = synth_templates(4, 30);
    Rng rng(9);
    const auto set = PatternSet::random(4, 10, rng, 3.0);
    for (int k = 0; k < 4; ++k) {
        const Capture cap = random_capture(rng, 30, static_cast<int>(conds.size()));
        EXPECT_TRUE(in_unit_range(capture_image(set.at(k), tmpls[k], cap, conds)));
    }
}

TEST(Composite, UnknownConditionThrows)
{
    const auto tmpl = make_template(0, 20, Silhouette::circle, 12);
    Capture cap;
    cap.condition = 99;
    EXPECT_THROW(capture_image(PatternGrid::flat({0.5, 0.5, 0.5}), tmpl, cap, default_conditions()), ValidationError);
}

TEST(Color, FitsIdentityAndShift)
{
    for (const LightingTransform& t : {LightingTransform{"id", {1, 1, 1}, {0, 0, 0}, 1.0},
                                       LightingTransform{"shift", {1, 1, 1}, {0.1, 0.05, -0.05}, 1.0}}) {
        const auto model = fit_color_model(calibration_pairs(t), t.name);
        EXPECT_LT(model.fit_mse, 1e-3) << t.name;
    }
}

TEST(Color, TooFewPairsThrows)
{
    std::vector<ColorPair> pairs(5, ColorPair{{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}});
    EXPECT_THROW(fit_color_model(pairs, "x"), ValidationError);
}

TEST(Color, FitIsDeterministic)
{
    const auto pairs = calibration_pairs(lighting_roster()[2]);
    EXPECT_EQ(fit_color_model(pairs, "dusk"), fit_color_model(pairs, "dusk"));
}

TEST(Color, NoonBrighterThanDusk)
{
    const auto& conds = default_conditions();
    ASSERT_EQ(conds[1].condition, "noon");
    ASSERT_EQ(conds[2].condition, "dusk");
    const Rgb grey{0.5, 0.5, 0.5};
    const Rgb noon = conds[1].apply(grey);
    const Rgb dusk = conds[2].apply(grey);
    EXPECT_GT(noon[0] + noon[1] + noon[2], dusk[0] + dusk[1] + dusk[2]);
}

TEST(Color, RosterFitsAreAccurate)
{
    for (const auto& m : default_conditions()) {
        EXPECT_LT(m.fit_mse, 1e-3) << m.condition;
    }
}

TEST(Color, BackwardMatchesFiniteDifferences)
{
    const auto& m = default_conditions()[3];
    const Rgb in{0.3, 0.55, 0.8};
    const Rgb dout{0.7, -0.2, 0.4};
    const Rgb din = m.backward(in, dout);
    for (int i = 0; i < 3; ++i) {
        Rgb p = in, q = in;
        p[i] += 1e-6;
        q[i] -= 1e-6;
        const Rgb op = m.apply(p), oq = m.apply(q);
        double fd = 0.0;
        for (int c = 0; c < 3; ++c) {
            fd += dout[c] * (op[c] - oq[c]) / 2e-6;
        }
        EXPECT_NEAR(din[i], fd, 1e-5);
    }
}
