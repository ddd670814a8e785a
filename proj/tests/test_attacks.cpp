#include "helpers.hpp"

#include "red/attacks.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace red;
using red::testing::random_image;
using red::testing::tiny_arch;

TEST(Budget, PixelsFloorWithRepresentationSlack)
{
    EXPECT_EQ(budget_pixels(0.3, 30, 30), 270);
    EXPECT_EQ(budget_pixels(0.1, 30, 30), 90);
    EXPECT_EQ(budget_pixels(0.05, 30, 30), 45);
    EXPECT_EQ(budget_pixels(0.25, 30, 30), 225);
}

TEST(Shape, RectangleDims)
{
    EXPECT_EQ(rectangle_dims(90), (std::pair<int, int>{9, 10}));
    EXPECT_EQ(rectangle_dims(270), (std::pair<int, int>{15, 18}));
    EXPECT_EQ(rectangle_dims(36), (std::pair<int, int>{6, 6}));
    for (int b = 1; b <= 400; ++b) {
        const auto [h, w] = rectangle_dims(b);
        EXPECT_LE(h * w, b);
        EXPECT_LE(h, w);
        EXPECT_LE(w, std::max(2 * h, 2));
    }
}

TEST(Shape, TriangleAreaNearBudget)
{
    const Mask m = make_mask(AttackShape::triangle, 50, {0, 0}, 30);
    EXPECT_GE(m.area(), 40);
    EXPECT_LE(m.area(), 50);
}

TEST(Shape, CircleAreaNearDisc)
{
    for (int b : {30, 60, 90, 150, 270}) {
        const int r = circle_radius(b);
        if (r < 3) {
            continue;
        }
        const Mask m = make_mask(AttackShape::circle, b, {0, 0}, 30);
        EXPECT_LE(m.area(), b);
        EXPECT_NEAR(m.area(), M_PI * r * r, 0.1 * M_PI * r * r) << "r=" << r;
    }
}

TEST(Shape, MasksRespectBudget)
{
    for (auto s : {AttackShape::rectangle, AttackShape::triangle, AttackShape::circle}) {
        for (double w : {0.02, 0.05, 0.1, 0.25, 0.3}) {
            const int b = budget_pixels(w, 30, 30);
            EXPECT_LE(make_mask(s, b, {0, 0}, 30).area(), b);
        }
    }
}

TEST(Shape, DoesNotFitThrows)
{
    EXPECT_THROW(make_mask(AttackShape::rectangle, 270, {20, 20}, 30), ValidationError);
    EXPECT_THROW(make_mask(AttackShape::rectangle, 0, {0, 0}, 30), ValidationError);
    EXPECT_THROW(parse_shape("hexagon"), ParseError);
    EXPECT_EQ(parse_shape("multi"), AttackShape::multi);
}

TEST(Sticker, BarsDisjointAndSized)
{
    const auto bars = sticker_masks(30);
    ASSERT_EQ(bars.size(), 2u);
    EXPECT_FALSE(bars[0].intersects(bars[1]));
    const double frac = (bars[0].area() + bars[1].area()) / 900.0;
    EXPECT_GE(frac, 0.08);
    EXPECT_LE(frac, 0.20);
    const auto big = sticker_masks(60);
    const double ratio = (big[0].area() + big[1].area()) / static_cast<double>(bars[0].area() + bars[1].area());
    EXPECT_NEAR(ratio, 4.0, 0.5);
    EXPECT_THROW(sticker_masks(19), ValidationError);
}

TEST(Pgd, ZeroEpsilonLeavesImage)
{
    const Classifier f(tiny_arch(30, 3), 1);
    const Image x = random_image(30, 30, 2);
    AttackSpec spec;
    spec.eps = 0.0;
    const auto r = pgd_patch(f, x, 0, make_mask(AttackShape::rectangle, 90, {3, 3}, 30), spec);
    EXPECT_EQ(r.image, x);
    EXPECT_EQ(r.steps, 0);
}

TEST(Pgd, LinearModelSingleStepClosedForm)
{
    // logits = W x + b: d CE(0) / dx = p1 (W1 - W0), so one signed step moves each pixel by eps
    // in the direction of W1 - W0
    const Architecture arch{8, 2, {}, 0};
    const Classifier f(arch, 3);
    const Image x(8, 8, 0.5);
    Mask mask(8, 8);
    mask.set(2, 5);
    AttackSpec spec;
    spec.eps = 0.3;
    spec.step = 0.5;
    spec.iterations = 1;
    spec.stop_on_success = false;
    const auto r = pgd_patch(f, x, 0, mask, spec);
    const auto w = f.params();
    const int in = 3 * 64;
    for (int c = 0; c < 3; ++c) {
        const std::size_t j = static_cast<std::size_t>(c) * 64 + 2 * 8 + 5;
        const double dir = w[in + j] - w[j];
        EXPECT_DOUBLE_EQ(r.image.data[j], 0.5 + (dir > 0 ? 0.3 : -0.3));
    }
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (j % 64 != 2 * 8 + 5) {
            EXPECT_EQ(r.image.data[j], x.data[j]);
        }
    }
}

TEST(Pgd, ObserverSeesProjectedIterates)
{
    const Classifier f(tiny_arch(30, 3), 4);
    const Image x = random_image(30, 30, 5);
    const Mask mask = make_mask(AttackShape::circle, 60, {10, 4}, 30);
    AttackSpec spec;
    spec.eps = 0.1;
    spec.step = 0.04;
    spec.iterations = 12;
    spec.stop_on_success = false;
    const auto defense = Defense::ablated("t", {AblationKind::tile, 10, 1, 0}, 30);
    int calls = 0;
    const PgdObserver obs = [&](const Image& xp, const Image& d, int) {
        ++calls;
        for (std::size_t j = 0; j < xp.size(); ++j) {
            const std::size_t i = j % x.plane();
            if (!mask.bits[i]) {
                ASSERT_EQ(xp.data[j], x.data[j]);
            }
            ASSERT_LE(std::abs(d.data[j]), spec.eps);
            ASSERT_GE(xp.data[j], 0.0);
            ASSERT_LE(xp.data[j], 1.0);
        }
    };
    (void)pgd_patch(f, x, 1, mask, spec, &defense, obs);
    EXPECT_EQ(calls, 12);
}

TEST(Search, StrideSideEqualsOriginPgd)
{
    const Classifier f(tiny_arch(30, 3), 6);
    const Image x = random_image(30, 30, 7);
    AttackSpec spec;
    spec.iterations = 5;
    spec.step = 0.05;
    spec.stride = 30;
    const auto s = attack_location_search(f, x, 0, spec);
    const auto p = pgd_patch(f, x, 0, make_mask(AttackShape::rectangle, 90, {0, 0}, 30), spec);
    EXPECT_EQ(s.image, p.image);
    EXPECT_EQ(s.anchor, (Anchor{0, 0}));
}

TEST(Search, ReturnsBestAnchor)
{
    const Classifier f(tiny_arch(30, 3), 8);
    const Image x = random_image(30, 30, 9);
    AttackSpec spec;
    spec.iterations = 3;
    spec.step = 0.05;
    spec.stride = 7;
    spec.stop_on_success = false;
    const auto best = attack_location_search(f, x, 2, spec);
    for (const auto& a : anchor_grid(30, 9, 10, 7)) {
        const auto r = pgd_patch(f, x, 2, make_mask(AttackShape::rectangle, 90, a, 30), spec);
        EXPECT_FALSE(detail::better(r.success, r.objective, best.success, best.objective));
    }
}

TEST(Search, AnchorGridAndStride)
{
    EXPECT_EQ(anchor_grid(30, 15, 18, 5).size(), 4u * 3u);
    AttackSpec spec;
    const auto d = Defense::ablated("t", {AblationKind::tile, 10, 1, 0}, 30);
    EXPECT_EQ(search_stride(spec, &d), 5);
    EXPECT_EQ(search_stride(spec, nullptr), 4);
}

TEST(Multi, OneSubPatchChangesAtMostOneTile)
{
    const Classifier f(tiny_arch(30, 3), 10);
    const AblationSpec g{AblationKind::tile, 10, 1, 0};
    const auto tiles = tile_keep_masks(30, 30, 10);
    AttackSpec spec;
    spec.iterations = 20;
    spec.step = 0.1;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Image x = random_image(30, 30, 20 + s);
        const int y = vote_predict(f, x, tiles).predicted;
        const auto r = multi_patch_attack(f, x, y, 36.0 / 900.0, 6, g, spec);
        int changed = 0;
        for (const auto& t : tiles) {
            changed += f.predict(apply_mask(x, t)) != f.predict(apply_mask(r.image, t)) ? 1 : 0;
        }
        EXPECT_LE(changed, 1);
        EXPECT_LE(r.mask.area(), 36);
    }
}

TEST(Multi, BudgetLaw)
{
    const Classifier f(tiny_arch(30, 3), 11);
    const AblationSpec g{AblationKind::tile, 10, 1, 0};
    AttackSpec spec;
    spec.iterations = 10;
    spec.step = 0.1;
    const Image x = random_image(30, 30, 12);
    const int y = vote_predict(f, x, g).predicted;
    const auto r = multi_patch_attack(f, x, y, 0.3, 6, g, spec);
    EXPECT_LE(r.mask.area(), 270);
    EXPECT_EQ(r.mask.area() % 36, 0);
    EXPECT_LE(r.mask.area() / 36, 7);
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (!r.mask.bits[j % x.plane()]) {
            EXPECT_EQ(r.image.data[j], x.data[j]);
        }
    }
    EXPECT_THROW(multi_patch_attack(f, x, y, 0.03, 6, g, spec), ValidationError);
    EXPECT_THROW(multi_patch_attack(f, x, y, 0.3, 11, g, spec), ValidationError);
    EXPECT_THROW(multi_patch_attack(f, x, y, 0.3, 6, {AblationKind::band, 4, 1, 0}, spec), ValidationError);
}

TEST(Dispatch, MultiWithoutTilesFallsBackToRectangle)
{
    const Classifier f(tiny_arch(30, 3), 13);
    const Image x = random_image(30, 30, 14);
    AttackSpec spec;
    spec.shape = AttackShape::multi;
    spec.iterations = 3;
    spec.step = 0.05;
    const auto r = run_attack(f, x, 0, spec, Defense::plain(30));
    EXPECT_LE(r.mask.area(), 90);
    EXPECT_EQ(r.mask.area(), 90);
}

TEST(Dispatch, StickerUsesBothBars)
{
    const Classifier f(tiny_arch(30, 3), 15);
    const Image x = random_image(30, 30, 16);
    AttackSpec spec;
    spec.shape = AttackShape::sticker;
    spec.iterations = 2;
    const auto bars = sticker_masks(30);
    const auto r = run_attack(f, x, 0, spec, Defense::plain(30));
    EXPECT_EQ(r.mask.area(), bars[0].area() + bars[1].area());
}
