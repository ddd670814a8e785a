#include "red/ablation.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace red;

namespace {

// Brute force: most tiles any b x b patch (any placement on the tile lattice) can touch.
int brute_max_tiles(int a, int b)
{
    const int side = 4 * a + 2 * b;
    const auto tiles = tile_keep_masks(side, side, a);
    int worst = 0;
    for (int top = 0; top + b <= side; ++top) {
        for (int left = 0; left + b <= side; ++left) {
            const Mask patch = square_keep_mask(side, side, top, left, b);
            int n = 0;
            for (const auto& t : tiles) {
                n += t.intersects(patch) ? 1 : 0;
            }
            worst = std::max(worst, n);
        }
    }
    return worst;
}

} // namespace

TEST(Tile, CountsFollowFloorDivision)
{
    EXPECT_EQ(tile_keep_masks(30, 30, 10).size(), 9u);
    EXPECT_EQ(tile_keep_masks(30, 30, 8).size(), 9u);
    EXPECT_EQ(tile_keep_masks(30, 30, 30).size(), 1u);
    EXPECT_EQ(tile_keep_masks(30, 30, 1).size(), 900u);
}

TEST(Tile, RemainderIsNeverKept)
{
    const auto masks = tile_keep_masks(30, 30, 8);
    Mask covered(30, 30);
    for (const auto& m : masks) {
        covered |= m;
    }
    EXPECT_EQ(covered.area(), 24 * 24);
    EXPECT_FALSE(covered.at(24, 0));
    EXPECT_FALSE(covered.at(0, 29));
}

TEST(Tile, MasksAreDisjointSquares)
{
    const auto masks = tile_keep_masks(30, 30, 10);
    for (std::size_t i = 0; i < masks.size(); ++i) {
        EXPECT_EQ(masks[i].area(), 100);
        for (std::size_t j = i + 1; j < masks.size(); ++j) {
            EXPECT_FALSE(masks[i].intersects(masks[j]));
        }
    }
}

TEST(Band, EveryColumnCoveredExactlyWTimes)
{
    const int w = 4;
    const auto masks = band_keep_masks(30, 30, w);
    ASSERT_EQ(masks.size(), 30u);
    for (int x = 0; x < 30; ++x) {
        int n = 0;
        for (const auto& m : masks) {
            n += m.at(7, x) ? 1 : 0;
        }
        EXPECT_EQ(n, w);
    }
}

TEST(Band, WrapsAround)
{
    const auto masks = band_keep_masks(10, 10, 3);
    EXPECT_TRUE(masks[9].at(0, 9));
    EXPECT_TRUE(masks[9].at(0, 0));
    EXPECT_TRUE(masks[9].at(0, 1));
    EXPECT_FALSE(masks[9].at(0, 2));
}

TEST(Random, EveryTopLeftReachable)
{
    Rng rng(5);
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < 10000; ++i) {
        const Mask m = random_keep_mask(30, 30, 10, rng);
        EXPECT_EQ(m.area(), 100);
        for (int y = 0; y < 30; ++y) {
            bool found = false;
            for (int x = 0; x < 30 && !found; ++x) {
                if (m.at(y, x)) {
                    seen.insert({y, x});
                    found = true;
                }
            }
            if (found) {
                break;
            }
        }
    }
    EXPECT_EQ(seen.size(), 21u * 21u);
}

TEST(Ablate, RemovedPixelsAreZero)
{
    Image x(30, 30, 0.7);
    for (const auto& ab : tile_ablations(x, 10)) {
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < 30; ++y) {
                for (int xx = 0; xx < 30; ++xx) {
                    EXPECT_EQ(ab.image.at(c, y, xx), ab.keep.at(y, xx) ? 0.7 : 0.0);
                }
            }
        }
    }
}

TEST(Ablate, OutsidePatchIsUnchangedByPatch)
{
    // pixels a tile keeps are independent of edits outside that tile
    Image x(30, 30, 0.2);
    Image x2 = x;
    for (int y = 0; y < 10; ++y) {
        for (int xx = 0; xx < 10; ++xx) {
            x2.set_pixel(y, xx, {1, 1, 1});
        }
    }
    const auto a = tile_ablations(x, 10);
    const auto b = tile_ablations(x2, 10);
    for (std::size_t j = 1; j < a.size(); ++j) {
        EXPECT_EQ(a[j].image, b[j].image);
    }
    EXPECT_NE(a[0].image, b[0].image);
}

TEST(Bound, MatchesBruteForce)
{
    for (int a : {6, 10}) {
        for (int b = 5; b <= 15; ++b) {
            EXPECT_EQ(max_tiles_intersected(a, b), brute_max_tiles(a, b)) << "a=" << a << " b=" << b;
        }
    }
}

TEST(Bound, KnownValues)
{
    EXPECT_EQ(max_tiles_intersected(10, 5), 4);
    EXPECT_EQ(max_tiles_intersected(10, 11), 4);
    EXPECT_EQ(max_tiles_intersected(10, 12), 9);
    EXPECT_EQ(max_tiles_intersected(10, 1), 1);
    EXPECT_THROW(max_tiles_intersected(0, 3), ValidationError);
}

TEST(Parse, RoundTripsAllKinds)
{
    EXPECT_EQ(parse_ablation("tile:a=10"), (AblationSpec{AblationKind::tile, 10, 1, 0}));
    EXPECT_EQ(parse_ablation("band:w=4"), (AblationSpec{AblationKind::band, 4, 1, 0}));
    EXPECT_EQ(parse_ablation("random:a=10,m=25,seed=3"), (AblationSpec{AblationKind::random, 10, 25, 3}));
    for (const char* s : {"tile:a=10", "band:w=4", "random:a=10,m=25,seed=3"}) {
        EXPECT_EQ(parse_ablation(s).str(), s);
    }
}

TEST(Parse, RejectsMalformed)
{
    for (const char* s : {"", "tile", "tile:a=0", "tile:a=x", "blob:a=3", "band:a=3,w=", "random:a=10,m=-1"}) {
        EXPECT_THROW(parse_ablation(s), ParseError) << s;
    }
}

TEST(Family, ValidatesSize)
{
    EXPECT_THROW(ablation_family({AblationKind::tile, 31, 1, 0}, 30, 30), ValidationError);
    const auto r1 = ablation_family({AblationKind::random, 10, 5, 7}, 30, 30);
    const auto r2 = ablation_family({AblationKind::random, 10, 5, 7}, 30, 30);
    EXPECT_EQ(r1, r2);
}
