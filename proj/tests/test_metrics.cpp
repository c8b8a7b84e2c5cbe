#include "micd/error.hpp"
#include "micd/metrics.hpp"
#include "micd/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace micd;

namespace {

LabelMap cube(Dims dims, int lo, int hi, int num_classes = 2, int c = 1)
{
    auto y = LabelMap::zeros(dims, num_classes);
    for (int z = lo; z < hi; ++z)
        for (int yy = lo; yy < hi; ++yy)
            for (int x = lo; x < hi; ++x)
                y.at(z, yy, x) = static_cast<std::uint8_t>(c);
    return y;
}

LabelMap random_blob(Rng& rng, Dims dims, double p)
{
    auto y = LabelMap::zeros(dims, 2);
    for (auto& v : y.data)
        v = rng.uniform() < p;
    return y;
}

} // namespace

TEST_CASE("dice hand cases")
{
    const Dims d{1, 1, 4};
    auto p = LabelMap::zeros(d, 2);
    auto g = LabelMap::zeros(d, 2);
    CHECK(dice_score(p, g, 1) == 1.0);
    p.data = {1, 1, 0, 0};
    CHECK(dice_score(p, g, 1) == 0.0);
    g.data = {1, 1, 0, 0};
    CHECK(dice_score(p, g, 1) == 1.0);
    // |P| = 2, |G| = 1, overlap 1.
    g.data = {1, 0, 0, 0};
    CHECK(dice_score(p, g, 1) == doctest::Approx(2.0 / 3.0));
    CHECK(dice_score(g, p, 1) == dice_score(p, g, 1));
    CHECK_THROWS_AS(dice_score(p, LabelMap::zeros({1, 1, 5}, 2), 1), ShapeError);
}

TEST_CASE("dice agrees with set enumeration and is symmetric")
{
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto a = random_blob(rng, {4, 5, 6}, 0.4);
        const auto b = random_blob(rng, {4, 5, 6}, 0.6);
        CHECK(dice_score(a, b, 1) == doctest::Approx(oracle::brute_dice(a, b, 1)).epsilon(1e-14));
        CHECK(dice_score(a, b, 1) == dice_score(b, a, 1));
        CHECK(dice_score(a, a, 1) == 1.0);
    }
}

TEST_CASE("surface voxels of a solid cube")
{
    const auto y = cube({5, 5, 5}, 1, 4);
    const auto s = surface_voxels(y, 1);
    // A 3x3x3 cube has 26 surface voxels and one interior voxel.
    CHECK(std::count(s.begin(), s.end(), 1) == 26);
    CHECK(s[y.dims.index(2, 2, 2)] == 0);
    CHECK(oracle::surface_points(y, 1).size() == 26);

    // Touching the grid boundary makes a voxel surface.
    const auto full = cube({3, 3, 3}, 0, 3);
    const auto sf = surface_voxels(full, 1);
    CHECK(std::count(sf.begin(), sf.end(), 1) == 26);
}

TEST_CASE("asd simple geometry")
{
    const Dims d{8, 8, 8};
    const auto a = cube(d, 2, 5);
    CHECK(*asd(a, a, 1, {}) == 0.0);
    CHECK(!asd(a, LabelMap::zeros(d, 2), 1, {}));
    CHECK(!asd(LabelMap::zeros(d, 2), LabelMap::zeros(d, 2), 1, {}));

    // A single voxel against its neighbour one step along x.
    auto p = LabelMap::zeros(d, 2);
    auto g = LabelMap::zeros(d, 2);
    p.at(3, 3, 3) = 1;
    g.at(3, 3, 4) = 1;
    CHECK(*asd(p, g, 1, {}) == 1.0);
    CHECK(*asd(p, g, 1, {1.0f, 1.0f, 2.5f}) == 2.5);
    CHECK(*asd(p, g, 1, {2.5f, 1.0f, 1.0f}) == 1.0);
}

TEST_CASE("asd matches the all-pairs oracle on random grids")
{
    Rng rng(11);
    for (int i = 0; i < 60; ++i) {
        const Dims d{1 + static_cast<int>(rng.below(6)), 1 + static_cast<int>(rng.below(6)),
                     1 + static_cast<int>(rng.below(6))};
        const Spacing sp{static_cast<float>(rng.uniform(0.5, 3.0)), static_cast<float>(rng.uniform(0.5, 3.0)),
                         static_cast<float>(rng.uniform(0.5, 3.0))};
        const auto a = random_blob(rng, d, rng.uniform(0.1, 0.9));
        const auto b = random_blob(rng, d, rng.uniform(0.1, 0.9));
        const auto got = asd(a, b, 1, sp);
        const auto want = oracle::brute_asd(a, b, 1, sp);
        REQUIRE(got.has_value() == want.has_value());
        if (got)
            CHECK(*got == doctest::Approx(*want).epsilon(1e-12));
    }
}

TEST_CASE("asd scales linearly with isotropic spacing")
{
    Rng rng(12);
    for (int i = 0; i < 20; ++i) {
        const auto a = random_blob(rng, {6, 6, 6}, 0.3);
        const auto b = random_blob(rng, {6, 6, 6}, 0.3);
        const auto one = asd(a, b, 1, {});
        const auto two = asd(a, b, 1, {2.0f, 2.0f, 2.0f});
        REQUIRE(one);
        CHECK(*two == doctest::Approx(2.0 * *one).epsilon(1e-12));
        CHECK(*asd(b, a, 1, {}) == doctest::Approx(*one).epsilon(1e-12));
    }
}

TEST_CASE("perfect and background-only predictors")
{
    const Dims d{8, 8, 8};
    auto gt = cube(d, 1, 4, 3, 1);
    for (int z = 5; z < 7; ++z)
        for (int y = 5; y < 7; ++y)
            for (int x = 5; x < 7; ++x)
                gt.at(z, y, x) = 2;

    const auto perfect = summarize({case_metrics(gt, gt, {}), case_metrics(gt, gt, {})}, 3);
    CHECK(perfect.avg_dice == 1.0);
    CHECK(*perfect.avg_asd == 0.0);
    CHECK(perfect.volumes == 2);

    const auto bg = summarize({case_metrics(LabelMap::zeros(d, 3), gt, {})}, 3);
    CHECK(bg.avg_dice == 0.0);
    CHECK(!bg.avg_asd);
    CHECK(bg.asd_undefined == std::vector<int>{1, 1});
}

TEST_CASE("summarize averages classes and skips undefined ASD")
{
    CaseMetrics a{{1.0, 0.5}, {2.0, std::nullopt}};
    CaseMetrics b{{0.0, 0.5}, {4.0, 6.0}};
    const auto r = summarize({a, b}, 3, 7);
    CHECK(r.iteration == 7);
    CHECK(r.per_class_dice == std::vector<double>{0.5, 0.5});
    CHECK(*r.per_class_asd[0] == 3.0);
    CHECK(*r.per_class_asd[1] == 6.0);
    CHECK(r.asd_undefined == std::vector<int>{0, 1});
    CHECK(r.avg_dice == 0.5);
    CHECK(*r.avg_asd == 4.5);
    CHECK_THROWS_AS(summarize({}, 3), Error);

    const auto json = report_json(r);
    CHECK(json.find("\"avg_dice\":0.5") != std::string::npos);
    CHECK(json.find("\"asd_undefined\":[0,1]") != std::string::npos);
    const auto table = report_table(r);
    CHECK(table.find("Avg.Dice") != std::string::npos);
    CHECK(table.find("50.00") != std::string::npos);
    CHECK(table.find("4.50") != std::string::npos);
}

TEST_CASE("evaluate runs a network over labeled samples")
{
    const auto params = init_network({1, 3, 2}, 4);
    Sample s;
    s.image = Volume::zeros({8, 8, 8});
    s.label = LabelMap::zeros({8, 8, 8}, 3);
    s.label->at(1, 1, 1) = 1;
    const auto r = evaluate(params, std::vector<Sample>{s, s});
    CHECK(r.volumes == 2);
    CHECK(r.per_class_dice.size() == 2);
    CHECK(std::isfinite(r.avg_dice));

    s.label.reset();
    CHECK_THROWS_AS(evaluate(params, std::vector<Sample>{s}), Error);
    CHECK_THROWS_AS(evaluate(params, std::vector<Sample>{}), Error);
}
