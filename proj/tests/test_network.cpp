#include "micd/error.hpp"
#include "micd/network.hpp"
#include "micd/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace micd;

namespace {

Volume random_volume(Dims d, std::uint64_t seed)
{
    Rng rng(seed);
    auto v = Volume::zeros(d);
    for (auto& x : v.data)
        x = static_cast<float>(rng.normal());
    return v;
}

bool all_finite(const FeatureMap& f)
{
    return std::all_of(f.data.begin(), f.data.end(), [](double v) { return std::isfinite(v); });
}

// A fixed random linear functional of the logits and every decoder stage.
struct ProbeLoss {
    std::vector<double> wl;
    std::array<std::vector<double>, kDecoderStages> wf;

    ProbeLoss(const ForwardOutput& shape, std::uint64_t seed)
    {
        Rng rng(seed);
        wl.resize(shape.logits.size());
        for (auto& v : wl)
            v = rng.normal();
        for (int k = 0; k < kDecoderStages; ++k) {
            wf[k].resize(shape.decoder_features[k].size());
            for (auto& v : wf[k])
                v = rng.normal();
        }
    }

    double value(const ForwardOutput& out) const
    {
        double s = 0.0;
        for (std::size_t i = 0; i < wl.size(); ++i)
            s += wl[i] * std::tanh(out.logits.data[i]);
        for (int k = 0; k < kDecoderStages; ++k)
            for (std::size_t i = 0; i < wf[k].size(); ++i)
                s += wf[k][i] * out.decoder_features[k].data[i];
        return s;
    }

    double operator()(const ForwardOutput& out, OutputGrad& g) const
    {
        for (std::size_t i = 0; i < wl.size(); ++i) {
            const double t = std::tanh(out.logits.data[i]);
            g.logits[i] = wl[i] * (1.0 - t * t);
        }
        for (int k = 0; k < kDecoderStages; ++k)
            g.features[k] = wf[k];
        return value(out);
    }
};

} // namespace

TEST_CASE("init is deterministic and seed-dependent")
{
    const NetworkConfig cfg{1, 3, 4};
    CHECK(init_network(cfg, 1) == init_network(cfg, 1));
    CHECK(!(init_network(cfg, 1) == init_network(cfg, 2)));

    const auto p = init_network(cfg, 1);
    const auto* head = p.find("head.weight");
    REQUIRE(head);
    CHECK(head->shape == std::vector<int>{4, 3});
    CHECK(p.find("head.bias")->values == std::vector<double>(3, 0.0));
    CHECK(p.same_layout(init_network(cfg, 99)));
    CHECK(!p.same_layout(init_network({1, 2, 4}, 1)));
}

TEST_CASE("forward shape contract")
{
    const auto p = init_network({1, 3, 2}, 4);
    const auto x = random_volume({16, 8, 24}, 1);
    const auto out = forward(p, x);
    CHECK(out.logits.dims == x.dims);
    CHECK(out.logits.channels == 3);
    for (int k = 1; k <= kDecoderStages; ++k) {
        const auto& f = out.decoder_features[k - 1];
        const int scale = 1 << (k - 1);
        CHECK(f.stage == k);
        CHECK(f.dims == Dims{16 / scale, 8 / scale, 24 / scale});
        CHECK(f.channels == 2 * scale);
    }
}

TEST_CASE("forward on a zero volume is finite and deterministic")
{
    const auto p = init_network({1, 2, 2}, 8);
    const auto x = Volume::zeros({8, 8, 8});
    const auto a = forward(p, x);
    const auto b = forward(p, x);
    CHECK(all_finite(a.logits));
    CHECK(a.logits.data == b.logits.data);
    for (int k = 0; k < kDecoderStages; ++k)
        CHECK(a.decoder_features[k].data == b.decoder_features[k].data);
}

TEST_CASE("a constant input offset changes the output")
{
    const auto p = init_network({1, 2, 4}, 3);
    const auto x = random_volume({16, 16, 16}, 2);
    auto y = x;
    for (auto& v : y.data)
        v += 1.5f;
    CHECK(forward(p, x).logits.data != forward(p, y).logits.data);
}

TEST_CASE("forward rejects dims that are not multiples of 8")
{
    const auto p = init_network({1, 2, 2}, 1);
    try {
        forward(p, Volume::zeros({8, 12, 8}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("16") != std::string::npos);
    }
}

TEST_CASE("gradients of trivial losses")
{
    const auto p = init_network({1, 2, 2}, 5);
    const auto x = random_volume({8, 8, 8}, 3);

    const auto zero = gradients(p, x, [](const ForwardOutput&, OutputGrad&) { return 0.0; });
    CHECK(zero.loss == 0.0);
    CHECK(zero.grad == p.zeros_like());

    const auto sq = gradients(p, x, {}, [](const ParamVector& q, ParamVector& g) {
        double s = 0.0;
        for (std::size_t t = 0; t < q.tensors.size(); ++t)
            for (std::size_t i = 0; i < q.tensors[t].values.size(); ++i) {
                s += q.tensors[t].values[i] * q.tensors[t].values[i];
                g.tensors[t].values[i] = 2.0 * q.tensors[t].values[i];
            }
        return s;
    });
    for (std::size_t i = 0; i < p.numel(); ++i)
        CHECK(sq.grad.flat(i) == 2.0 * p.flat(i));

    CHECK_THROWS_AS(gradients(p, x, [](const ForwardOutput&, OutputGrad&) { return std::nan(""); }), NumericError);
}

TEST_CASE("backward matches central finite differences")
{
    // 16^3 keeps every level above a single voxel, so all tensors get signal.
    for (Dims d : {Dims{8, 8, 8}, Dims{16, 16, 16}}) {
        auto p = init_network({1, 3, 2}, 21);
        Rng rng(4);
        for (std::size_t i = 0; i < p.numel(); ++i)
            p.flat(i) += 0.1 * rng.normal();
        const auto x = random_volume(d, 9);
        const ProbeLoss probe(forward(p, x), 13);
        const auto g = gradients(p, x, std::cref(probe));

        std::vector<double> flat(p.numel());
        for (std::size_t i = 0; i < flat.size(); ++i)
            flat[i] = p.flat(i);
        auto f = [&](const std::vector<double>& v) {
            auto q = p;
            for (std::size_t i = 0; i < v.size(); ++i)
                q.flat(i) = v[i];
            return probe.value(forward(q, x));
        };

        // One coordinate from every tensor, plus random extras.
        std::vector<std::size_t> picks;
        std::size_t offset = 0;
        for (const auto& t : p.tensors) {
            picks.push_back(offset + rng.below(t.numel()));
            offset += t.numel();
        }
        for (int i = 0; i < 10; ++i)
            picks.push_back(rng.below(p.numel()));

        for (auto i : picks) {
            const double fd = oracle::central_difference(f, flat, i, 1e-4);
            INFO("dims " << to_string(d) << " param " << i);
            CHECK(oracle::relative_error(g.grad.flat(i), fd, 1e-6) < 1e-4);
        }
    }
}

TEST_CASE("ParamVector helpers")
{
    auto a = init_network({1, 2, 2}, 1);
    const auto b = init_network({1, 2, 2}, 2);
    auto c = a;
    c.axpy(2.0, b);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(c.flat(i) == a.flat(i) + 2.0 * b.flat(i));
    CHECK_THROWS_AS(a.axpy(1.0, init_network({1, 3, 2}, 1)), ShapeError);
    CHECK_THROWS_AS(a.flat(a.numel()), Error);
}
