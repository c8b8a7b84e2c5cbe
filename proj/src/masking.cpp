#include "micd/masking.hpp"

#include "micd/error.hpp"
#include "micd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace micd {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

} // namespace

void MaskSpec::validate() const
{
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw Error("mask.ratio must lie in [0, 1]");
    if (patch_edge < 1)
        throw Error("mask.patch_edge must be >= 1");
}

std::size_t BinaryMask::masked_voxels() const
{
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{0}));
}

std::size_t patch_count(Dims dims, int patch_edge)
{
    return static_cast<std::size_t>(ceil_div(dims.d, patch_edge)) * static_cast<std::size_t>(ceil_div(dims.h, patch_edge)) *
           static_cast<std::size_t>(ceil_div(dims.w, patch_edge));
}

BinaryMask generate_mask(const MaskSpec& spec, Dims dims)
{
    spec.validate();
    if (!dims.positive())
        throw ShapeError("mask dims must be positive, got " + to_string(dims));

    const int s = spec.patch_edge;
    const int ph = ceil_div(dims.h, s);
    const int pw = ceil_div(dims.w, s);
    const std::size_t total = patch_count(dims, s);
    const auto n_masked = static_cast<std::size_t>(std::floor(spec.ratio * static_cast<double>(total) + 0.5));

    // Partial Fisher-Yates: the first n_masked entries are the selection.
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(spec.seed, "mask-patches"));
    for (std::size_t i = 0; i < n_masked; ++i) {
        const auto j = i + rng.below(total - i);
        std::swap(order[i], order[j]);
    }
    std::vector<std::uint8_t> patch_keep(total, 1);
    for (std::size_t i = 0; i < n_masked; ++i)
        patch_keep[order[i]] = 0;

    BinaryMask m{dims, std::vector<std::uint8_t>(dims.voxels())};
    for (int z = 0; z < dims.d; ++z) {
        for (int y = 0; y < dims.h; ++y) {
            const std::size_t row = (static_cast<std::size_t>(z / s) * ph + static_cast<std::size_t>(y / s)) * pw;
            for (int x = 0; x < dims.w; ++x)
                m.data[dims.index(z, y, x)] = patch_keep[row + static_cast<std::size_t>(x / s)];
        }
    }
    return m;
}

Volume apply_mask(const Volume& x, const BinaryMask& m)
{
    if (x.dims != m.dims || m.data.size() != x.data.size())
        throw ShapeError("apply_mask: volume dims " + to_string(x.dims) + " vs mask dims " + to_string(m.dims));
    Volume out = x;
    for (std::size_t v = 0; v < out.data.size(); ++v) {
        if (m.data[v] == 0)
            out.data[v] = 0.0f;
    }
    return out;
}

} // namespace micd
