#pragma once

#include "micd/volume.hpp"

#include <cstdint>
#include <vector>

namespace micd {

// Parameters of the patch mask: a fraction `ratio` of the cubic
// `patch_edge`-voxel patches is zeroed.
struct MaskSpec {
    double ratio = 0.4;
    int patch_edge = 3;
    std::uint64_t seed = 0;

    void validate() const;
};

// 1 = keep, 0 = masked.
struct BinaryMask {
    Dims dims;
    std::vector<std::uint8_t> data;

    std::size_t masked_voxels() const;
};

// Number of patches on the origin-anchored grid, ragged boundary patches included.
std::size_t patch_count(Dims dims, int patch_edge);

// Exactly round-half-up(ratio * P) patches masked, chosen uniformly without
// replacement from a stream seeded by spec.seed.
BinaryMask generate_mask(const MaskSpec& spec, Dims dims);

Volume apply_mask(const Volume& x, const BinaryMask& m);

} // namespace micd
