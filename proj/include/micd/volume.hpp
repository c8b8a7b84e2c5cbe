#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace micd {

// Grid extents; voxel index is (z * h + y) * w + x, x fastest.
struct Dims {
    int d = 0;
    int h = 0;
    int w = 0;

    std::size_t voxels() const noexcept
    {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    std::size_t index(int z, int y, int x) const noexcept
    {
        return (static_cast<std::size_t>(z) * static_cast<std::size_t>(h) + static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(w) +
               static_cast<std::size_t>(x);
    }
    bool positive() const noexcept { return d > 0 && h > 0 && w > 0; }

    friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& dims);

// Millimeters per voxel along z, y, x.
struct Spacing {
    float z = 1.0f;
    float y = 1.0f;
    float x = 1.0f;

    friend bool operator==(const Spacing&, const Spacing&) = default;
};

struct Volume {
    Dims dims;
    Spacing spacing;
    std::vector<float> data;

    static Volume zeros(Dims dims, Spacing spacing = {});

    float& at(int z, int y, int x) { return data[dims.index(z, y, x)]; }
    float at(int z, int y, int x) const { return data[dims.index(z, y, x)]; }

    // Throws ShapeError / NumericError on a broken invariant.
    void validate() const;
};

struct LabelMap {
    Dims dims;
    int num_classes = 2;
    std::vector<std::uint8_t> data;

    static LabelMap zeros(Dims dims, int num_classes);

    std::uint8_t& at(int z, int y, int x) { return data[dims.index(z, y, x)]; }
    std::uint8_t at(int z, int y, int x) const { return data[dims.index(z, y, x)]; }

    void validate() const;
};

// Per-voxel class distribution, classes contiguous per voxel.
struct ProbMap {
    Dims dims;
    int num_classes = 2;
    std::vector<double> data;

    static ProbMap uniform(Dims dims, int num_classes);

    std::span<const double> voxel(std::size_t v) const
    {
        return {data.data() + v * static_cast<std::size_t>(num_classes), static_cast<std::size_t>(num_classes)};
    }
    std::span<double> voxel(std::size_t v)
    {
        return {data.data() + v * static_cast<std::size_t>(num_classes), static_cast<std::size_t>(num_classes)};
    }

    // Checks the simplex invariant (entries >= 0, sum 1 +- 1e-5).
    void validate() const;
};

// Channels-last activation tensor. Also used for class logits (stage 0).
struct FeatureMap {
    int stage = 0;
    Dims dims;
    int channels = 0;
    std::vector<double> data;

    static FeatureMap zeros(Dims dims, int channels, int stage = 0);

    std::size_t size() const noexcept { return data.size(); }
    std::span<const double> voxel(std::size_t v) const
    {
        return {data.data() + v * static_cast<std::size_t>(channels), static_cast<std::size_t>(channels)};
    }
};

// Per-voxel softmax over the channel axis. Rejects non-finite logits,
// reporting the offending voxel.
ProbMap softmax_over_classes(const FeatureMap& logits);

// Vector-Jacobian product of the softmax: given p and dL/dp, returns dL/dz.
std::vector<double> softmax_backward(const ProbMap& p, std::span<const double> grad_p);

// Lowest class index wins ties.
LabelMap argmax_label(const ProbMap& p);

ProbMap one_hot(const LabelMap& y, int num_classes);

} // namespace micd
