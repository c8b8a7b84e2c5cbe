#include "micd/volume.hpp"

#include "micd/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace micd {

namespace {

std::string voxel_coord(const Dims& dims, std::size_t v)
{
    const auto w = static_cast<std::size_t>(dims.w);
    const auto h = static_cast<std::size_t>(dims.h);
    std::ostringstream os;
    os << "(z=" << v / (w * h) << ", y=" << (v / w) % h << ", x=" << v % w << ")";
    return os.str();
}

} // namespace

std::string to_string(const Dims& dims)
{
    std::ostringstream os;
    os << dims.d << "x" << dims.h << "x" << dims.w;
    return os.str();
}

Volume Volume::zeros(Dims dims, Spacing spacing)
{
    return Volume{dims, spacing, std::vector<float>(dims.voxels(), 0.0f)};
}

void Volume::validate() const
{
    if (!dims.positive())
        throw ShapeError("volume dims must be positive, got " + to_string(dims));
    if (data.size() != dims.voxels())
        throw ShapeError("volume data length " + std::to_string(data.size()) + " does not match dims " + to_string(dims));
    if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0))
        throw ShapeError("volume spacing must be strictly positive");
    for (std::size_t v = 0; v < data.size(); ++v) {
        if (!std::isfinite(data[v]))
            throw NumericError("non-finite intensity at voxel " + voxel_coord(dims, v));
    }
}

LabelMap LabelMap::zeros(Dims dims, int num_classes)
{
    return LabelMap{dims, num_classes, std::vector<std::uint8_t>(dims.voxels(), 0)};
}

void LabelMap::validate() const
{
    if (!dims.positive())
        throw ShapeError("label dims must be positive, got " + to_string(dims));
    if (num_classes < 2 || num_classes > 256)
        throw ShapeError("num_classes must be in [2, 256], got " + std::to_string(num_classes));
    if (data.size() != dims.voxels())
        throw ShapeError("label data length does not match dims " + to_string(dims));
    for (std::size_t v = 0; v < data.size(); ++v) {
        if (data[v] >= num_classes)
            throw ShapeError("label " + std::to_string(data[v]) + " >= num_classes " + std::to_string(num_classes) +
                             " at voxel " + voxel_coord(dims, v));
    }
}

ProbMap ProbMap::uniform(Dims dims, int num_classes)
{
    return ProbMap{dims, num_classes,
                   std::vector<double>(dims.voxels() * static_cast<std::size_t>(num_classes), 1.0 / num_classes)};
}

void ProbMap::validate() const
{
    if (num_classes < 2)
        throw ShapeError("ProbMap needs at least 2 classes");
    if (data.size() != dims.voxels() * static_cast<std::size_t>(num_classes))
        throw ShapeError("ProbMap data length does not match dims " + to_string(dims));
    for (std::size_t v = 0; v < dims.voxels(); ++v) {
        double sum = 0.0;
        for (double p : voxel(v)) {
            if (!(p >= 0.0))
                throw NumericError("negative or NaN probability at voxel " + voxel_coord(dims, v));
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-5)
            throw NumericError("probabilities do not sum to 1 at voxel " + voxel_coord(dims, v));
    }
}

FeatureMap FeatureMap::zeros(Dims dims, int channels, int stage)
{
    return FeatureMap{stage, dims, channels, std::vector<double>(dims.voxels() * static_cast<std::size_t>(channels), 0.0)};
}

ProbMap softmax_over_classes(const FeatureMap& logits)
{
    const int c = logits.channels;
    if (c < 2)
        throw ShapeError("softmax needs at least 2 channels");
    if (logits.data.size() != logits.dims.voxels() * static_cast<std::size_t>(c))
        throw ShapeError("logit tensor length does not match dims " + to_string(logits.dims));

    ProbMap p{logits.dims, c, std::vector<double>(logits.data.size())};
    for (std::size_t v = 0; v < logits.dims.voxels(); ++v) {
        const auto z = logits.voxel(v);
        auto out = p.voxel(v);
        double zmax = z[0];
        for (int k = 0; k < c; ++k) {
            if (!std::isfinite(z[k]))
                throw NumericError("non-finite logit in channel " + std::to_string(k) + " at voxel " +
                                   voxel_coord(logits.dims, v));
            zmax = std::max(zmax, z[k]);
        }
        double sum = 0.0;
        for (int k = 0; k < c; ++k) {
            out[k] = std::exp(z[k] - zmax);
            sum += out[k];
        }
        for (int k = 0; k < c; ++k)
            out[k] /= sum;
    }
    return p;
}

std::vector<double> softmax_backward(const ProbMap& p, std::span<const double> grad_p)
{
    if (grad_p.size() != p.data.size())
        throw ShapeError("softmax_backward: gradient length mismatch");
    const auto c = static_cast<std::size_t>(p.num_classes);
    std::vector<double> grad_z(p.data.size());
    for (std::size_t v = 0; v < p.dims.voxels(); ++v) {
        const double* pv = p.data.data() + v * c;
        const double* gv = grad_p.data() + v * c;
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k)
            dot += pv[k] * gv[k];
        for (std::size_t k = 0; k < c; ++k)
            grad_z[v * c + k] = pv[k] * (gv[k] - dot);
    }
    return grad_z;
}

LabelMap argmax_label(const ProbMap& p)
{
    if (p.data.size() != p.dims.voxels() * static_cast<std::size_t>(p.num_classes))
        throw ShapeError("ProbMap data length does not match dims " + to_string(p.dims));
    LabelMap y = LabelMap::zeros(p.dims, p.num_classes);
    for (std::size_t v = 0; v < p.dims.voxels(); ++v) {
        const auto probs = p.voxel(v);
        int best = 0;
        for (int k = 1; k < p.num_classes; ++k) {
            if (probs[k] > probs[best])
                best = k;
        }
        y.data[v] = static_cast<std::uint8_t>(best);
    }
    return y;
}

ProbMap one_hot(const LabelMap& y, int num_classes)
{
    if (num_classes < 2)
        throw ShapeError("one_hot needs at least 2 classes");
    ProbMap p{y.dims, num_classes, std::vector<double>(y.dims.voxels() * static_cast<std::size_t>(num_classes), 0.0)};
    for (std::size_t v = 0; v < y.data.size(); ++v) {
        if (y.data[v] >= num_classes)
            throw ShapeError("label " + std::to_string(y.data[v]) + " out of range for " + std::to_string(num_classes) +
                             " classes at voxel " + voxel_coord(y.dims, v));
        p.voxel(v)[y.data[v]] = 1.0;
    }
    return p;
}

} // namespace micd
