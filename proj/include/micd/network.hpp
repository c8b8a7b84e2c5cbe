#pragma once

#include "micd/volume.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace micd {

inline constexpr int kDecoderStages = 4;

// Four resolution levels (three stride-2 downsamplings), VNet-style
// encoder/decoder with concatenating skips. Each stage is conv -> instance
// norm -> ELU.
struct NetworkConfig {
    int in_channels = 1;
    int num_classes = 2;
    int base_channels = 8;

    void validate() const;
    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;

    std::size_t numel() const noexcept { return values.size(); }
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Ordered named parameter tensors of one network. Also used for gradients,
// momentum buffers and EMA teachers, which share the layout.
class ParamVector {
public:
    NetworkConfig config;
    std::vector<NamedTensor> tensors;

    std::size_t numel() const noexcept;
    const NamedTensor* find(const std::string& name) const;

    // Same config, names and shapes.
    bool same_layout(const ParamVector& other) const;
    ParamVector zeros_like() const;

    // Flat element access across all tensors, in tensor order.
    double& flat(std::size_t i);
    double flat(std::size_t i) const;

    // this += scale * other
    void axpy(double scale, const ParamVector& other);

    friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

struct ForwardOutput {
    FeatureMap logits;
    // decoder_features[k - 1] is stage k; k = 1 is full resolution, k = 4 deepest.
    std::array<FeatureMap, kDecoderStages> decoder_features;
};

// dL/d(output) for each part of a ForwardOutput; empty vectors mean zero.
struct OutputGrad {
    std::vector<double> logits;
    std::array<std::vector<double>, kDecoderStages> features;

    static OutputGrad zeros_like(const ForwardOutput& out);
};

// Activations retained by a forward pass for the backward pass.
struct ForwardCache {
    struct Block {
        FeatureMap input;
        FeatureMap output;
        std::vector<double> xhat;
        std::vector<double> inv_std;
    };
    std::vector<Block> blocks;
    bool empty() const noexcept { return blocks.empty(); }
};

// He-normal conv weights, unit norm scale, zero shifts and head bias.
ParamVector init_network(const NetworkConfig& cfg, std::uint64_t seed);

// Input dims must be multiples of 8 on every axis.
ForwardOutput forward(const ParamVector& params, const Volume& x);
ForwardOutput forward(const ParamVector& params, const Volume& x, ForwardCache& cache);

// Accumulates dL/dparams into grad (which must share the params layout).
void backward(const ParamVector& params, const ForwardCache& cache, const OutputGrad& grad_out, ParamVector& grad);

// Loss of a forward output; fills dL/d(output).
using OutputLoss = std::function<double(const ForwardOutput&, OutputGrad&)>;
// Loss directly on parameters; fills dL/dparams (pre-zeroed, same layout).
using ParamLoss = std::function<double(const ParamVector&, ParamVector&)>;

struct GradientResult {
    double loss = 0.0;
    ParamVector grad;
};

// Value and exact gradient of output_loss(forward(params, x)) + param_loss(params).
GradientResult gradients(const ParamVector& params, const Volume& x, const OutputLoss& output_loss,
                         const ParamLoss& param_loss = {});

} // namespace micd
