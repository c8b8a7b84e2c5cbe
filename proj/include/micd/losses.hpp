#pragma once

#include "micd/network.hpp"
#include "micd/volume.hpp"
#include "micd/weights.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>

namespace micd {

inline constexpr double kProbClip = 1e-7;
inline constexpr double kDiceSmooth = 1e-5;
// Per-stage weights of the feature consistency term, k = 1..4.
inline constexpr std::array<double, kDecoderStages> kStageWeights{0.2, 0.4, 0.6, 0.8};

// Where a loss deposits its gradient: values += scale * dL/d(input).
// An empty span disables the gradient.
struct GradSink {
    std::span<double> values;
    double scale = 1.0;

    bool active() const noexcept { return !values.empty(); }
};

// Mean over voxels of -w[y] * log(max(p[y], 1e-7)). Empty weights mean 1.
double ce_loss(const ProbMap& p, const LabelMap& y, std::span<const double> class_weights = {}, GradSink grad = {});

// (1/C) * sum_c w_c * (1 - dice_c), soft dice with smoothing 1e-5.
// With unit weights this is 1 - mean_c dice_c.
double dice_loss(const ProbMap& p, const LabelMap& y, std::span<const double> class_weights = {}, GradSink grad = {});

// 0.5 * (CE + Dice), both with the same class weights.
double seg_loss(const ProbMap& p, const LabelMap& y, std::span<const double> class_weights = {}, GradSink grad = {});

// Mean over voxels of KL(softmax(b) || softmax(a)), softmax across channels.
double feature_kl(const FeatureMap& a, const FeatureMap& b, GradSink grad_a = {}, GradSink grad_b = {});

// One labeled sample: seg_loss(pA, y; w_diff) + seg_loss(pB, y; w_dist).
// Rejects a sample without a label.
double sup_loss(const ProbMap& pa, const ProbMap& pb, const std::optional<LabelMap>& y, const ClassWeights& cw,
                GradSink grad_a = {}, GradSink grad_b = {});

// One sample: ce(pA, target_a; w_diff) + ce(pB, target_b; w_dist).
// Targets are pseudo-labels from the opposite branch and carry no gradient.
double cps_loss(const ProbMap& pa, const ProbMap& pb, const LabelMap& target_a, const LabelMap& target_b,
                const ClassWeights& cw, GradSink grad_a = {}, GradSink grad_b = {});

using StageFeatures = std::array<FeatureMap, kDecoderStages>;
using StageSinks = std::array<GradSink, kDecoderStages>;

// One sample: sum_k lambda_k * feature_kl(dA_k, dB_k). Gradients flow to both.
double cfc_loss(const StageFeatures& fa, const StageFeatures& fb, const StageSinks& grad_a = {},
                const StageSinks& grad_b = {});

// One sample: ce(p_mA, yhat_AT) + ce(p_mB, yhat_BT), unit weights; each
// student is paired with its own teacher.
double cmd_loss(const ProbMap& p_ma, const ProbMap& p_mb, const LabelMap& teacher_a, const LabelMap& teacher_b,
                GradSink grad_a = {}, GradSink grad_b = {});

struct RampUpSchedule {
    double beta_max = 1.0;
    long ramp_iters = 1;
};

// beta_max * exp(-5 (1 - min(t, T)/T)^2)
double rampup_beta(long t, const RampUpSchedule& sched);

struct LossParts {
    double sup = 0.0;
    double cps = 0.0;
    double con = 0.0;
    double dis = 0.0;
};

struct LossBreakdown {
    double sup = 0.0;
    double cps = 0.0;
    double con = 0.0;
    double dis = 0.0;
    double beta = 0.0;
    double total = 0.0;
};

// total = sup + beta * (cps + con + dis); rejects a non-finite part by name.
LossBreakdown total_loss(const LossParts& parts, double beta);
LossBreakdown total_loss(const LossParts& parts, long t, const RampUpSchedule& sched);

} // namespace micd
