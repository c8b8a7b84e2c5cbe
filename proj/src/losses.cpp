#include "micd/losses.hpp"

#include "micd/error.hpp"

#include <algorithm>
#include <cmath>

namespace micd {

namespace {

void check_pair(const ProbMap& p, const LabelMap& y, const char* what)
{
    if (p.dims != y.dims || y.data.size() != p.dims.voxels() ||
        p.data.size() != p.dims.voxels() * static_cast<std::size_t>(p.num_classes))
        throw ShapeError(std::string(what) + ": prediction " + to_string(p.dims) + " vs target " + to_string(y.dims));
    for (auto label : y.data) {
        if (label >= p.num_classes)
            throw ShapeError(std::string(what) + ": target class " + std::to_string(label) + " >= " +
                             std::to_string(p.num_classes));
    }
}

void check_weights(std::span<const double> w, int num_classes, const char* what)
{
    if (!w.empty() && w.size() != static_cast<std::size_t>(num_classes))
        throw ShapeError(std::string(what) + ": expected " + std::to_string(num_classes) + " class weights, got " +
                         std::to_string(w.size()));
}

void check_sink(const GradSink& g, std::size_t n, const char* what)
{
    if (g.active() && g.values.size() != n)
        throw ShapeError(std::string(what) + ": gradient buffer length mismatch");
}

double weight_of(std::span<const double> w, int c) { return w.empty() ? 1.0 : w[static_cast<std::size_t>(c)]; }

// log-softmax of one voxel's channels into out.
void log_softmax(std::span<const double> z, std::span<double> out)
{
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z)
        sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t k = 0; k < z.size(); ++k)
        out[k] = z[k] - lse;
}

} // namespace

double ce_loss(const ProbMap& p, const LabelMap& y, std::span<const double> class_weights, GradSink grad)
{
    check_pair(p, y, "ce_loss");
    check_weights(class_weights, p.num_classes, "ce_loss");
    check_sink(grad, p.data.size(), "ce_loss");

    const std::size_t n = p.dims.voxels();
    const double inv_n = 1.0 / static_cast<double>(n);
    double sum = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
        const int c = y.data[v];
        const double w = weight_of(class_weights, c);
        const double pc = p.voxel(v)[c];
        const double clipped = std::clamp(pc, kProbClip, 1.0);
        sum += -w * std::log(clipped);
        if (grad.active() && pc >= kProbClip && pc <= 1.0)
            grad.values[v * p.num_classes + c] += grad.scale * (-w * inv_n / pc);
    }
    return sum * inv_n;
}

double dice_loss(const ProbMap& p, const LabelMap& y, std::span<const double> class_weights, GradSink grad)
{
    check_pair(p, y, "dice_loss");
    check_weights(class_weights, p.num_classes, "dice_loss");
    check_sink(grad, p.data.size(), "dice_loss");

    const int nc = p.num_classes;
    const std::size_t n = p.dims.voxels();
    std::vector<double> inter(nc, 0.0), psum(nc, 0.0), gsum(nc, 0.0);
    for (std::size_t v = 0; v < n; ++v) {
        const auto pv = p.voxel(v);
        const int label = y.data[v];
        for (int c = 0; c < nc; ++c)
            psum[c] += pv[c];
        inter[label] += pv[label];
        gsum[label] += 1.0;
    }

    double loss = 0.0;
    std::vector<double> num(nc), den(nc);
    for (int c = 0; c < nc; ++c) {
        num[c] = 2.0 * inter[c] + kDiceSmooth;
        den[c] = psum[c] + gsum[c] + kDiceSmooth;
        loss += weight_of(class_weights, c) * (1.0 - num[c] / den[c]);
    }
    loss /= nc;

    if (grad.active()) {
        // d dice_c / d p_vc = (2 y_vc den_c - num_c) / den_c^2
        for (std::size_t v = 0; v < n; ++v) {
            const int label = y.data[v];
            for (int c = 0; c < nc; ++c) {
                const double yv = label == c ? 1.0 : 0.0;
                const double dd = (2.0 * yv * den[c] - num[c]) / (den[c] * den[c]);
                grad.values[v * nc + c] += grad.scale * (-weight_of(class_weights, c) / nc * dd);
            }
        }
    }
    return loss;
}

double seg_loss(const ProbMap& p, const LabelMap& y, std::span<const double> class_weights, GradSink grad)
{
    GradSink half{grad.values, 0.5 * grad.scale};
    return 0.5 * (ce_loss(p, y, class_weights, half) + dice_loss(p, y, class_weights, half));
}

double feature_kl(const FeatureMap& a, const FeatureMap& b, GradSink grad_a, GradSink grad_b)
{
    if (a.dims != b.dims || a.channels != b.channels || a.data.size() != b.data.size())
        throw ShapeError("feature_kl: stage " + std::to_string(a.stage) + " shapes differ (" + to_string(a.dims) + "x" +
                         std::to_string(a.channels) + " vs " + to_string(b.dims) + "x" + std::to_string(b.channels) + ")");
    if (a.channels < 1 || a.data.size() != a.dims.voxels() * static_cast<std::size_t>(a.channels))
        throw ShapeError("feature_kl: malformed feature map");
    check_sink(grad_a, a.data.size(), "feature_kl");
    check_sink(grad_b, b.data.size(), "feature_kl");

    const auto ch = static_cast<std::size_t>(a.channels);
    const std::size_t n = a.dims.voxels();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> la(ch), lb(ch);
    double total = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
        log_softmax(a.voxel(v), la);
        log_softmax(b.voxel(v), lb);
        double kl = 0.0;
        for (std::size_t k = 0; k < ch; ++k)
            kl += std::exp(lb[k]) * (lb[k] - la[k]);
        total += kl;
        if (grad_a.active()) {
            for (std::size_t k = 0; k < ch; ++k)
                grad_a.values[v * ch + k] += grad_a.scale * inv_n * (std::exp(la[k]) - std::exp(lb[k]));
        }
        if (grad_b.active()) {
            for (std::size_t k = 0; k < ch; ++k)
                grad_b.values[v * ch + k] += grad_b.scale * inv_n * std::exp(lb[k]) * (lb[k] - la[k] - kl);
        }
    }
    return total * inv_n;
}

double sup_loss(const ProbMap& pa, const ProbMap& pb, const std::optional<LabelMap>& y, const ClassWeights& cw,
                GradSink grad_a, GradSink grad_b)
{
    if (!y)
        throw Error("sup_loss: sample has no ground-truth label (unlabeled samples are not allowed)");
    return seg_loss(pa, *y, cw.w_diff, grad_a) + seg_loss(pb, *y, cw.w_dist, grad_b);
}

double cps_loss(const ProbMap& pa, const ProbMap& pb, const LabelMap& target_a, const LabelMap& target_b,
                const ClassWeights& cw, GradSink grad_a, GradSink grad_b)
{
    return ce_loss(pa, target_a, cw.w_diff, grad_a) + ce_loss(pb, target_b, cw.w_dist, grad_b);
}

double cfc_loss(const StageFeatures& fa, const StageFeatures& fb, const StageSinks& grad_a, const StageSinks& grad_b)
{
    double total = 0.0;
    for (int k = 0; k < kDecoderStages; ++k) {
        const double lambda = kStageWeights[k];
        const GradSink ga{grad_a[k].values, grad_a[k].scale * lambda};
        const GradSink gb{grad_b[k].values, grad_b[k].scale * lambda};
        total += lambda * feature_kl(fa[k], fb[k], ga, gb);
    }
    return total;
}

double cmd_loss(const ProbMap& p_ma, const ProbMap& p_mb, const LabelMap& teacher_a, const LabelMap& teacher_b,
                GradSink grad_a, GradSink grad_b)
{
    return ce_loss(p_ma, teacher_a, {}, grad_a) + ce_loss(p_mb, teacher_b, {}, grad_b);
}

double rampup_beta(long t, const RampUpSchedule& sched)
{
    if (sched.ramp_iters < 1)
        throw Error("rampup: ramp_iters must be >= 1");
    if (t >= sched.ramp_iters)
        return sched.beta_max;
    const double phase = 1.0 - static_cast<double>(std::max(t, 0L)) / static_cast<double>(sched.ramp_iters);
    return sched.beta_max * std::exp(-5.0 * phase * phase);
}

LossBreakdown total_loss(const LossParts& parts, double beta)
{
    const std::pair<const char*, double> named[] = {
        {"sup", parts.sup}, {"cps", parts.cps}, {"con", parts.con}, {"dis", parts.dis}, {"beta", beta}};
    for (const auto& [name, value] : named) {
        if (!std::isfinite(value))
            throw NumericError(std::string("loss term '") + name + "' is not finite");
    }
    LossBreakdown b{parts.sup, parts.cps, parts.con, parts.dis, beta, 0.0};
    b.total = parts.sup + beta * (parts.cps + parts.con + parts.dis);
    if (!std::isfinite(b.total))
        throw NumericError("total loss is not finite");
    return b;
}

LossBreakdown total_loss(const LossParts& parts, long t, const RampUpSchedule& sched)
{
    return total_loss(parts, rampup_beta(t, sched));
}

} // namespace micd
