#include "micd/weights.hpp"

#include "micd/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace micd {

namespace {

// Scales q to mean 1. An all-zero q carries no preference, so it maps to ones.
std::vector<double> normalize_to_unit_mean(std::vector<double> q)
{
    if (std::adjacent_find(q.begin(), q.end(), std::not_equal_to<>()) == q.end())
        return std::vector<double>(q.size(), 1.0);
    const double sum = std::accumulate(q.begin(), q.end(), 0.0);
    if (sum <= 0.0)
        return std::vector<double>(q.size(), 1.0);
    const double scale = static_cast<double>(q.size()) / sum;
    for (auto& v : q)
        v *= scale;
    return q;
}

} // namespace

ClassWeights ClassWeights::uniform(int num_classes)
{
    return {std::vector<double>(num_classes, 1.0), std::vector<double>(num_classes, 1.0)};
}

ClassStats ClassStats::empty(int num_classes)
{
    return {std::vector<std::uint64_t>(num_classes, 0), std::vector<double>(num_classes, 0.0)};
}

std::vector<double> dist_weights(const ClassStats& stats)
{
    const auto& counts = stats.voxel_counts;
    if (counts.empty())
        throw Error("dist_weights: no classes");
    const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}));
    if (total <= 0.0)
        throw Error("dist_weights: all class voxel counts are zero");
    std::vector<double> u(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c)
        u[c] = std::log(total / static_cast<double>(std::max<std::uint64_t>(counts[c], 1)));
    return normalize_to_unit_mean(std::move(u));
}

std::vector<double> diff_weights(const ClassStats& stats)
{
    std::vector<double> q(stats.ema_dice.size());
    for (std::size_t c = 0; c < q.size(); ++c) {
        const double d = stats.ema_dice[c];
        if (!(d >= 0.0 && d <= 1.0))
            throw Error("diff_weights: tracked dice outside [0, 1]");
        q[c] = 1.0 - d;
    }
    return normalize_to_unit_mean(std::move(q));
}

ClassStats update_stats(const ClassStats& stats, std::span<const double> per_class_dice)
{
    if (per_class_dice.size() != stats.ema_dice.size())
        throw ShapeError("update_stats: expected " + std::to_string(stats.ema_dice.size()) + " dice values");
    ClassStats next = stats;
    for (std::size_t c = 0; c < per_class_dice.size(); ++c) {
        const double d = per_class_dice[c];
        if (!(d >= 0.0 && d <= 1.0))
            throw Error("update_stats: dice value " + std::to_string(d) + " outside [0, 1]");
        next.ema_dice[c] = kDiceEmaDecay * stats.ema_dice[c] + (1.0 - kDiceEmaDecay) * d;
    }
    return next;
}

} // namespace micd
