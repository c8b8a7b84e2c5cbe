#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace micd {

// Per-class multipliers for the two branches. Branch A is weighted by
// w_diff, branch B by w_dist. Both are normalized to mean 1.
struct ClassWeights {
    std::vector<double> w_dist;
    std::vector<double> w_diff;

    static ClassWeights uniform(int num_classes);
    int num_classes() const noexcept { return static_cast<int>(w_dist.size()); }
};

struct ClassStats {
    std::vector<std::uint64_t> voxel_counts; // labeled set only
    std::vector<double> ema_dice;            // starts at 0

    static ClassStats empty(int num_classes);
};

inline constexpr double kDiceEmaDecay = 0.99;

// Log inverse frequency, u_c = log(V / max(v_c, 1)), normalized to mean 1.
std::vector<double> dist_weights(const ClassStats& stats);

// One minus tracked Dice, normalized to mean 1.
std::vector<double> diff_weights(const ClassStats& stats);

// ema <- 0.99 * ema + 0.01 * dice, element-wise.
ClassStats update_stats(const ClassStats& stats, std::span<const double> per_class_dice);

} // namespace micd
