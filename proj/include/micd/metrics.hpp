#pragma once

#include "micd/data.hpp"
#include "micd/network.hpp"
#include "micd/volume.hpp"

#include <optional>
#include <string>
#include <vector>

namespace micd {

// 2|P n G| / (|P| + |G|); 1 when both are empty, 0 when exactly one is.
double dice_score(const LabelMap& pred, const LabelMap& gt, int c);

// Class voxels with at least one of their six face neighbours outside the
// class; the grid boundary counts as outside.
std::vector<std::uint8_t> surface_voxels(const LabelMap& y, int c);

// Symmetric average surface distance in mm: the mean nearest-surface distance
// from pred to gt, averaged with the reverse direction. Empty when the class
// is absent from either map.
std::optional<double> asd(const LabelMap& pred, const LabelMap& gt, int c, Spacing spacing);

struct MetricsReport {
    long iteration = 0;
    std::vector<double> per_class_dice;              // classes 1..C-1
    std::vector<std::optional<double>> per_class_asd; // classes 1..C-1, empty if never defined
    std::vector<int> asd_undefined;                  // per class: volumes excluded from ASD
    double avg_dice = 0.0;
    std::optional<double> avg_asd;
    std::size_t volumes = 0;
};

// Per-class Dice / ASD of one prediction against its ground truth.
struct CaseMetrics {
    std::vector<double> dice;
    std::vector<std::optional<double>> asd;
};
CaseMetrics case_metrics(const LabelMap& pred, const LabelMap& gt, Spacing spacing);

// Averages per class over cases (ASD over cases where defined), then averages
// the class columns.
MetricsReport summarize(const std::vector<CaseMetrics>& cases, int num_classes, long iteration = 0);

LabelMap predict(const ParamVector& params, const Volume& x);

MetricsReport evaluate(const ParamVector& params, const std::vector<Sample>& val, long iteration = 0);
MetricsReport evaluate(const ParamVector& params, const SplitManifest& manifest, long iteration = 0);

std::string report_json(const MetricsReport& report);
// Aligned text table: Avg. Dice, Avg. ASD, then one Dice column per class.
std::string report_table(const MetricsReport& report);

} // namespace micd
