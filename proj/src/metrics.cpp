#include "micd/metrics.hpp"

#include "micd/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace micd {

namespace {

void check_same(const LabelMap& a, const LabelMap& b, const char* what)
{
    if (a.dims != b.dims || a.data.size() != b.data.size())
        throw ShapeError(std::string(what) + ": " + to_string(a.dims) + " vs " + to_string(b.dims));
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest voxel of
// `set`, by three exact 1-D minimizations (x, then y, then z).
std::vector<double> squared_distance_field(const std::vector<std::uint8_t>& set, Dims dims, Spacing spacing)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> f(set.size());
    for (std::size_t v = 0; v < set.size(); ++v)
        f[v] = set[v] ? 0.0 : inf;

    std::vector<double> line, out;
    auto pass = [&](int n, double step, auto&& index_of, int outer_a, int outer_b) {
        line.resize(n);
        out.resize(n);
        for (int a = 0; a < outer_a; ++a)
            for (int b = 0; b < outer_b; ++b) {
                for (int i = 0; i < n; ++i)
                    line[i] = f[index_of(a, b, i)];
                for (int i = 0; i < n; ++i) {
                    double best = inf;
                    for (int j = 0; j < n; ++j) {
                        if (line[j] == inf)
                            continue;
                        const double d = static_cast<double>(i - j) * step;
                        best = std::min(best, line[j] + d * d);
                    }
                    out[i] = best;
                }
                for (int i = 0; i < n; ++i)
                    f[index_of(a, b, i)] = out[i];
            }
    };
    pass(dims.w, spacing.x, [&](int z, int y, int x) { return dims.index(z, y, x); }, dims.d, dims.h);
    pass(dims.h, spacing.y, [&](int z, int x, int y) { return dims.index(z, y, x); }, dims.d, dims.w);
    pass(dims.d, spacing.z, [&](int y, int x, int z) { return dims.index(z, y, x); }, dims.h, dims.w);
    return f;
}

double mean_distance(const std::vector<std::uint8_t>& from, const std::vector<double>& sq_field)
{
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < from.size(); ++v) {
        if (from[v]) {
            sum += std::sqrt(sq_field[v]);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

nlohmann::ordered_json optional_number(const std::optional<double>& v)
{
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

} // namespace

double dice_score(const LabelMap& pred, const LabelMap& gt, int c)
{
    check_same(pred, gt, "dice_score");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t v = 0; v < pred.data.size(); ++v) {
        const bool in_p = pred.data[v] == c;
        const bool in_g = gt.data[v] == c;
        p += in_p;
        g += in_g;
        both += in_p && in_g;
    }
    if (p + g == 0)
        return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::uint8_t> surface_voxels(const LabelMap& y, int c)
{
    const Dims d = y.dims;
    std::vector<std::uint8_t> s(y.data.size(), 0);
    auto inside = [&](int z, int yy, int x) {
        return z >= 0 && yy >= 0 && x >= 0 && z < d.d && yy < d.h && x < d.w && y.data[d.index(z, yy, x)] == c;
    };
    for (int z = 0; z < d.d; ++z)
        for (int yy = 0; yy < d.h; ++yy)
            for (int x = 0; x < d.w; ++x) {
                if (!inside(z, yy, x))
                    continue;
                const bool interior = inside(z - 1, yy, x) && inside(z + 1, yy, x) && inside(z, yy - 1, x) &&
                                      inside(z, yy + 1, x) && inside(z, yy, x - 1) && inside(z, yy, x + 1);
                s[d.index(z, yy, x)] = !interior;
            }
    return s;
}

std::optional<double> asd(const LabelMap& pred, const LabelMap& gt, int c, Spacing spacing)
{
    check_same(pred, gt, "asd");
    const auto sp = surface_voxels(pred, c);
    const auto sg = surface_voxels(gt, c);
    const bool has_p = std::find(sp.begin(), sp.end(), 1) != sp.end();
    const bool has_g = std::find(sg.begin(), sg.end(), 1) != sg.end();
    if (!has_p || !has_g)
        return std::nullopt;
    const auto to_gt = squared_distance_field(sg, pred.dims, spacing);
    const auto to_pred = squared_distance_field(sp, pred.dims, spacing);
    return 0.5 * (mean_distance(sp, to_gt) + mean_distance(sg, to_pred));
}

CaseMetrics case_metrics(const LabelMap& pred, const LabelMap& gt, Spacing spacing)
{
    CaseMetrics m;
    for (int c = 1; c < gt.num_classes; ++c) {
        m.dice.push_back(dice_score(pred, gt, c));
        m.asd.push_back(asd(pred, gt, c, spacing));
    }
    return m;
}

MetricsReport summarize(const std::vector<CaseMetrics>& cases, int num_classes, long iteration)
{
    MetricsReport r;
    r.iteration = iteration;
    r.volumes = cases.size();
    const int fg = num_classes - 1;
    r.per_class_dice.assign(fg, 0.0);
    r.per_class_asd.assign(fg, std::nullopt);
    r.asd_undefined.assign(fg, 0);
    if (cases.empty())
        throw Error("cannot summarize an empty evaluation set");
    for (int k = 0; k < fg; ++k) {
        double dsum = 0.0, asum = 0.0;
        int defined = 0;
        for (const auto& cm : cases) {
            dsum += cm.dice.at(k);
            if (cm.asd.at(k)) {
                asum += *cm.asd[k];
                ++defined;
            } else {
                ++r.asd_undefined[k];
            }
        }
        r.per_class_dice[k] = dsum / static_cast<double>(cases.size());
        if (defined > 0)
            r.per_class_asd[k] = asum / defined;
    }
    double dsum = 0.0, asum = 0.0;
    int adef = 0;
    for (int k = 0; k < fg; ++k) {
        dsum += r.per_class_dice[k];
        if (r.per_class_asd[k]) {
            asum += *r.per_class_asd[k];
            ++adef;
        }
    }
    r.avg_dice = dsum / fg;
    if (adef > 0)
        r.avg_asd = asum / adef;
    return r;
}

LabelMap predict(const ParamVector& params, const Volume& x)
{
    const auto out = forward(params, x);
    return argmax_label(softmax_over_classes(out.logits));
}

MetricsReport evaluate(const ParamVector& params, const std::vector<Sample>& val, long iteration)
{
    if (val.empty())
        throw Error("evaluate: validation set is empty");
    std::vector<CaseMetrics> cases;
    for (const auto& s : val) {
        if (!s.label)
            throw Error("evaluate: validation sample " + std::to_string(s.id) + " has no label");
        LabelMap pred;
        try {
            pred = predict(params, s.image);
        } catch (const ShapeError& e) {
            throw ShapeError("validation sample " + std::to_string(s.id) + ": " + e.what());
        }
        cases.push_back(case_metrics(pred, *s.label, s.image.spacing));
    }
    return summarize(cases, params.config.num_classes, iteration);
}

MetricsReport evaluate(const ParamVector& params, const SplitManifest& manifest, long iteration)
{
    return evaluate(params, load_split(manifest, SplitTag::Val, params.config.num_classes), iteration);
}

std::string report_json(const MetricsReport& r)
{
    nlohmann::ordered_json j;
    j["iteration"] = r.iteration;
    j["volumes"] = r.volumes;
    j["avg_dice"] = r.avg_dice;
    j["avg_asd"] = optional_number(r.avg_asd);
    j["per_class_dice"] = r.per_class_dice;
    auto asd_list = nlohmann::ordered_json::array();
    for (const auto& a : r.per_class_asd)
        asd_list.push_back(optional_number(a));
    j["per_class_asd"] = asd_list;
    j["asd_undefined"] = r.asd_undefined;
    return j.dump();
}

std::string report_table(const MetricsReport& r)
{
    std::ostringstream os;
    os << std::left << std::setw(10) << "Avg.Dice" << std::setw(10) << "Avg.ASD";
    for (std::size_t k = 0; k < r.per_class_dice.size(); ++k)
        os << std::setw(8) << ("C" + std::to_string(k + 1));
    os << '\n' << std::fixed << std::setprecision(2);
    os << std::setw(10) << 100.0 * r.avg_dice;
    if (r.avg_asd)
        os << std::setw(10) << *r.avg_asd;
    else
        os << std::setw(10) << "n/a";
    for (double d : r.per_class_dice)
        os << std::setw(8) << std::setprecision(1) << 100.0 * d;
    os << '\n';
    return os.str();
}

} // namespace micd
