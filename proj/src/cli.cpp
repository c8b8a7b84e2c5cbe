#include "micd/cli.hpp"

#include "micd/checkpoint.hpp"
#include "micd/data.hpp"
#include "micd/error.hpp"
#include "micd/metrics.hpp"
#include "micd/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace micd {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// Thrown for bad flag values detected after parsing.
struct UsageError : Error {
    using Error::Error;
};

Dims parse_dims(const std::string& text)
{
    std::vector<int> v;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',' || c == 'x') {
            if (cur.empty())
                throw UsageError("bad --dims '" + text + "'");
            v.push_back(static_cast<int>(parse_long("--dims", cur)));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (v.size() == 1)
        return {v[0], v[0], v[0]};
    if (v.size() == 3)
        return {v[0], v[1], v[2]};
    throw UsageError("--dims takes one edge or D,H,W, got '" + text + "'");
}

void apply_sets(ConfigMap& cfg, const std::vector<std::string>& sets)
{
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw UsageError("--set expects key=value, got '" + kv + "'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
}

// ---- gen-data ----

struct GenDataArgs {
    std::string out;
    int volumes = 12;
    int val = 4;
    double labeled_frac = 0.25;
    std::uint64_t seed = 0;
    std::string dims = "32";
    int classes = 5;
    double noise = 0.15;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out)
{
    SynthSpec spec;
    spec.num_volumes = a.volumes;
    spec.num_val = a.val;
    spec.dims = parse_dims(a.dims);
    spec.num_classes = a.classes;
    spec.noise_sigma = a.noise;
    spec.seed = a.seed;
    try {
        spec.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    const fs::path dir(a.out);
    const auto generated = generate_synthetic(spec, dir);
    const auto split = split_dataset(generated, a.labeled_frac, a.seed);
    const auto manifest_path = dir / "manifest.tsv";
    write_manifest(manifest_path, split);
    out << manifest_path.string() << '\n';
    out << split.count(SplitTag::Labeled) << " labeled, " << split.count(SplitTag::Unlabeled) << " unlabeled, "
        << split.count(SplitTag::Val) << " val\n";
    return kExitOk;
}

// ---- train / ablate shared flags ----

struct TrainArgs {
    std::string config;
    std::string manifest;
    std::string out;
    std::string resume;
    std::vector<std::string> sets;
    long iters = 0;
    std::uint64_t seed = 0;
    long eval_every = 0;
    long checkpoint_every = 0;
    int base_channels = 0;
    int classes = 0;
    std::string direction;
    bool no_mcpc = false;
    bool no_cfc = false;
    bool no_cmd = false;
    std::string subset = "mcpc,cfc,cmd";

    CLI::Option* iters_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* eval_opt = nullptr;
    CLI::Option* ckpt_opt = nullptr;
    CLI::Option* base_opt = nullptr;
    CLI::Option* classes_opt = nullptr;
};

void add_common_train_flags(CLI::App* sub, TrainArgs& a)
{
    sub->add_option("--config", a.config, "Config file (key = value lines)");
    sub->add_option("--manifest", a.manifest, "Split manifest (overrides data.manifest)");
    sub->add_option("--out", a.out, "Run directory")->required();
    sub->add_option("--set", a.sets, "Override a config key: key=value (repeatable)");
    a.iters_opt = sub->add_option("--iters", a.iters, "train.iters");
    a.seed_opt = sub->add_option("--seed", a.seed, "train.seed");
    a.eval_opt = sub->add_option("--eval-every", a.eval_every, "train.eval_every");
    a.ckpt_opt = sub->add_option("--checkpoint-every", a.checkpoint_every, "train.checkpoint_every");
    a.base_opt = sub->add_option("--base-channels", a.base_channels, "net.base_channels");
    a.classes_opt = sub->add_option("--classes", a.classes, "net.num_classes");
}

// Defaults, then the config file, then --set, then explicit flags.
ConfigMap layered_config(const TrainArgs& a)
{
    ConfigMap cfg;
    if (!a.config.empty())
        cfg.merge(ConfigMap::load(a.config));
    apply_sets(cfg, a.sets);
    if (a.iters_opt->count())
        cfg.set("train.iters", std::to_string(a.iters));
    if (a.seed_opt->count())
        cfg.set("train.seed", std::to_string(a.seed));
    if (a.eval_opt->count())
        cfg.set("train.eval_every", std::to_string(a.eval_every));
    if (a.ckpt_opt->count())
        cfg.set("train.checkpoint_every", std::to_string(a.checkpoint_every));
    if (a.base_opt->count())
        cfg.set("net.base_channels", std::to_string(a.base_channels));
    if (a.classes_opt->count())
        cfg.set("net.num_classes", std::to_string(a.classes));
    if (!a.manifest.empty())
        cfg.set("data.manifest", a.manifest);
    return cfg;
}

SplitManifest manifest_for(const TrainConfig& cfg)
{
    if (cfg.manifest.empty())
        throw UsageError("no manifest: pass --manifest or set data.manifest");
    if (!fs::exists(cfg.manifest))
        throw UsageError("manifest not found: " + cfg.manifest);
    return read_manifest(cfg.manifest);
}

int cmd_train(const TrainArgs& a, std::ostream& out)
{
    auto layered = layered_config(a);
    if (a.no_mcpc)
        layered.set("mcpc.enabled", "false");
    if (a.no_cfc)
        layered.set("cfc.enabled", "false");
    if (a.no_cmd)
        layered.set("cmd.enabled", "false");
    if (!a.direction.empty())
        layered.set("mcpc.direction", a.direction);
    TrainConfig cfg;
    try {
        cfg = TrainConfig::from_config(layered);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    const auto manifest = manifest_for(cfg);
    std::optional<fs::path> resume;
    if (!a.resume.empty())
        resume = a.resume;
    const auto result = run(cfg, manifest, a.out, resume);
    out << "trained " << result.state.iter << " iterations; final checkpoint " << result.final_checkpoint.string()
        << '\n';
    if (result.final_metrics)
        out << report_table(*result.final_metrics);
    return kExitOk;
}

// ---- eval ----

struct EvalArgs {
    std::string checkpoint;
    std::string manifest;
    std::string branch;
    std::string out;
    int classes = 0;
    int base_channels = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out)
{
    const auto ckpt = read_checkpoint(a.checkpoint);
    // The checkpoint's config echo supplies the network shape unless overridden.
    ConfigMap layered = ckpt.config;
    if (a.classes > 0)
        layered.set("net.num_classes", std::to_string(a.classes));
    if (a.base_channels > 0)
        layered.set("net.base_channels", std::to_string(a.base_channels));
    if (!a.branch.empty())
        layered.set("eval.branch", a.branch);
    TrainConfig cfg;
    try {
        cfg = TrainConfig::from_config(layered);
    } catch (const FormatError& e) {
        throw UsageError(e.what());
    }
    const auto layout = init_network(cfg.net, 0);
    const auto params = extract_params(ckpt, cfg.eval_branch == 'a' ? "student_a" : "student_b", layout);
    if (!fs::exists(a.manifest))
        throw UsageError("manifest not found: " + a.manifest);
    const auto report = evaluate(params, read_manifest(a.manifest), ckpt.iteration);
    out << report_table(report);
    out << report_json(report) << '\n';
    if (!a.out.empty()) {
        std::ofstream f(a.out, std::ios::trunc);
        if (!f)
            throw Error("cannot open " + a.out + " for writing");
        f << report_json(report) << '\n';
    }
    return kExitOk;
}

// ---- ablate ----

std::vector<std::string> parse_subset(const std::string& text)
{
    static const std::vector<std::string> known = {"mcpc", "cfc", "cmd"};
    std::vector<std::string> picked;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty())
            continue;
        if (std::find(known.begin(), known.end(), item) == known.end())
            throw UsageError("unknown module '" + item + "' in --subset (expected mcpc, cfc, cmd)");
        if (std::find(picked.begin(), picked.end(), item) != picked.end())
            throw UsageError("module '" + item + "' listed twice in --subset");
        picked.push_back(item);
    }
    if (picked.empty())
        throw UsageError("--subset names no module");
    // Canonical column order regardless of how the flag listed them.
    std::vector<std::string> ordered;
    for (const auto& k : known)
        if (std::find(picked.begin(), picked.end(), k) != picked.end())
            ordered.push_back(k);
    return ordered;
}

int cmd_ablate(const TrainArgs& a, std::ostream& out, std::ostream& err)
{
    const auto modules = parse_subset(a.subset);
    const auto base = layered_config(a);
    const std::size_t rows = std::size_t{1} << modules.size();

    Json table = Json::array();
    std::ostringstream text;
    text << std::left;
    for (const auto& m : modules) {
        std::string upper = m;
        std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
        text << std::setw(6) << upper;
    }
    text << std::setw(10) << "Avg.Dice" << std::setw(10) << "Avg.ASD" << "status\n";

    bool failed = false;
    for (std::size_t row = 0; row < rows; ++row) {
        ConfigMap layered = base;
        // Modules outside the subset stay off.
        for (const char* m : {"mcpc", "cfc", "cmd"})
            layered.set(std::string(m) + ".enabled", "false");
        std::string tag;
        Json rec;
        for (std::size_t j = 0; j < modules.size(); ++j) {
            const bool on = (row >> (modules.size() - 1 - j)) & 1u;
            layered.set(modules[j] + ".enabled", on ? "true" : "false");
            rec[modules[j]] = on;
            tag += (tag.empty() ? "" : "_") + modules[j] + (on ? "1" : "0");
        }
        for (std::size_t j = 0; j < modules.size(); ++j)
            text << std::setw(6) << (rec[modules[j]].get<bool>() ? "x" : "");

        try {
            TrainConfig cfg;
            try {
                cfg = TrainConfig::from_config(layered);
            } catch (const FormatError& e) {
                throw UsageError(e.what());
            }
            const auto manifest = manifest_for(cfg);
            const auto result = run(cfg, manifest, fs::path(a.out) / ("run_" + tag));
            const auto& params = cfg.eval_branch == 'a' ? result.state.a.student : result.state.b.student;
            const auto report = evaluate(params, manifest, result.state.iter);
            rec["status"] = "ok";
            rec["report"] = Json::parse(report_json(report));
            std::ostringstream dice, asd_text;
            dice << std::fixed << std::setprecision(2) << 100.0 * report.avg_dice;
            if (report.avg_asd)
                asd_text << std::fixed << std::setprecision(2) << *report.avg_asd;
            else
                asd_text << "n/a";
            text << std::setw(10) << dice.str() << std::setw(10) << asd_text.str() << "ok\n";
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception& e) {
            failed = true;
            rec["status"] = "failed";
            rec["error"] = e.what();
            text << std::setw(10) << "-" << std::setw(10) << "-" << "failed\n";
            err << "ablation run " << tag << " failed: " << e.what() << '\n';
        }
        table.push_back(rec);
    }

    fs::create_directories(a.out);
    {
        std::ofstream f(fs::path(a.out) / "ablation.json", std::ios::trunc);
        f << table.dump(2) << '\n';
        std::ofstream t(fs::path(a.out) / "ablation.txt", std::ios::trunc);
        t << text.str();
        if (!f || !t)
            throw Error("cannot write ablation results under " + a.out);
    }
    out << text.str();
    return failed ? kExitAblation : kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"MICD semi-supervised 3D segmentation", "micd"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic labeled dataset and split manifest");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--volumes", gen.volumes, "Train volumes")->capture_default_str();
    gen_cmd->add_option("--val", gen.val, "Validation volumes")->capture_default_str();
    gen_cmd->add_option("--labeled-frac", gen.labeled_frac, "Fraction of train volumes kept labeled")
        ->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed, "Generator and split seed")->capture_default_str();
    gen_cmd->add_option("--dims", gen.dims, "Edge length or D,H,W")->capture_default_str();
    gen_cmd->add_option("--classes", gen.classes, "Classes including background")->capture_default_str();
    gen_cmd->add_option("--noise", gen.noise, "Gaussian noise sigma")->capture_default_str();

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train both branches on a manifest");
    add_common_train_flags(train_cmd, train);
    train_cmd->add_flag("--no-mcpc", train.no_mcpc, "Disable masked cross pseudo consistency");
    train_cmd->add_flag("--no-cfc", train.no_cfc, "Disable cross feature consistency");
    train_cmd->add_flag("--no-cmd", train.no_cmd, "Disable cross model discrepancy");
    train_cmd->add_option("--mcpc-direction", train.direction, "eq3 or prose")
        ->check(CLI::IsMember({"eq3", "prose"}));
    train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the val split");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--manifest", ev.manifest, "Split manifest")->required();
    eval_cmd->add_option("--branch", ev.branch, "Student branch to evaluate (a or b)")
        ->check(CLI::IsMember({"a", "b"}));
    eval_cmd->add_option("--classes", ev.classes, "Override net.num_classes");
    eval_cmd->add_option("--base-channels", ev.base_channels, "Override net.base_channels");
    eval_cmd->add_option("--report", ev.out, "Also write the JSON report here");

    TrainArgs abl;
    auto* abl_cmd = app.add_subcommand("ablate", "Train every on/off combination of the consistency modules");
    add_common_train_flags(abl_cmd, abl);
    abl_cmd->add_option("--subset", abl.subset, "Comma-separated modules to vary")->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen_cmd->parsed())
            return cmd_gen_data(gen, out);
        if (train_cmd->parsed())
            return cmd_train(train, out);
        if (eval_cmd->parsed())
            return cmd_eval(ev, out);
        if (abl_cmd->parsed())
            return cmd_ablate(abl, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n' << app.help();
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << '\n';
        return kExitCheckpoint;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace micd
