#include "micd/trainer.hpp"

#include "micd/error.hpp"
#include "micd/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>

namespace micd {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string to_string(McpcDirection d) { return d == McpcDirection::Eq3 ? "eq3" : "prose"; }

// ---- config ----

ConfigMap default_train_config() { return TrainConfig{}.to_config(); }

void TrainConfig::validate() const
{
    if (total_iters < 1)
        throw Error("train.iters must be >= 1");
    if (!(lr0 > 0.0) || !std::isfinite(lr0))
        throw Error("train.lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw Error("train.momentum must lie in [0, 1)");
    if (!(poly_power >= 0.0))
        throw Error("train.poly_power must be >= 0");
    net.validate();
    MaskSpec{mask_ratio, mask_patch_edge, mask_seed}.validate();
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0))
        throw Error("ema.alpha must lie in [0, 1]");
    if (!(beta_max >= 0.0) || !std::isfinite(beta_max))
        throw Error("rampup.beta_max must be >= 0");
    if (!(rampup_fraction > 0.0 && rampup_fraction <= 1.0))
        throw Error("rampup.fraction must lie in (0, 1]");
    if (diff_every < 1)
        throw Error("weights.diff_every must be >= 1");
    if (checkpoint_every < 0 || eval_every < 0)
        throw Error("train.checkpoint_every and train.eval_every must be >= 0");
    if (eval_branch != 'a' && eval_branch != 'b')
        throw Error("eval.branch must be 'a' or 'b'");
}

RampUpSchedule TrainConfig::rampup() const
{
    const auto ramp = std::llround(rampup_fraction * static_cast<double>(total_iters));
    return {beta_max, std::max(1L, static_cast<long>(ramp))};
}

TrainConfig TrainConfig::from_config(const ConfigMap& map)
{
    TrainConfig c;
    bool mask_seed_given = false;
    for (const auto& [key, value] : map.values()) {
        if (key == "train.iters")
            c.total_iters = parse_long(key, value);
        else if (key == "train.lr")
            c.lr0 = parse_double(key, value);
        else if (key == "train.momentum")
            c.momentum = parse_double(key, value);
        else if (key == "train.poly_power")
            c.poly_power = parse_double(key, value);
        else if (key == "train.seed")
            c.seed = static_cast<std::uint64_t>(parse_long(key, value));
        else if (key == "train.checkpoint_every")
            c.checkpoint_every = parse_long(key, value);
        else if (key == "train.eval_every")
            c.eval_every = parse_long(key, value);
        else if (key == "net.num_classes")
            c.net.num_classes = static_cast<int>(parse_long(key, value));
        else if (key == "net.base_channels")
            c.net.base_channels = static_cast<int>(parse_long(key, value));
        else if (key == "mask.ratio")
            c.mask_ratio = parse_double(key, value);
        else if (key == "mask.patch_edge")
            c.mask_patch_edge = static_cast<int>(parse_long(key, value));
        else if (key == "mask.seed") {
            c.mask_seed = static_cast<std::uint64_t>(parse_long(key, value));
            mask_seed_given = true;
        } else if (key == "ema.alpha")
            c.ema_alpha = parse_double(key, value);
        else if (key == "rampup.beta_max")
            c.beta_max = parse_double(key, value);
        else if (key == "rampup.fraction")
            c.rampup_fraction = parse_double(key, value);
        else if (key == "mcpc.direction") {
            if (value == "eq3")
                c.mcpc_direction = McpcDirection::Eq3;
            else if (value == "prose")
                c.mcpc_direction = McpcDirection::Prose;
            else
                throw FormatError("mcpc.direction must be 'eq3' or 'prose', got '" + value + "'");
        } else if (key == "mcpc.enabled")
            c.mcpc = parse_bool(key, value);
        else if (key == "cfc.enabled")
            c.cfc = parse_bool(key, value);
        else if (key == "cmd.enabled")
            c.cmd = parse_bool(key, value);
        else if (key == "weights.diff_every")
            c.diff_every = parse_long(key, value);
        else if (key == "data.manifest")
            c.manifest = value;
        else if (key == "eval.branch") {
            if (value != "a" && value != "b")
                throw FormatError("eval.branch must be 'a' or 'b', got '" + value + "'");
            c.eval_branch = value[0];
        } else
            throw FormatError("unknown config key '" + key + "'");
    }
    // The mask stream follows the run seed unless pinned separately.
    if (!mask_seed_given)
        c.mask_seed = c.seed;
    c.validate();
    return c;
}

ConfigMap TrainConfig::to_config() const
{
    ConfigMap m;
    m.set("train.iters", std::to_string(total_iters));
    m.set("train.lr", format_double(lr0));
    m.set("train.momentum", format_double(momentum));
    m.set("train.poly_power", format_double(poly_power));
    m.set("train.seed", std::to_string(seed));
    m.set("train.checkpoint_every", std::to_string(checkpoint_every));
    m.set("train.eval_every", std::to_string(eval_every));
    m.set("net.num_classes", std::to_string(net.num_classes));
    m.set("net.base_channels", std::to_string(net.base_channels));
    m.set("mask.ratio", format_double(mask_ratio));
    m.set("mask.patch_edge", std::to_string(mask_patch_edge));
    m.set("mask.seed", std::to_string(mask_seed));
    m.set("ema.alpha", format_double(ema_alpha));
    m.set("rampup.beta_max", format_double(beta_max));
    m.set("rampup.fraction", format_double(rampup_fraction));
    m.set("mcpc.direction", to_string(mcpc_direction));
    m.set("mcpc.enabled", mcpc ? "true" : "false");
    m.set("cfc.enabled", cfc ? "true" : "false");
    m.set("cmd.enabled", cmd ? "true" : "false");
    m.set("weights.diff_every", std::to_string(diff_every));
    m.set("data.manifest", manifest);
    m.set("eval.branch", std::string(1, eval_branch));
    return m;
}

double poly_lr(long t, const TrainConfig& cfg)
{
    if (t < 0 || t > cfg.total_iters)
        throw Error("poly_lr: iteration " + std::to_string(t) + " outside [0, " + std::to_string(cfg.total_iters) + "]");
    const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(cfg.total_iters);
    return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

// ---- state ----

TrainerState init_state(const TrainConfig& cfg, const std::vector<Sample>& labeled)
{
    cfg.validate();
    if (labeled.empty())
        throw Error("training needs at least one labeled volume");
    TrainerState s;
    auto make_branch = [&](const char* purpose) {
        Branch b;
        b.student = init_network(cfg.net, derive_seed(cfg.seed, purpose));
        b.teacher = init_teacher(b.student, cfg.ema_alpha);
        b.momentum = b.student.zeros_like();
        return b;
    };
    s.a = make_branch("branch-a");
    s.b = make_branch("branch-b");

    const int nc = cfg.net.num_classes;
    s.stats = ClassStats::empty(nc);
    for (const auto& sample : labeled) {
        if (!sample.label)
            throw Error("labeled sample " + std::to_string(sample.id) + " has no label");
        if (sample.label->num_classes != nc)
            throw ShapeError("label map has " + std::to_string(sample.label->num_classes) + " classes, network has " +
                             std::to_string(nc));
        for (auto v : sample.label->data)
            ++s.stats.voxel_counts[v];
    }
    s.weights.w_dist = dist_weights(s.stats);
    s.weights.w_diff = diff_weights(s.stats);
    return s;
}

namespace {

// One forward pass of one student on one input view.
struct Pass {
    bool active = false;
    bool needs_grad = false;
    ForwardCache cache;
    ForwardOutput out;
    ProbMap p;
    LabelMap hard;
    OutputGrad grad;
    std::vector<double> grad_p;

    void run(const ParamVector& params, const Volume& x, bool with_grad)
    {
        active = true;
        needs_grad = with_grad;
        out = with_grad ? forward(params, x, cache) : forward(params, x);
        p = softmax_over_classes(out.logits);
        hard = argmax_label(p);
        if (with_grad) {
            grad = OutputGrad::zeros_like(out);
            grad_p.assign(p.data.size(), 0.0);
        }
    }

    // Hard labels for this pass: the frozen ones when given, else our own.
    void sync(std::optional<LabelMap>& slot, bool use_fixed)
    {
        if (!active)
            return;
        if (use_fixed) {
            if (!slot)
                throw Error("fixed pseudo-targets lack a label the configuration needs");
            hard = *slot;
        } else {
            slot = hard;
        }
    }

    GradSink prob_sink(double scale) { return needs_grad && scale != 0.0 ? GradSink{grad_p, scale} : GradSink{}; }

    StageSinks feature_sinks(double scale)
    {
        StageSinks s;
        if (needs_grad && scale != 0.0) {
            for (int k = 0; k < kDecoderStages; ++k)
                s[k] = GradSink{grad.features[k], scale};
        }
        return s;
    }

    void backprop(const ParamVector& params, ParamVector& g)
    {
        if (!active || !needs_grad)
            return;
        grad.logits = softmax_backward(p, grad_p);
        backward(params, cache, grad, g);
    }
};

struct SampleViews {
    Pass a_plain, b_plain, a_masked, b_masked;
    LabelMap teacher_a, teacher_b;
};

void sgd_step(ParamVector& params, ParamVector& velocity, const ParamVector& grad, double lr, double mu)
{
    for (std::size_t t = 0; t < params.tensors.size(); ++t) {
        auto& p = params.tensors[t].values;
        auto& v = velocity.tensors[t].values;
        const auto& g = grad.tensors[t].values;
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = mu * v[i] + g[i];
            p[i] -= lr * v[i];
        }
    }
}

bool all_finite(const ParamVector& p)
{
    for (const auto& t : p.tensors)
        for (double v : t.values)
            if (!std::isfinite(v))
                return false;
    return true;
}

} // namespace

std::string breakdown_json(long iter, const LossBreakdown& b, double lr)
{
    Json j;
    j["iter"] = iter;
    j["sup"] = b.sup;
    j["cps"] = b.cps;
    j["con"] = b.con;
    j["dis"] = b.dis;
    j["beta"] = b.beta;
    j["total"] = b.total;
    j["lr"] = lr;
    return j.dump();
}

ObjectiveResult compute_objective(const TrainerState& state, const TrainConfig& cfg, const Sample& labeled,
                                  const Sample& unlabeled, const std::optional<LossCoefficients>& coef,
                                  const PseudoTargets* fixed)
{
    if (!labeled.label)
        throw Error("labeled sample " + std::to_string(labeled.id) + " has no label");
    const long t = state.iter;
    const double beta = rampup_beta(t, cfg.rampup());
    const LossCoefficients c = coef.value_or(LossCoefficients{1.0, beta, beta, beta});
    const bool eq3 = cfg.mcpc_direction == McpcDirection::Eq3;

    ObjectiveResult res;
    const Sample* samples[2] = {&labeled, &unlabeled};
    SampleViews views[2];

    // (1)-(3) one mask per image, student forwards on both views, teacher forwards.
    for (int s = 0; s < 2; ++s) {
        const Sample& smp = *samples[s];
        auto& v = views[s];
        auto& slots = res.targets.samples[s];
        const bool is_labeled = s == 0;
        const bool plain_needed = is_labeled || cfg.mcpc || cfg.cfc;
        const bool plain_grad = is_labeled || (cfg.mcpc && eq3) || cfg.cfc;
        const bool masked_needed = cfg.mcpc || cfg.cmd;
        const bool masked_grad = (cfg.mcpc && !eq3) || cfg.cmd;

        if (plain_needed) {
            v.a_plain.run(state.a.student, smp.image, plain_grad);
            v.b_plain.run(state.b.student, smp.image, plain_grad);
        }
        if (masked_needed) {
            const MaskSpec spec{cfg.mask_ratio, cfg.mask_patch_edge, derive_seed(cfg.mask_seed, "mask", smp.id, t)};
            const Volume xm = apply_mask(smp.image, generate_mask(spec, smp.image.dims));
            v.a_masked.run(state.a.student, xm, masked_grad);
            v.b_masked.run(state.b.student, xm, masked_grad);
        }
        if (cfg.cmd) {
            if (fixed) {
                const auto& f = fixed->samples[s];
                if (!f.teacher_a || !f.teacher_b)
                    throw Error("fixed pseudo-targets lack teacher labels");
                v.teacher_a = *f.teacher_a;
                v.teacher_b = *f.teacher_b;
            } else {
                v.teacher_a = argmax_label(softmax_over_classes(forward(state.a.teacher.params, smp.image).logits));
                v.teacher_b = argmax_label(softmax_over_classes(forward(state.b.teacher.params, smp.image).logits));
            }
            slots.teacher_a = v.teacher_a;
            slots.teacher_b = v.teacher_b;
        }
        auto fixed_slots = fixed ? fixed->samples[s] : PseudoTargets::PerSample{};
        auto& src = fixed ? fixed_slots : slots;
        v.a_plain.sync(src.plain_a, fixed != nullptr);
        v.b_plain.sync(src.plain_b, fixed != nullptr);
        v.a_masked.sync(src.masked_a, fixed != nullptr);
        v.b_masked.sync(src.masked_b, fixed != nullptr);
        if (fixed) {
            slots.plain_a = fixed_slots.plain_a;
            slots.plain_b = fixed_slots.plain_b;
            slots.masked_a = fixed_slots.masked_a;
            slots.masked_b = fixed_slots.masked_b;
        }
    }

    // (4) losses. Consistency terms are averaged over the two samples.
    LossParts parts;
    auto& L = views[0];
    parts.sup = sup_loss(L.a_plain.p, L.b_plain.p, labeled.label, state.weights, L.a_plain.prob_sink(c.sup),
                         L.b_plain.prob_sink(c.sup));
    for (auto& v : views) {
        if (cfg.mcpc) {
            const double g = 0.5 * c.cps;
            if (eq3)
                parts.cps += 0.5 * cps_loss(v.a_plain.p, v.b_plain.p, v.b_masked.hard, v.a_masked.hard, state.weights,
                                            v.a_plain.prob_sink(g), v.b_plain.prob_sink(g));
            else
                parts.cps += 0.5 * cps_loss(v.a_masked.p, v.b_masked.p, v.b_plain.hard, v.a_plain.hard, state.weights,
                                            v.a_masked.prob_sink(g), v.b_masked.prob_sink(g));
        }
        if (cfg.cfc) {
            const double g = 0.5 * c.con;
            parts.con += 0.5 * cfc_loss(v.a_plain.out.decoder_features, v.b_plain.out.decoder_features,
                                        v.a_plain.feature_sinks(g), v.b_plain.feature_sinks(g));
        }
        if (cfg.cmd) {
            const double g = 0.5 * c.dis;
            parts.dis += 0.5 * cmd_loss(v.a_masked.p, v.b_masked.p, v.teacher_a, v.teacher_b, v.a_masked.prob_sink(g),
                                        v.b_masked.prob_sink(g));
        }
    }

    // (5) objective.
    const LossBreakdown raw{parts.sup, parts.cps, parts.con, parts.dis, beta,
                            parts.sup + beta * (parts.cps + parts.con + parts.dis)};
    if (!std::isfinite(raw.total))
        throw NumericError("non-finite training objective: " + breakdown_json(t, raw, poly_lr(t, cfg)));
    res.breakdown = total_loss(parts, beta);
    res.value = c.sup * parts.sup + c.cps * parts.cps + c.con * parts.con + c.dis * parts.dis;

    res.grad_a = state.a.student.zeros_like();
    res.grad_b = state.b.student.zeros_like();
    for (auto& v : views) {
        v.a_plain.backprop(state.a.student, res.grad_a);
        v.a_masked.backprop(state.a.student, res.grad_a);
        v.b_plain.backprop(state.b.student, res.grad_b);
        v.b_masked.backprop(state.b.student, res.grad_b);
    }
    if (!all_finite(res.grad_a) || !all_finite(res.grad_b))
        throw NumericError("non-finite gradient: " + breakdown_json(t, res.breakdown, poly_lr(t, cfg)));
    return res;
}

LossBreakdown train_step(TrainerState& state, const TrainConfig& cfg, const Sample& labeled, const Sample& unlabeled)
{
    const long t = state.iter;
    const double lr = poly_lr(t, cfg);
    auto obj = compute_objective(state, cfg, labeled, unlabeled);

    // (6) SGD with momentum on both students, (7) then the teachers.
    sgd_step(state.a.student, state.a.momentum, obj.grad_a, lr, cfg.momentum);
    sgd_step(state.b.student, state.b.momentum, obj.grad_b, lr, cfg.momentum);
    ema_update(state.a.teacher, state.a.student);
    ema_update(state.b.teacher, state.b.student);

    // Class statistics from the labeled predictions of both branches.
    const auto& own = obj.targets.samples[0];
    const int nc = cfg.net.num_classes;
    std::vector<double> dice(nc);
    for (int c = 0; c < nc; ++c)
        dice[c] = 0.5 * (dice_score(*own.plain_a, *labeled.label, c) + dice_score(*own.plain_b, *labeled.label, c));
    state.stats = update_stats(state.stats, dice);
    ++state.iter;
    if (state.iter % cfg.diff_every == 0)
        state.weights.w_diff = diff_weights(state.stats);
    return obj.breakdown;
}

// ---- checkpoints ----

Checkpoint make_checkpoint(const TrainerState& state, const TrainConfig& cfg)
{
    Checkpoint c;
    c.iteration = state.iter;
    c.config = cfg.to_config();
    add_params(c, "student_a", state.a.student);
    add_params(c, "student_b", state.b.student);
    add_params(c, "teacher_a", state.a.teacher.params);
    add_params(c, "teacher_b", state.b.teacher.params);
    add_params(c, "momentum_a", state.a.momentum);
    add_params(c, "momentum_b", state.b.momentum);
    const int nc = static_cast<int>(state.stats.voxel_counts.size());
    std::vector<double> counts(state.stats.voxel_counts.begin(), state.stats.voxel_counts.end());
    c.tensors.push_back({"stats.voxel_counts", {nc}, counts});
    c.tensors.push_back({"stats.ema_dice", {nc}, state.stats.ema_dice});
    c.tensors.push_back({"weights.w_dist", {nc}, state.weights.w_dist});
    c.tensors.push_back({"weights.w_diff", {nc}, state.weights.w_diff});
    return c;
}

TrainerState restore_state(const Checkpoint& ckpt, const TrainConfig& cfg)
{
    const ParamVector layout = init_network(cfg.net, 0);
    TrainerState s;
    s.iter = ckpt.iteration;
    s.a.student = extract_params(ckpt, "student_a", layout);
    s.b.student = extract_params(ckpt, "student_b", layout);
    s.a.teacher = {extract_params(ckpt, "teacher_a", layout), cfg.ema_alpha};
    s.b.teacher = {extract_params(ckpt, "teacher_b", layout), cfg.ema_alpha};
    s.a.momentum = extract_params(ckpt, "momentum_a", layout);
    s.b.momentum = extract_params(ckpt, "momentum_b", layout);

    const auto nc = static_cast<std::size_t>(cfg.net.num_classes);
    auto vec = [&](const std::string& name) {
        const auto* t = ckpt.find(name);
        if (!t)
            throw CheckpointError("checkpoint is missing tensor '" + name + "'");
        if (t->values.size() != nc)
            throw CheckpointError("tensor '" + name + "' has " + std::to_string(t->values.size()) +
                                  " entries, expected " + std::to_string(nc));
        return t->values;
    };
    for (double v : vec("stats.voxel_counts"))
        s.stats.voxel_counts.push_back(static_cast<std::uint64_t>(v));
    s.stats.ema_dice = vec("stats.ema_dice");
    s.weights.w_dist = vec("weights.w_dist");
    s.weights.w_diff = vec("weights.w_diff");
    return s;
}

// ---- run ----

std::size_t sample_index(std::uint64_t seed, const char* stream, long t, std::size_t n)
{
    if (n == 0)
        throw Error(std::string("cannot draw from an empty ") + stream + " split");
    const auto epoch = static_cast<std::uint64_t>(t) / n;
    const auto pos = static_cast<std::uint64_t>(t) % n;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, stream, epoch));
    rng.shuffle(order.begin(), order.end());
    return order[pos];
}

namespace {

std::ofstream open_log(const fs::path& path, std::ios::openmode mode)
{
    std::ofstream out(path, mode);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    return out;
}

// Keeps the records of `path` with "iter" < `before`, dropping the rest.
void truncate_log(const fs::path& path, long before)
{
    std::ifstream in(path);
    if (!in)
        return;
    std::vector<std::string> kept;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        const auto j = Json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("iter"))
            throw FormatError(path.string() + ": unreadable log record");
        if (j["iter"].get<long>() < before)
            kept.push_back(line);
    }
    in.close();
    auto out = open_log(path, std::ios::trunc);
    for (const auto& l : kept)
        out << l << '\n';
}

} // namespace

RunResult run(const TrainConfig& cfg, const SplitManifest& manifest, const fs::path& out_dir,
              const std::optional<fs::path>& resume)
{
    cfg.validate();
    manifest.validate();
    const int nc = cfg.net.num_classes;
    const auto labeled = load_split(manifest, SplitTag::Labeled, nc);
    const auto unlabeled = load_split(manifest, SplitTag::Unlabeled, nc);
    const auto val = cfg.eval_every > 0 ? load_split(manifest, SplitTag::Val, nc) : std::vector<Sample>{};
    if (labeled.empty())
        throw Error("manifest has no labeled volumes");
    // Without unlabeled volumes the labeled pool doubles as the unlabeled stream.
    const auto& unl = unlabeled.empty() ? labeled : unlabeled;

    fs::create_directories(out_dir);
    const auto loss_path = out_dir / "loss.jsonl";
    const auto metrics_path = out_dir / "metrics.jsonl";

    RunResult result;
    TrainerState& state = result.state;
    if (resume) {
        state = restore_state(read_checkpoint(*resume), cfg);
        if (state.iter > cfg.total_iters)
            throw CheckpointError("checkpoint iteration " + std::to_string(state.iter) + " exceeds train.iters");
        truncate_log(loss_path, state.iter);
        truncate_log(metrics_path, state.iter);
    } else {
        state = init_state(cfg, labeled);
        open_log(loss_path, std::ios::trunc);
        open_log(metrics_path, std::ios::trunc);
    }
    {
        auto echo = open_log(out_dir / "config.cfg", std::ios::trunc);
        echo << cfg.to_config().dump();
    }
    auto loss_log = open_log(loss_path, std::ios::app);
    auto metrics_log = open_log(metrics_path, std::ios::app);

    const auto& eval_params = [&]() -> const ParamVector& {
        return cfg.eval_branch == 'a' ? state.a.student : state.b.student;
    };

    while (state.iter < cfg.total_iters) {
        const long t = state.iter;
        const Sample& l = labeled[sample_index(cfg.seed, "labeled-order", t, labeled.size())];
        const Sample& u = unl[sample_index(cfg.seed, "unlabeled-order", t, unl.size())];
        const auto bd = train_step(state, cfg, l, u);
        loss_log << breakdown_json(t, bd, poly_lr(t, cfg)) << '\n';
        loss_log.flush();

        if (state.iter % cfg.diff_every == 0) {
            Json j;
            j["iter"] = t;
            j["event"] = "weights";
            j["w_dist"] = state.weights.w_dist;
            j["w_diff"] = state.weights.w_diff;
            j["ema_dice"] = state.stats.ema_dice;
            metrics_log << j.dump() << '\n';
        }
        if (cfg.eval_every > 0 && state.iter % cfg.eval_every == 0 && !val.empty()) {
            const auto report = evaluate(eval_params(), val, state.iter);
            auto j = Json::parse(report_json(report));
            Json rec;
            rec["iter"] = t;
            rec["event"] = "eval";
            rec["report"] = j;
            metrics_log << rec.dump() << '\n';
            result.final_metrics = report;
        }
        metrics_log.flush();
        if (cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof name, "checkpoint_%06ld.mckp", state.iter);
            write_checkpoint(out_dir / name, make_checkpoint(state, cfg));
        }
    }
    if (!loss_log || !metrics_log)
        throw Error("write failed under " + out_dir.string());

    result.final_checkpoint = out_dir / "checkpoint_final.mckp";
    write_checkpoint(result.final_checkpoint, make_checkpoint(state, cfg));
    return result;
}

} // namespace micd
