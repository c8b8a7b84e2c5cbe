#pragma once

#include "micd/checkpoint.hpp"
#include "micd/config.hpp"
#include "micd/data.hpp"
#include "micd/ema.hpp"
#include "micd/losses.hpp"
#include "micd/masking.hpp"
#include "micd/metrics.hpp"
#include "micd/network.hpp"
#include "micd/weights.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>

namespace micd {

enum class McpcDirection {
    Eq3,  // unmasked predictions learn from masked-input pseudo-labels
    Prose // masked predictions learn from unmasked-input pseudo-labels
};

std::string to_string(McpcDirection d);

struct TrainConfig {
    long total_iters = 2000;
    double lr0 = 0.01;
    double momentum = 0.9;
    double poly_power = 0.9;
    std::uint64_t seed = 0;

    NetworkConfig net{1, 5, 8};

    double mask_ratio = 0.4;
    int mask_patch_edge = 3;
    std::uint64_t mask_seed = 0;

    double ema_alpha = 0.99;
    double beta_max = 1.0;
    double rampup_fraction = 0.4;

    McpcDirection mcpc_direction = McpcDirection::Eq3;
    bool mcpc = true;
    bool cfc = true;
    bool cmd = true;

    long diff_every = 100;
    long checkpoint_every = 500;
    long eval_every = 0; // 0 disables periodic evaluation
    char eval_branch = 'a';

    std::string manifest; // informational; run() takes the manifest explicitly

    void validate() const;
    RampUpSchedule rampup() const;

    // Keys not listed in the schema are rejected.
    static TrainConfig from_config(const ConfigMap& map);
    ConfigMap to_config() const;
};

// Every key understood by TrainConfig::from_config, with its default.
ConfigMap default_train_config();

double poly_lr(long t, const TrainConfig& cfg);

struct Branch {
    ParamVector student;
    TeacherState teacher;
    ParamVector momentum;
};

struct TrainerState {
    long iter = 0;
    Branch a;
    Branch b;
    ClassStats stats;
    ClassWeights weights;
};

// Fresh state: branches initialized from independent seeds, class
// distribution weights from the labeled voxel counts.
TrainerState init_state(const TrainConfig& cfg, const std::vector<Sample>& labeled);

// Hard labels produced during one objective evaluation, per sample (0 =
// labeled, 1 = unlabeled). Passing them back in freezes every pseudo-label,
// which is what a finite-difference check of the objective needs.
struct PseudoTargets {
    struct PerSample {
        std::optional<LabelMap> plain_a, plain_b;     // argmax of students on x
        std::optional<LabelMap> masked_a, masked_b;   // argmax of students on masked x
        std::optional<LabelMap> teacher_a, teacher_b; // argmax of teachers on x
    };
    std::array<PerSample, 2> samples;
};

// Multipliers of the four terms in the differentiated scalar. The default
// (nullopt) is the training objective: 1, beta, beta, beta.
struct LossCoefficients {
    double sup = 1.0;
    double cps = 0.0;
    double con = 0.0;
    double dis = 0.0;
};

struct ObjectiveResult {
    LossBreakdown breakdown;
    double value = 0.0; // sum of coefficient * term
    ParamVector grad_a;
    ParamVector grad_b;
    PseudoTargets targets;
};

// Loss terms and exact student gradients at state.iter, without updating
// anything. Toggled-off terms are 0 and contribute no gradient.
ObjectiveResult compute_objective(const TrainerState& state, const TrainConfig& cfg, const Sample& labeled,
                                  const Sample& unlabeled, const std::optional<LossCoefficients>& coef = std::nullopt,
                                  const PseudoTargets* fixed = nullptr);

// One co-training iteration on one labeled and one unlabeled sample.
// Advances state.iter. Throws NumericError carrying the JSON breakdown when
// the objective is not finite.
LossBreakdown train_step(TrainerState& state, const TrainConfig& cfg, const Sample& labeled, const Sample& unlabeled);

Checkpoint make_checkpoint(const TrainerState& state, const TrainConfig& cfg);
TrainerState restore_state(const Checkpoint& ckpt, const TrainConfig& cfg);

// Index into a split of size n at iteration t: a fresh seeded permutation per
// pass over the split.
std::size_t sample_index(std::uint64_t seed, const char* stream, long t, std::size_t n);

struct RunResult {
    TrainerState state;
    std::filesystem::path final_checkpoint;
    std::optional<MetricsReport> final_metrics;
};

// Runs cfg.total_iters steps, writing under out_dir:
//   config.cfg             config echo
//   loss.jsonl             one LossBreakdown record per iteration
//   metrics.jsonl          weight recomputations and evaluation reports
//   checkpoint_NNNNNN.mckp every checkpoint_every iterations
//   checkpoint_final.mckp
// With `resume`, continues from that checkpoint; earlier loss records in
// out_dir are kept and later ones replaced.
RunResult run(const TrainConfig& cfg, const SplitManifest& manifest, const std::filesystem::path& out_dir,
              const std::optional<std::filesystem::path>& resume = std::nullopt);

std::string breakdown_json(long iter, const LossBreakdown& b, double lr);

} // namespace micd
