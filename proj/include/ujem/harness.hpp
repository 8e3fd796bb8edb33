#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ujem/attack.hpp"
#include "ujem/config.hpp"
#include "ujem/decode.hpp"
#include "ujem/model.hpp"

namespace ujem {

// Everything a batch experiment needs: the model family and calibration, the
// attack, the evaluation decode, and batching controls. All fields map 1:1 to
// dotted config keys (see docs/formats.md).
struct ExperimentConfig {
    uint64_t model_seed = 7;
    ToyFamilyConfig family;
    CalibrationSpec calib;
    AttackConfig attack;
    DecodeStrategy eval_strategy = DecodeStrategy::SAMPLING;
    double eval_temperature = 0.8;
    int eval_max_len = 12;
    int instances = 100;
    int jobs = 1;
    std::vector<TokenId> prompt; // empty = family default
    bool emit_steps = true;

    std::vector<uint64_t> transfer_seeds; // empty = model_seed .. model_seed+3
    int transfer_instances = 25;
    std::vector<double> sweep_temperatures = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.5};
    std::vector<double> sweep_lambdas = {0.0, 0.001, 0.01, 0.05, 0.1, 0.5, 1.0};
    int observe_topk = 5;
    int observe_instance = 0;

    void validate() const;
    static ExperimentConfig from_config(const ConfigMap& cfg);
    std::vector<TokenId> resolved_prompt() const;
    std::vector<uint64_t> resolved_transfer_seeds() const;
};

// One instance of the white-box pipeline: clean reference decode and verdict,
// attack, adversarial decode and verdict.
struct InstanceOutcome {
    int id = 0;
    uint64_t seed = 0;
    std::vector<Verdict> clean_verdicts;
    std::vector<Verdict> adv_verdicts;
    bool clean_success = false;
    bool adv_success = false;
    bool flip = false;
    AttackResult attack;
    Trajectory adv_decode;
    std::string error; // non-empty: the instance failed and other fields are unset
};

struct ExperimentSummary {
    int instances = 0;
    int errors = 0;
    double asr = 0.0;
    double clean_success_rate = 0.0;
    double adv_success_rate = 0.0;
    int early_stops = 0;
    double mean_steps = 0.0;
    double mean_final_entropy = 0.0;
    double mean_final_kl = 0.0;
    std::vector<std::string> judge_names;
    std::vector<double> judge_clean_refusal_rate;
    std::vector<double> judge_adv_refusal_rate;
};

struct ExperimentResult {
    std::vector<InstanceOutcome> outcomes;
    ExperimentSummary summary;
};

// Deterministic per-instance seed: every stream an instance uses hangs off
// this value, so results are independent of batch order and job count.
uint64_t instance_seed(const ExperimentConfig& cfg, int instance_id);

// Builds the calibrated model for the experiment.
ToyVlm build_model(const ExperimentConfig& cfg, uint64_t model_seed);

// Runs one instance end to end against a prepared model and panel.
InstanceOutcome run_instance(const ExperimentConfig& cfg, const ToyVlm& model,
                             const JudgePanel& panel, int instance_id);

// Runs the batch with at most cfg.jobs worker threads. When `out` is non-null
// the line records are written there in instance-id order regardless of the
// thread schedule.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* out);

struct TransferCell {
    uint64_t src_seed = 0;
    uint64_t dst_seed = 0;
    int instances = 0;
    int flips = 0;
    double asr_value = 0.0;
};

struct TransferResult {
    std::vector<uint64_t> seeds;
    std::vector<TransferCell> cells; // row-major: src-major order
    double diag_mean = 0.0;
    double offdiag_mean = 0.0;
};

// Crafts per-instance perturbations on each source model and evaluates the
// flip on every target model; the diagonal reproduces the white-box pipeline.
TransferResult transfer_matrix(const ExperimentConfig& cfg, std::ostream* out);

struct SweepPoint {
    double value = 0.0; // temperature or lambda
    ExperimentSummary summary;
};

struct SweepResult {
    std::vector<SweepPoint> points;
};

// Re-runs the full pipeline at each evaluation temperature.
SweepResult temperature_sweep(const ExperimentConfig& cfg, std::ostream* out);

// Re-runs the full pipeline at each lambda_kl (variant forced to UJEM_KL).
SweepResult kl_sweep(const ExperimentConfig& cfg, std::ostream* out);

// Runs one instance and reports how the attack moved the top-k candidates at
// the decision positions.
struct ObservationResult {
    InstanceOutcome outcome;
    std::vector<TopkShift> shifts;
};

ObservationResult observation_report(const ExperimentConfig& cfg, std::ostream* out);

struct GradCheckCase {
    std::string variant;
    int triple = 0;
    double max_rel_err = 0.0;
};

struct GradCheckResult {
    std::vector<GradCheckCase> cases;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Compares analytic and central-difference gradients for every objective
// variant over `triples` seeded (model, image, trajectory) cases. The error
// metric is the worst absolute deviation over the larger gradient sup-norm.
GradCheckResult grad_check(const ExperimentConfig& cfg, int triples, double h, double tolerance,
                           std::ostream* out);

// Shortest round-trip decimal form of a double (std::to_chars).
std::string fmt_double(double v);

// Relative-error metric used by grad_check; 0 when both vectors vanish.
double grad_rel_err(std::span<const double> a, std::span<const double> b);

} // namespace ujem
