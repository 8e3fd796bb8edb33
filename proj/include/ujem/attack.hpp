#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ujem/decode.hpp"
#include "ujem/model.hpp"
#include "ujem/objectives.hpp"
#include "ujem/profile.hpp"
#include "ujem/types.hpp"

namespace ujem {

enum class OptimizerKind { SIGN_PGD, PROJECTED_ADAM };

const char* to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& s);

// Attack hyperparameters. alpha left unset resolves to epsilon/10. An
// early_stop_every of 0 disables the periodic judged decode.
struct AttackConfig {
    ObjectiveVariant variant = ObjectiveVariant::UJEM_KL;
    double epsilon = 8.0 / 255.0;
    std::optional<double> alpha;
    int steps = 100;
    double rho = 0.2;
    int refresh_every = 20;
    int early_stop_every = 20;
    double lambda_kl = 0.01;
    double lambda_ar = 0.1;
    OptimizerKind optimizer = OptimizerKind::SIGN_PGD;
    bool random_start = true;
    uint64_t seed = 0;
    int reference_len = 12; // fallback greedy rollout length when no reference is supplied
    std::vector<TokenId> target_prefix; // TARGETED_PREFIX only

    double resolved_alpha() const { return alpha.has_value() ? *alpha : epsilon / 10.0; }
    void validate() const;
};

// Per-step snapshot taken before the update at that step. objective is the
// maximized value; entropy/kl are the decision/structural means; refusal_mass
// is measured at the earliest decision position.
struct TraceRecord {
    int step = 0;
    double objective = 0.0;
    double mean_entropy = 0.0;
    double mean_kl = 0.0;
    double refusal_mass = 0.0;
};

struct AttackResult {
    std::vector<double> delta;     // final perturbation, inside the ball
    std::vector<double> adv_image; // clip(clean + delta, [0,1])
    Trajectory reference;          // teacher-forcing trajectory
    DecisionSets sets;             // last selected position sets
    CleanReference clean_ref;      // frozen clean distributions
    std::vector<TraceRecord> trace;
    TraceRecord final_snapshot;    // state after the last update
    int steps_run = 0;
    std::optional<int> stopped_early_at;
};

// Invoked after every completed update with the projected state; used for
// invariant monitoring.
using StepObserver =
    std::function<void(int step, std::span<const double> delta, std::span<const double> adv_image)>;

// Uniform point in the epsilon sup-norm ball, seeded from the attack seed.
std::vector<double> random_start(int dim, double epsilon, uint64_t seed);

// One ascent step: delta + alpha * sign(grad), then projection onto the ball.
std::vector<double> pgd_step(std::span<const double> delta,
                             std::span<const double> grad,
                             double alpha,
                             double epsilon);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    int t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_hat = 1e-8;

    explicit AdamState(int dim) : m(static_cast<size_t>(dim), 0.0), v(static_cast<size_t>(dim), 0.0) {}
};

// Bias-corrected Adam ascent step followed by projection onto the ball.
std::vector<double> projected_adam_step(AdamState& state,
                                        std::span<const double> delta,
                                        std::span<const double> grad,
                                        double alpha,
                                        double epsilon);

std::vector<double> clip_image01(std::span<const double> clean, std::span<const double> delta);

DecisionSets refresh_decision_sets(const Model& model,
                                   std::span<const double> image,
                                   const Trajectory& traj,
                                   double rho);

// The full attack loop: frozen greedy reference (decoded if not supplied),
// clean distributions captured once, position sets refreshed every
// refresh_every steps under the current adversarial image, first-order ascent
// with projection, optional early stop via a judged greedy decode.
AttackResult run_attack(const DifferentiableModel& model,
                        std::span<const double> clean_image,
                        std::span<const TokenId> prompt,
                        const AttackConfig& config,
                        const Trajectory* reference = nullptr,
                        const JudgePanel* early_stop_panel = nullptr,
                        const StepObserver& observer = nullptr);

// Fraction of instances whose verdict flipped; empty input gives 0.
double asr(std::span<const uint8_t> flips);

} // namespace ujem
