#include "ujem/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ujem/rng.hpp"

namespace ujem {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

double clamp(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

} // namespace

const char* to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::SIGN_PGD: return "SIGN_PGD";
        case OptimizerKind::PROJECTED_ADAM: return "PROJECTED_ADAM";
    }
    return "SIGN_PGD";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "SIGN_PGD") return OptimizerKind::SIGN_PGD;
    if (s == "PROJECTED_ADAM") return OptimizerKind::PROJECTED_ADAM;
    throw std::invalid_argument("unknown optimizer: " + s);
}

void AttackConfig::validate() const {
    require(epsilon > 0.0, "epsilon must be positive");
    require(resolved_alpha() >= 0.0, "alpha must be >= 0");
    require(steps >= 0, "steps must be >= 0");
    require(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    require(refresh_every >= 1, "refresh_every must be >= 1");
    require(early_stop_every >= 0, "early_stop_every must be >= 0");
    require(lambda_kl >= 0.0 && lambda_ar >= 0.0, "regularizer weights must be >= 0");
    require(reference_len >= 1, "reference_len must be >= 1");
    if (variant == ObjectiveVariant::TARGETED_PREFIX) {
        require(!target_prefix.empty(), "TARGETED_PREFIX needs a non-empty target prefix");
    }
}

std::vector<double> random_start(int dim, double epsilon, uint64_t seed) {
    require(dim >= 1, "random_start dim must be >= 1");
    require(epsilon > 0.0, "random_start epsilon must be positive");
    SplitMix64 rng(derive(seed, "random-start"));
    std::vector<double> delta(static_cast<size_t>(dim));
    for (auto& d : delta) d = rng.uniform(-epsilon, epsilon);
    return delta;
}

std::vector<double> pgd_step(std::span<const double> delta,
                             std::span<const double> grad,
                             double alpha,
                             double epsilon) {
    require(delta.size() == grad.size(), "delta/grad size mismatch");
    std::vector<double> out(delta.size());
    for (size_t i = 0; i < delta.size(); ++i) {
        double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
        out[i] = clamp(delta[i] + alpha * s, -epsilon, epsilon);
    }
    return out;
}

std::vector<double> projected_adam_step(AdamState& state,
                                        std::span<const double> delta,
                                        std::span<const double> grad,
                                        double alpha,
                                        double epsilon) {
    require(delta.size() == grad.size(), "delta/grad size mismatch");
    require(state.m.size() == delta.size() && state.v.size() == delta.size(),
            "adam state size mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, state.t);
    const double bc2 = 1.0 - std::pow(state.beta2, state.t);
    std::vector<double> out(delta.size());
    for (size_t i = 0; i < delta.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        out[i] = clamp(delta[i] + alpha * mhat / (std::sqrt(vhat) + state.eps_hat), -epsilon, epsilon);
    }
    return out;
}

std::vector<double> clip_image01(std::span<const double> clean, std::span<const double> delta) {
    require(clean.size() == delta.size(), "image/delta size mismatch");
    std::vector<double> out(clean.size());
    for (size_t i = 0; i < clean.size(); ++i) out[i] = clamp(clean[i] + delta[i], 0.0, 1.0);
    return out;
}

DecisionSets refresh_decision_sets(const Model& model,
                                   std::span<const double> image,
                                   const Trajectory& traj,
                                   double rho) {
    return select_decision_sets(profile(model, image, traj), rho);
}

namespace {

ObjectiveSpec build_spec(const AttackConfig& config, const DecisionSets& sets,
                         const CleanReference& clean_ref) {
    ObjectiveSpec spec;
    spec.variant = config.variant;
    spec.sets = sets;
    switch (config.variant) {
        case ObjectiveVariant::UJEM:
            break;
        case ObjectiveVariant::UJEM_KL:
            spec.lambda_kl = config.lambda_kl;
            spec.clean_ref = clean_ref;
            break;
        case ObjectiveVariant::UJEM_AR:
            spec.lambda_ar = config.lambda_ar;
            break;
        case ObjectiveVariant::TARGETED_PREFIX:
            spec.target_prefix = config.target_prefix;
            break;
    }
    return spec;
}

TraceRecord snapshot(const DifferentiableModel& model, std::span<const double> adv,
                     const Trajectory& reference, const ObjectiveSpec& spec,
                     const CleanReference& clean_ref, int step) {
    auto dists = model.forward(adv, reference);
    TraceRecord rec;
    rec.step = step;
    rec.objective = combined_objective(dists, spec, model.vocab());
    rec.mean_entropy = ujem_loss(dists, spec.sets);
    rec.mean_kl = kl_regularizer(dists, spec.sets, clean_ref);
    rec.refusal_mass = refusal_mass(dists[static_cast<size_t>(spec.sets.decision.front())], model.vocab());
    return rec;
}

} // namespace

AttackResult run_attack(const DifferentiableModel& model,
                        std::span<const double> clean_image,
                        std::span<const TokenId> prompt,
                        const AttackConfig& config,
                        const Trajectory* reference,
                        const JudgePanel* early_stop_panel,
                        const StepObserver& observer) {
    config.validate();
    require(static_cast<int>(clean_image.size()) == model.image_dim(), "clean image dimension mismatch");
    for (double px : clean_image) require(px >= 0.0 && px <= 1.0, "clean image pixel outside [0,1]");

    AttackResult result;
    if (reference != nullptr) {
        result.reference = *reference;
        result.reference.validate(model.vocab());
        require(result.reference.length() <= model.max_response_len(),
                "reference trajectory longer than the model's capacity");
    } else {
        DecodeConfig ref_cfg;
        ref_cfg.strategy = DecodeStrategy::GREEDY;
        ref_cfg.max_len = std::min(config.reference_len, model.max_response_len());
        result.reference = decode(model, clean_image, prompt, ref_cfg);
    }
    const Trajectory& ref = result.reference;

    // Clean teacher-forced distributions, frozen for the whole attack.
    {
        auto clean_dists = model.forward(clean_image, ref);
        result.clean_ref.q.reserve(clean_dists.size());
        for (auto& d : clean_dists) result.clean_ref.q.push_back(std::move(d.probs));
    }

    const double eps = config.epsilon;
    const double alpha = config.resolved_alpha();
    const int dim = model.image_dim();

    std::vector<double> delta =
        config.random_start ? random_start(dim, eps, config.seed)
                            : std::vector<double>(static_cast<size_t>(dim), 0.0);
    std::vector<double> adv = clip_image01(clean_image, delta);

    result.sets = refresh_decision_sets(model, adv, ref, config.rho);
    AdamState adam(dim);

    for (int k = 0; k < config.steps; ++k) {
        if (k > 0 && k % config.refresh_every == 0) {
            result.sets = refresh_decision_sets(model, adv, ref, config.rho);
        }
        ObjectiveSpec spec = build_spec(config, result.sets, result.clean_ref);
        result.trace.push_back(snapshot(model, adv, ref, spec, result.clean_ref, k));

        LossGrad lg = model.loss_grad(adv, ref, spec);
        delta = config.optimizer == OptimizerKind::SIGN_PGD
                    ? pgd_step(delta, lg.grad, alpha, eps)
                    : projected_adam_step(adam, delta, lg.grad, alpha, eps);
        adv = clip_image01(clean_image, delta);
        result.steps_run = k + 1;
        if (observer) observer(k, delta, adv);

        if (config.early_stop_every > 0 && early_stop_panel != nullptr &&
            k % config.early_stop_every == 0) {
            DecodeConfig stop_cfg;
            stop_cfg.strategy = DecodeStrategy::GREEDY;
            stop_cfg.max_len = ref.length();
            Trajectory probe = decode(model, adv, ref.prompt, stop_cfg);
            if (judge_refusal(early_stop_panel->judges.front(), probe) == Verdict::NON_REFUSAL) {
                result.stopped_early_at = k;
                break;
            }
        }
    }

    result.delta = delta;
    result.adv_image = adv;
    ObjectiveSpec final_spec = build_spec(config, result.sets, result.clean_ref);
    result.final_snapshot =
        snapshot(model, adv, ref, final_spec, result.clean_ref, result.steps_run);
    return result;
}

double asr(std::span<const uint8_t> flips) {
    if (flips.empty()) return 0.0;
    double s = 0.0;
    for (uint8_t f : flips) s += f != 0 ? 1.0 : 0.0;
    return s / static_cast<double>(flips.size());
}

} // namespace ujem
