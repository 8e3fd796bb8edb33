#include "ujem/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace ujem {

void CleanReference::validate() const {
    for (const auto& qt : q) {
        double sum = 0.0;
        for (double v : qt) {
            if (!(v >= 0.0)) throw std::invalid_argument("clean_ref: negative probability");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("clean_ref: q_t not normalized");
    }
}

const char* to_string(ObjectiveVariant v) {
    switch (v) {
        case ObjectiveVariant::UJEM: return "UJEM";
        case ObjectiveVariant::UJEM_KL: return "UJEM_KL";
        case ObjectiveVariant::UJEM_AR: return "UJEM_AR";
        case ObjectiveVariant::TARGETED_PREFIX: return "TARGETED_PREFIX";
    }
    return "?";
}

ObjectiveVariant objective_variant_from_string(const std::string& s) {
    if (s == "UJEM") return ObjectiveVariant::UJEM;
    if (s == "UJEM_KL") return ObjectiveVariant::UJEM_KL;
    if (s == "UJEM_AR") return ObjectiveVariant::UJEM_AR;
    if (s == "TARGETED_PREFIX") return ObjectiveVariant::TARGETED_PREFIX;
    throw std::invalid_argument("unknown objective variant: " + s);
}

void ObjectiveSpec::validate(int sequence_len) const {
    if (!(lambda_kl >= 0.0) || !std::isfinite(lambda_kl))
        throw std::invalid_argument("objective: lambda_kl must be finite and >= 0");
    if (!(lambda_ar >= 0.0) || !std::isfinite(lambda_ar))
        throw std::invalid_argument("objective: lambda_ar must be finite and >= 0");
    auto check_positions = [&](const std::vector<int>& ps) {
        for (int p : ps)
            if (p < 0 || p >= sequence_len)
                throw std::invalid_argument("objective: position out of range");
    };
    check_positions(sets.decision);
    check_positions(sets.structural);
    if (variant == ObjectiveVariant::UJEM_KL) {
        if (!clean_ref) throw std::invalid_argument("objective: UJEM_KL requires clean_ref");
        for (int p : sets.structural)
            if (p >= clean_ref->length())
                throw std::invalid_argument("objective: clean_ref does not cover structural set");
    }
    if (variant == ObjectiveVariant::TARGETED_PREFIX) {
        if (target_prefix.empty())
            throw std::invalid_argument("objective: TARGETED_PREFIX requires a nonempty prefix");
        if (static_cast<int>(target_prefix.size()) > sequence_len)
            throw std::invalid_argument("objective: target prefix longer than trajectory");
    }
}

double ujem_loss(std::span<const StepDistribution> dists, const DecisionSets& sets) {
    if (sets.decision.empty()) throw std::invalid_argument("ujem_loss: empty decision set");
    double sum = 0.0;
    for (int t : sets.decision) {
        if (t < 0 || static_cast<size_t>(t) >= dists.size())
            throw std::invalid_argument("ujem_loss: position out of range");
        sum += shannon_entropy(dists[static_cast<size_t>(t)]);
    }
    return sum / static_cast<double>(sets.decision.size());
}

double kl_regularizer(std::span<const StepDistribution> dists,
                      const DecisionSets& sets,
                      const CleanReference& clean_ref) {
    if (sets.structural.empty()) return 0.0;
    double sum = 0.0;
    for (int t : sets.structural) {
        if (t < 0 || static_cast<size_t>(t) >= dists.size() || t >= clean_ref.length())
            throw std::invalid_argument("kl_regularizer: position out of range");
        const auto& p = dists[static_cast<size_t>(t)].probs;
        const auto& q = clean_ref.q[static_cast<size_t>(t)];
        if (p.size() != q.size()) throw std::invalid_argument("kl_regularizer: length mismatch");
        double kl = 0.0;
        for (size_t v = 0; v < p.size(); ++v) {
            if (p[v] > 0.0) {
                if (!(q[v] > 0.0)) throw std::domain_error("kl_regularizer: p>0 where q=0");
                kl += p[v] * (std::log(p[v]) - std::log(q[v]));
            }
        }
        sum += kl;
    }
    // Floor at zero: the exact value is nonnegative, rounding may not be.
    return std::max(0.0, sum / static_cast<double>(sets.structural.size()));
}

double anti_refusal_loss(std::span<const StepDistribution> dists,
                         const DecisionSets& sets,
                         const Vocab& vocab) {
    if (sets.decision.empty()) throw std::invalid_argument("anti_refusal_loss: empty decision set");
    double sum = 0.0;
    for (int t : sets.decision) {
        if (t < 0 || static_cast<size_t>(t) >= dists.size())
            throw std::invalid_argument("anti_refusal_loss: position out of range");
        sum += refusal_mass(dists[static_cast<size_t>(t)], vocab);
    }
    return sum / static_cast<double>(sets.decision.size());
}

double targeted_prefix_loss(std::span<const StepDistribution> dists,
                            std::span<const TokenId> target_prefix) {
    if (target_prefix.empty()) throw std::invalid_argument("targeted_prefix_loss: empty prefix");
    if (target_prefix.size() > dists.size())
        throw std::invalid_argument("targeted_prefix_loss: prefix longer than trajectory");
    double sum = 0.0;
    for (size_t t = 0; t < target_prefix.size(); ++t) {
        const auto& p = dists[t].probs;
        TokenId id = target_prefix[t];
        if (id < 0 || static_cast<size_t>(id) >= p.size())
            throw std::invalid_argument("targeted_prefix_loss: token id out of range");
        sum += std::log(p[static_cast<size_t>(id)]);
    }
    return sum / static_cast<double>(target_prefix.size());
}

double combined_objective(std::span<const StepDistribution> dists,
                          const ObjectiveSpec& spec,
                          const Vocab& vocab) {
    spec.validate(static_cast<int>(dists.size()));
    switch (spec.variant) {
        case ObjectiveVariant::UJEM:
            return ujem_loss(dists, spec.sets);
        case ObjectiveVariant::UJEM_KL: {
            double value = ujem_loss(dists, spec.sets);
            // lambda of exactly zero reduces to UJEM bit-for-bit: skip the term.
            if (spec.lambda_kl != 0.0)
                value -= spec.lambda_kl * kl_regularizer(dists, spec.sets, *spec.clean_ref);
            return value;
        }
        case ObjectiveVariant::UJEM_AR: {
            double value = ujem_loss(dists, spec.sets);
            if (spec.lambda_ar != 0.0)
                value -= spec.lambda_ar * anti_refusal_loss(dists, spec.sets, vocab);
            return value;
        }
        case ObjectiveVariant::TARGETED_PREFIX:
            return targeted_prefix_loss(dists, spec.target_prefix);
    }
    throw std::invalid_argument("combined_objective: unknown variant");
}

} // namespace ujem
