#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ujem/profile.hpp"
#include "ujem/types.hpp"

namespace ujem {

// Frozen clean teacher-forced distributions q_1..q_T. Treated as constant
// data everywhere: no gradient ever flows through these.
struct CleanReference {
    std::vector<std::vector<double>> q;

    int length() const { return static_cast<int>(q.size()); }
    void validate() const; // each q_t normalized within 1e-9
};

enum class ObjectiveVariant { UJEM, UJEM_KL, UJEM_AR, TARGETED_PREFIX };

const char* to_string(ObjectiveVariant v);
ObjectiveVariant objective_variant_from_string(const std::string& s);

// Which loss is maximized, with its weights, position sets and frozen
// references. The attack loop fills sets/clean_ref; configs carry only the
// variant, weights and target prefix.
struct ObjectiveSpec {
    ObjectiveVariant variant = ObjectiveVariant::UJEM;
    double lambda_kl = 0.0;
    double lambda_ar = 0.0;
    DecisionSets sets;
    std::optional<CleanReference> clean_ref;
    std::vector<TokenId> target_prefix;

    // Throws when a variant-required field is missing or positions exceed T.
    void validate(int sequence_len) const;
};

// Mean teacher-forced entropy over the decision set (nats). Higher is better
// for the attacker.
double ujem_loss(std::span<const StepDistribution> dists, const DecisionSets& sets);

// Mean KL(p_t || q_t) over the structural set, in nats. Empty structural set
// gives 0.
double kl_regularizer(std::span<const StepDistribution> dists,
                      const DecisionSets& sets,
                      const CleanReference& clean_ref);

// Mean refusal mass over the decision set, in [0,1].
double anti_refusal_loss(std::span<const StepDistribution> dists,
                         const DecisionSets& sets,
                         const Vocab& vocab);

// Mean log-likelihood of a fixed prefix at positions 1..|prefix|. Always <= 0.
double targeted_prefix_loss(std::span<const StepDistribution> dists,
                            std::span<const TokenId> target_prefix);

// Dispatches on the variant; the returned value is maximized by the optimizer
// in every case.
double combined_objective(std::span<const StepDistribution> dists,
                          const ObjectiveSpec& spec,
                          const Vocab& vocab);

} // namespace ujem
